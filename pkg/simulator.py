"""Deterministic discrete-event loop shared by every simulated actor.

Events are ordered by (tick, insertion order). Delivering a message costs one
tick. Each delivery is written to the trace, which is the byte-stable record
consumed by the auditor.
"""
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import structlog

from crypto_suite import DetRandom

logger = structlog.get_logger(__name__)

# Actor roles
ROLE_FACTORY = "Factory"
ROLE_ROUTER = "Router"
ROLE_I1 = "I1"
ROLE_I2 = "I2"
ROLE_STORAGE = "C"
ROLE_WITNESS = "W"
ROLE_NOTICEBOARD = "Noticeboard"
ROLE_LEDGER = "Ledger"
ROLE_CLIENT = "Client"
EPHEMERAL_ROLES = (ROLE_I1, ROLE_I2, ROLE_STORAGE, ROLE_WITNESS)

# Message kinds
MSG_ALLOCATE = "allocate"
MSG_SPAWNED = "spawned"
MSG_REJECT = "reject"
MSG_DEPOSIT = "deposit"
MSG_DEPOSIT_ACK = "deposit-ack"
MSG_STORE = "store"
MSG_STORED = "stored"
MSG_COMMIT = "commit"
MSG_ANNOUNCE = "announce"
MSG_ANNOUNCED = "announced"
MSG_SEAL = "seal"
MSG_CLEANUP = "cleanup"
MSG_DESTRUCT_INTENT = "destruct-intent"
MSG_DESTROYED = "destroyed"
MSG_FETCH_CAPSULE = "fetch-capsule"
MSG_CAPSULE = "capsule"
MSG_FETCH = "fetch"
MSG_TUPLE = "tuple"
MSG_RETRIEVE = "retrieve"
MSG_DELIVER = "deliver"
MSG_TEARDOWN = "teardown"
MSG_PAYOUT = "payout"
MSG_FINALIZE = "finalize"
MSG_RECLAIM_REQUEST = "reclaim-request"
MSG_CHALLENGE = "challenge"
MSG_RECLAIM_CLAIM = "reclaim-claim"
MSG_RECLAIM_RESULT = "reclaim-result"

# Timer kinds
TIMER_EXPIRE = "expire"
TIMER_STORE = "store-timeout"
TIMER_FETCH = "fetch-timeout"
TIMER_CLEANUP = "cleanup-delay"

WORLD_ACTOR = "world"
MAX_STEPS = 5_000_000


def role_of(actor_id: str) -> str:
    return actor_id.split("-", 1)[0]


@dataclass
class Message:
    src: str
    dst: str
    kind: str
    body: Dict[str, Any] = field(default_factory=dict)
    timer: bool = False


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    actor: str
    kind: str
    fields: Tuple[Tuple[str, str], ...] = ()

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    # tick actor kind key=value ... with keys sorted
    def to_line(self) -> str:
        parts = [f"{self.tick:08d}", self.actor, self.kind]
        parts.extend(f"{k}={v}" for k, v in self.fields)
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"malformed trace line: {line!r}")
        fields = []
        for part in parts[3:]:
            key, _, value = part.partition("=")
            fields.append((key, value))
        return cls(int(parts[0]), parts[1], parts[2], tuple(fields))


def _field_value(value: Any) -> str:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


class Simulation:
    """Single logical event loop; actors never share mutable state."""

    def __init__(self, seed: bytes):
        self.seed = seed
        self.tick = 0
        self.actors: Dict[str, "Actor"] = {}
        self.trace: List[TraceRecord] = []
        self._queue: List[Tuple[int, int, Message]] = []
        self._seq = itertools.count()
        self._id_stream = DetRandom("actor-ids", seed)
        self.steps = 0

    # Independent randomness stream for one actor or service
    def stream(self, label: str) -> DetRandom:
        return DetRandom(f"sim/{label}", self.seed)

    def new_actor_id(self, role: str) -> str:
        return f"{role}-{self._id_stream.read(6).hex()}"

    def register(self, actor: "Actor"):
        if actor.actor_id in self.actors:
            raise ValueError(f"duplicate actor id {actor.actor_id}")
        self.actors[actor.actor_id] = actor

    def record(self, actor: str, kind: str, **fields):
        items = tuple(sorted((k, _field_value(v)) for k, v in fields.items()))
        self.trace.append(TraceRecord(self.tick, actor, kind, items))

    def send(self, src: str, dst: str, kind: str, body: Optional[Dict[str, Any]] = None):
        self._push(self.tick + 1, Message(src, dst, kind, body or {}))

    def set_timer(self, actor_id: str, at_tick: int, kind: str, body: Optional[Dict[str, Any]] = None):
        self._push(max(at_tick, self.tick), Message(actor_id, actor_id, kind, body or {}, timer=True))

    def _push(self, tick: int, message: Message):
        heapq.heappush(self._queue, (tick, next(self._seq), message))

    @property
    def idle(self) -> bool:
        return not self._queue

    def next_tick(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    # Process one event
    def step(self) -> bool:
        if not self._queue:
            return False
        tick, _, message = heapq.heappop(self._queue)
        self.tick = max(self.tick, tick)
        self.steps += 1
        if self.steps > MAX_STEPS:
            raise RuntimeError("simulation step limit exceeded")
        self._deliver(message)
        return True

    def _deliver(self, message: Message):
        actor = self.actors.get(message.dst)
        if actor is None or not actor.alive:
            if not message.timer:
                self.record(message.dst, "drop", src=message.src, msg=message.kind, why="gone")
            return
        if message.timer:
            self.record(actor.actor_id, "timer", msg=message.kind)
            actor.handle_timer(message)
            return
        if not actor.available:
            self.record(actor.actor_id, "drop", src=message.src, msg=message.kind, why="unavailable")
            return
        self.record(actor.actor_id, "recv", src=message.src, msg=message.kind)
        actor.observe(message.src)
        actor.handle(message)

    # Run until the predicate holds or the queue drains
    def run_until(self, predicate: Callable[[], bool]) -> bool:
        while not predicate():
            if not self.step():
                return predicate()
        return True

    # Process every event scheduled up to and including tick
    def advance_to(self, tick: int):
        while self._queue and self._queue[0][0] <= tick:
            self.step()
        self.tick = max(self.tick, tick)

    def run(self):
        while self.step():
            pass

    def trace_lines(self) -> List[str]:
        return [record.to_line() for record in self.trace]

    def write_trace(self, path: str):
        with open(path, 'w') as f:
            for line in self.trace_lines():
                f.write(line + "\n")


class Actor:
    """Base state machine: one message at a time, no shared state."""

    role = ROLE_CLIENT

    def __init__(self, sim: Simulation, subnet: str = "", actor_id: Optional[str] = None):
        self.sim = sim
        self.actor_id = actor_id or sim.new_actor_id(self.role)
        self.subnet = subnet
        self.alive = True       # False once destroyed
        self.available = True   # False when the actor stops answering
        self.blackholed = False
        self.observed: List[str] = []
        sim.register(self)

    def send(self, dst: str, kind: str, **body):
        self.sim.send(self.actor_id, dst, kind, body)

    def record(self, kind: str, **fields):
        self.sim.record(self.actor_id, kind, **fields)

    def observe(self, src: str):
        if src not in self.observed:
            self.observed.append(src)

    def reject(self, dst: str, reason: str, **body):
        self.record("reject", reason=reason, to=dst)
        self.send(dst, MSG_REJECT, reason=reason, **body)

    # Handle an incoming message
    def handle(self, message: Message):
        self._handle_message(message)

    def _handle_message(self, message: Message):
        self.record("unhandled", msg=message.kind)

    def handle_timer(self, message: Message):
        self.record("unhandled-timer", msg=message.kind)

    # Drop secrets held in memory
    def zeroize(self):
        pass
