"""Factory: spawns the per-transfer ephemeral actors and certifies their context.

Certification is a MAC under the simulator root key that every actor learns at
world creation. Ephemerals are installed with their controller removed, so
the Factory is also the only path by which they are destroyed.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import bcoding
import structlog

from crypto_suite import DIGEST_SIZE, DetRandom, DomainTag, blake2s_event, hmac_sha3, hmac_verify, sha3_256
from errors import SpawnError, SpawnRejected
from kem_capsule import TransferContext
from noticeboard import rendezvous_token
from simulator import (EPHEMERAL_ROLES, MSG_CLEANUP, MSG_DESTROYED, MSG_DESTRUCT_INTENT, ROLE_FACTORY, ROLE_I1,
                       ROLE_I2, ROLE_STORAGE, ROLE_WITNESS, Actor, Message, Simulation)
from utils import decode_string, get_key

logger = structlog.get_logger(__name__)

POLICY_PREFER_DISTINCT = "prefer-distinct"
POLICY_STRICT = "strict"
POLICIES = (POLICY_PREFER_DISTINCT, POLICY_STRICT)
CONTEXT_FORMAT = "spawn-context/1"

# Fixture code identities per role
CODE_HASHES: Dict[str, str] = {role: sha3_256(f"wasm:{role}:v1".encode()).hex() for role in EPHEMERAL_ROLES}


@dataclass(frozen=True)
class SpawnEntry:
    actor_id: str
    role: str
    subnet: str
    code_hash: str
    blackholed: bool

    def to_dict(self) -> Dict:
        return {"actor_id": self.actor_id, "blackholed": int(self.blackholed), "code_hash": self.code_hash,
                "role": self.role, "subnet": self.subnet}

    @classmethod
    def from_dict(cls, data: Dict) -> "SpawnEntry":
        return cls(
            actor_id=decode_string(get_key(data, "actor_id")),
            role=decode_string(get_key(data, "role")),
            subnet=decode_string(get_key(data, "subnet")),
            code_hash=decode_string(get_key(data, "code_hash")),
            blackholed=bool(get_key(data, "blackholed")),
        )


@dataclass(frozen=True)
class SpawnContext:
    factory_txid: str
    deposit_id: str
    entries: Tuple[SpawnEntry, ...]
    policy: str
    ttl: int  # absolute deadline tick
    params_digest: bytes
    refund_output: str
    placement_distinct: bool

    def to_bytes(self) -> bytes:
        return bcoding.bencode({
            "deposit_id": self.deposit_id,
            "entries": [e.to_dict() for e in self.entries],
            "factory_txid": self.factory_txid,
            "format": CONTEXT_FORMAT,
            "params_digest": self.params_digest.hex(),
            "placement_distinct": int(self.placement_distinct),
            "policy": self.policy,
            "refund_output": self.refund_output,
            "ttl": self.ttl,
        })

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpawnContext":
        try:
            decoded = bcoding.bdecode(data)
            if decode_string(get_key(decoded, "format")) != CONTEXT_FORMAT:
                raise SpawnRejected("format", "unknown spawn context format")
            return cls(
                factory_txid=decode_string(get_key(decoded, "factory_txid")),
                deposit_id=decode_string(get_key(decoded, "deposit_id")),
                entries=tuple(SpawnEntry.from_dict(e) for e in get_key(decoded, "entries")),
                policy=decode_string(get_key(decoded, "policy")),
                ttl=int(get_key(decoded, "ttl")),
                params_digest=bytes.fromhex(decode_string(get_key(decoded, "params_digest"))),
                refund_output=decode_string(get_key(decoded, "refund_output")),
                placement_distinct=bool(get_key(decoded, "placement_distinct")),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise SpawnRejected("format", str(e)) from None

    def commit(self) -> bytes:
        return blake2s_event(DomainTag.CONTEXT_COMMIT, [CONTEXT_FORMAT.encode(), self.to_bytes()])

    def ids_of(self, role: str) -> List[str]:
        return [e.actor_id for e in self.entries if e.role == role]

    def id_of(self, role: str) -> str:
        ids = self.ids_of(role)
        if len(ids) != 1:
            raise SpawnRejected("role-count", f"{role} appears {len(ids)} times")
        return ids[0]

    def entry_of(self, actor_id: str) -> Optional[SpawnEntry]:
        for entry in self.entries:
            if entry.actor_id == actor_id:
                return entry
        return None

    def code_hash_of(self, role: str) -> str:
        return self.entry_of(self.id_of(role)).code_hash

    def storage_ids(self) -> List[str]:
        return self.ids_of(ROLE_STORAGE)

    # Actors whose DestructProof a Finalize must carry
    def teardown_subjects(self) -> List[str]:
        return [self.id_of(ROLE_I1), self.id_of(ROLE_I2)] + self.storage_ids()

    def transfer_context(self) -> TransferContext:
        return TransferContext(
            factory_txid=self.factory_txid,
            canister_ids=tuple(e.actor_id for e in self.entries),
            subnets=tuple(e.subnet for e in self.entries),
            ttl=self.ttl,
            code_hashes=tuple(e.code_hash for e in self.entries),
            params_digest=self.params_digest,
            deposit_id=self.deposit_id,
            refund_output=self.refund_output,
        )


@dataclass(frozen=True)
class SpawnProof:
    context: SpawnContext
    client_nonce: bytes
    signature: bytes

    def signed_message(self) -> bytes:
        return self.context.commit() + self.client_nonce

    def verify(self, root_key: bytes) -> bool:
        return hmac_verify(root_key, self.signed_message(), self.signature)

    def to_bytes(self) -> bytes:
        return bcoding.bencode({"client_nonce": self.client_nonce.hex(), "context": self.context.to_bytes().hex(),
                                "signature": self.signature.hex()})

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpawnProof":
        try:
            decoded = bcoding.bdecode(data)
            context = bytes.fromhex(decode_string(get_key(decoded, "context")))
            nonce = bytes.fromhex(decode_string(get_key(decoded, "client_nonce")))
            signature = bytes.fromhex(decode_string(get_key(decoded, "signature")))
        except (KeyError, ValueError, TypeError) as e:
            raise SpawnRejected("format", str(e)) from None
        return cls(SpawnContext.from_bytes(context), nonce, signature)


# Pick a subnet not yet used by this transfer when one remains
def select_subnet_prefer_distinct(pool: Sequence[str], used: Iterable[str], rng: DetRandom) -> str:
    if not pool:
        raise SpawnError(detail="no subnets configured")
    taken = set(used)
    fresh = [s for s in pool if s not in taken]
    candidates = fresh or list(pool)
    return candidates[rng.randbelow(len(candidates))]


class Factory(Actor):
    """Creates, certifies and removes ephemeral actors."""

    role = ROLE_FACTORY

    def __init__(self, sim: Simulation, subnets: Sequence[str], root_key: bytes, capacity: Optional[int] = None):
        super().__init__(sim, subnet="permanent", actor_id=f"{ROLE_FACTORY}-main")
        self.subnets = list(subnets)
        self._root_key = root_key
        self.capacity = capacity  # max ephemerals ever created; None means unbounded
        self.created = 0
        self.rng = sim.stream("factory")
        self.children: Dict[str, Actor] = {}
        self.witness_of: Dict[str, str] = {}  # child id -> witness id
        self.destroyed: List[str] = []
        self.certified: List[SpawnProof] = []

    def _reserve(self, count: int):
        if self.capacity is not None and self.created + count > self.capacity:
            raise SpawnError(detail=f"{self.created} of {self.capacity} actors in use")
        self.created += count

    def _place(self, used: List[str]) -> str:
        subnet = select_subnet_prefer_distinct(self.subnets, used, self.rng)
        used.append(subnet)
        return subnet

    def spawn(self, deposit_id: str, n: int, policy: str, deadline: int, params_digest: bytes,
              client_nonce: bytes, refund_output: str, install) -> SpawnProof:
        """Spawn I1, I2 and C_1..C_n, then W, and certify the resulting context.

        ``install`` is called with (actor_id, role, subnet) and must return the
        constructed actor; provisioning happens once the context is signed.
        """
        if n < 1:
            raise SpawnError("bad-n", str(n))
        if policy not in POLICIES:
            raise SpawnError("bad-policy", policy)
        self._reserve(n + 3)

        used: List[str] = []
        actors: List[Actor] = []
        for role in [ROLE_I1, ROLE_I2] + [ROLE_STORAGE] * n:
            actors.append(install(self.sim.new_actor_id(role), role, self._place(used)))
        witness = self.witness_spawn(used, install)
        actors.append(witness)

        entries = tuple(SpawnEntry(a.actor_id, a.role, a.subnet, CODE_HASHES[a.role], True) for a in actors)
        for actor in actors:
            actor.blackholed = True
            self.children[actor.actor_id] = actor
            self.witness_of[actor.actor_id] = witness.actor_id

        context = SpawnContext(
            factory_txid=f"tx-{self.rng.read(8).hex()}",
            deposit_id=deposit_id,
            entries=entries,
            policy=policy,
            ttl=deadline,
            params_digest=params_digest,
            refund_output=refund_output,
            placement_distinct=len(set(used)) == len(used),
        )
        proof = SpawnProof(context, client_nonce, hmac_sha3(self._root_key, context.commit() + client_nonce))
        self.certified.append(proof)
        self.record("spawn-context", deposit_id=deposit_id, commit=context.commit(), context=context.to_bytes())
        logger.info("factory.spawned", deposit_id=deposit_id, actors=len(actors),
                    distinct=context.placement_distinct)
        return proof

    # W is spawned after every C_i and prefers a subnet none of them use
    def witness_spawn(self, used: List[str], install) -> Actor:
        return install(self.sim.new_actor_id(ROLE_WITNESS), ROLE_WITNESS, self._place(used))

    def new_install_secret(self) -> bytes:
        return self.rng.read(DIGEST_SIZE)

    def _handle_message(self, message: Message):
        if message.kind == MSG_CLEANUP:
            self.cleanup_child(message.src, message.body)
        else:
            super()._handle_message(message)

    # Staged destruction: intent to W, tombstone and zeroize, then proof to W
    def cleanup_child(self, child_id: str, intent: Dict):
        child = self.children.get(child_id)
        if child is None:
            self.record("reject", reason="not-a-child", to=child_id)
            return
        if not child.alive:
            self.record("reject", reason="already-destroyed", to=child_id)
            return
        witness_id = self.witness_of[child_id]
        is_witness = child_id == witness_id
        if not is_witness:
            self.send(witness_id, MSG_DESTRUCT_INTENT, subject=child_id, deadline=intent.get("deadline", 0),
                      served=bool(intent.get("served", False)))
        child.zeroize()
        child.alive = False
        self.destroyed.append(child_id)
        self.record("destroy", subject=child_id)
        if not is_witness:
            self.send(witness_id, MSG_DESTROYED, subject=child_id)
        logger.debug("factory.destroyed", subject=child_id)

    # Find the certified context whose I2 matches a rendezvous token
    def resolve_rendezvous(self, idx: int, token: bytes) -> Optional[SpawnProof]:
        for proof in self.certified:
            i2_ids = proof.context.ids_of(ROLE_I2)
            if len(i2_ids) == 1 and rendezvous_token(idx, i2_ids[0]) == token:
                return proof
        return None


def client_verify_spawn(proof: SpawnProof, root_key: bytes, n: int, policy: str = POLICY_PREFER_DISTINCT,
                        expected_code_hashes: Optional[Dict[str, str]] = None) -> bool:
    """Raise SpawnRejected naming the first failing check."""
    expected = expected_code_hashes or CODE_HASHES
    context = proof.context
    if not proof.verify(root_key):
        raise SpawnRejected("signature")

    for role in (ROLE_I1, ROLE_I2, ROLE_WITNESS):
        if len(context.ids_of(role)) != 1:
            raise SpawnRejected("role-count", role)
    storage = context.storage_ids()
    if len(storage) != n or len(set(storage)) != n:
        raise SpawnRejected("role-count", f"{len(set(storage))} distinct C_i, {n} expected")
    if len({e.actor_id for e in context.entries}) != len(context.entries):
        raise SpawnRejected("role-count", "duplicate actor id")

    for entry in context.entries:
        if entry.code_hash != expected.get(entry.role):
            raise SpawnRejected("code-hash", entry.actor_id)
    for entry in context.entries:
        if not entry.blackholed:
            raise SpawnRejected("controller", entry.actor_id)

    if policy == POLICY_STRICT:
        subnets = [e.subnet for e in context.entries if e.role != ROLE_WITNESS]
        if len(set(subnets)) != len(subnets):
            raise SpawnRejected("placement", "co-located ephemerals")
    return True


def client_verify_witness(proof: SpawnProof, root_key: bytes, n: int, policy: str = POLICY_PREFER_DISTINCT,
                          expected_code_hashes: Optional[Dict[str, str]] = None) -> bool:
    client_verify_spawn(proof, root_key, n, policy, expected_code_hashes)
    if policy == POLICY_STRICT:
        context = proof.context
        witness = context.entry_of(context.id_of(ROLE_WITNESS))
        others = {e.subnet for e in context.entries if e.role != ROLE_WITNESS}
        if witness.subnet in others:
            raise SpawnRejected("witness-placement", witness.subnet)
    return True
