"""The per-transfer ephemeral actors: I1, I2, the storage actors C_i and the witness W.

Each actor is installed by the Factory, provisioned with the certified spawn
context and the ids it may talk to, and removed only through the Factory.
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import bcoding
import structlog
from bitstring import BitArray
from cryptography.hazmat.primitives import constant_time

from crypto_suite import (DIGEST_SIZE, IV_SIZE, DetRandom, DomainTag, KeyMaterial, aead_open, aead_seal,
                          blake2s_event, derive_key, sha3_256)
from errors import AuthenticationFailure, RdmpfError
from noticeboard import COMMIT, DESTRUCT_INTENT, DESTRUCT_PROOF, GENESIS, event_digest
from simulator import (MSG_ANNOUNCE, MSG_ANNOUNCED, MSG_CAPSULE, MSG_CLEANUP, MSG_COMMIT, MSG_DELIVER, MSG_DEPOSIT,
                       MSG_DEPOSIT_ACK, MSG_DESTROYED, MSG_DESTRUCT_INTENT, MSG_FETCH, MSG_FETCH_CAPSULE,
                       MSG_FINALIZE, MSG_PAYOUT, MSG_RETRIEVE, MSG_SEAL, MSG_STORE, MSG_STORED, MSG_TEARDOWN,
                       MSG_TUPLE, ROLE_FACTORY, ROLE_I1, ROLE_I2, ROLE_STORAGE, ROLE_WITNESS, TIMER_CLEANUP,
                       TIMER_EXPIRE, TIMER_FETCH, TIMER_STORE, Actor, Message, Simulation)
from utils import flip_bit, get_hex, length_prefixed

logger = structlog.get_logger(__name__)

CSRN_SIZE = 32
CSRN_NONCE_SIZE = 32
EXPIRY_MARGIN = 4          # non-witness ephemerals start teardown this many ticks before the deadline
WITNESS_EXPIRY_MARGIN = 1
STORE_TIMEOUT = 16
FETCH_TIMEOUT = 6
CLEANUP_DELAY = 3


@dataclass(frozen=True)
class SealedTuple:
    """Opaque record stored identically at every C_i."""
    hint: bytes
    capsule: bytes
    envelope: bytes
    reclaim_tag: bytes
    c: bytes

    def to_bytes(self) -> bytes:
        return bcoding.bencode({"c": self.c.hex(), "capsule": self.capsule.hex(), "envelope": self.envelope.hex(),
                                "hint": self.hint.hex(), "reclaim_tag": self.reclaim_tag.hex()})

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedTuple":
        try:
            decoded = bcoding.bdecode(data)
            return cls(get_hex(decoded, "hint"), get_hex(decoded, "capsule"), get_hex(decoded, "envelope"),
                       get_hex(decoded, "reclaim_tag"), get_hex(decoded, "c"))
        except (KeyError, ValueError, TypeError, IndexError, AttributeError) as e:
            raise RdmpfError("bad-tuple", str(e)) from None

    def hint_matches(self) -> bool:
        return constant_time.bytes_eq(sha3_256(self.capsule), self.hint)


@dataclass(frozen=True)
class CsrnReceipt:
    nonce: bytes
    ct: bytes  # iv || AEAD(csrn)


def _transit_key(deposit_id: str, alice_principal: str, nonce: bytes) -> KeyMaterial:
    return KeyMaterial(sha3_256(length_prefixed([deposit_id.encode(), alice_principal.encode(), nonce])), "transit")


def csrn_issue(rng: DetRandom, deposit_id: str, alice_principal: str):
    """Fresh 32-byte receipt nonce plus its sealed form for the sender."""
    csrn = rng.read(CSRN_SIZE)
    nonce = rng.read(CSRN_NONCE_SIZE)
    iv = rng.read(IV_SIZE)
    with _transit_key(deposit_id, alice_principal, nonce) as key:
        ct = iv + aead_seal(key, iv, deposit_id.encode(), csrn)
    return csrn, CsrnReceipt(nonce, ct)


def csrn_unwrap(deposit_id: str, alice_principal: str, receipt: CsrnReceipt) -> bytes:
    iv, sealed = receipt.ct[:IV_SIZE], receipt.ct[IV_SIZE:]
    with _transit_key(deposit_id, alice_principal, receipt.nonce) as key:
        return aead_open(key, iv, deposit_id.encode(), sealed)


def _unseal_key(install_secret: bytes, context_commit: bytes) -> KeyMaterial:
    return derive_key(install_secret, context_commit, DomainTag.CONTEXT_COMMIT, "enc")


# h sealed for I2 under a key only I1 and I2 of this transfer can derive
def seal_unseal_token(install_secret: bytes, context_commit: bytes, h: bytes, rng: DetRandom) -> bytes:
    iv = rng.read(IV_SIZE)
    with _unseal_key(install_secret, context_commit) as key:
        return iv + aead_seal(key, iv, context_commit, h)


def open_unseal_token(install_secret: bytes, context_commit: bytes, token: bytes) -> bytes:
    with _unseal_key(install_secret, context_commit) as key:
        return aead_open(key, token[:IV_SIZE], context_commit, token[IV_SIZE:])


class Ephemeral(Actor):
    """Shared provisioning and teardown for the transfer-scoped actors."""

    expiry_margin = EXPIRY_MARGIN

    def __init__(self, sim: Simulation, subnet: str, actor_id: str):
        super().__init__(sim, subnet, actor_id)
        self.context = None
        self.factory_id = f"{ROLE_FACTORY}-main"
        self.deadline = 0
        self.rng: Optional[DetRandom] = None
        self.cleanup_requested = False

    def provision(self, context, deadline: int, rng: DetRandom, **routes):
        self.context = context
        self.commit = context.commit()
        self.deadline = deadline
        self.rng = rng
        for name, value in routes.items():
            setattr(self, name, value)
        self.sim.set_timer(self.actor_id, deadline - self.expiry_margin, TIMER_EXPIRE)
        self.record("provisioned", deadline=deadline, **{k: _route_repr(v) for k, v in routes.items()
                                                          if k.endswith("_id") or k.endswith("_ids")})

    # Ask the Factory to remove this actor
    def request_cleanup(self, served: bool = False):
        if self.cleanup_requested:
            return
        self.cleanup_requested = True
        self.send(self.factory_id, MSG_CLEANUP, deadline=self.deadline, served=served)

    def handle_timer(self, message: Message):
        if message.kind == TIMER_EXPIRE:
            self.record("expire")
            self.on_expire()
        else:
            self.on_timer(message)

    def on_expire(self):
        self.request_cleanup()

    def on_timer(self, message: Message):
        super().handle_timer(message)


def _route_repr(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(value)
    return str(value)


class DepositIntermediary(Ephemeral):
    """I1: accepts Alice's tuple, replicates it to every C_i and announces it."""

    role = ROLE_I1

    def __init__(self, sim: Simulation, subnet: str, actor_id: str):
        super().__init__(sim, subnet, actor_id)
        self.storage_ids: List[str] = []
        self.noticeboard_id = ""
        self.router_id = ""
        self.rendezvous_target = ""
        self.install_secret = b""
        self.code_hash = ""
        self.deposited = False
        self.alice: Optional[str] = None
        self.tuple: Optional[SealedTuple] = None
        self.token = b""
        self.csrn = b""
        self.receipt: Optional[CsrnReceipt] = None
        self.acks = set()
        self.announced = False
        self.aborted = False

    def _handle_message(self, message: Message):
        if message.kind == MSG_DEPOSIT:
            self._handle_deposit(message)
        elif message.kind == MSG_STORED:
            self._handle_stored(message)
        elif message.kind == MSG_ANNOUNCED:
            self._handle_announced(message)
        else:
            super()._handle_message(message)

    def _handle_deposit(self, message: Message):
        body = message.body
        if self.deposited:
            self.reject(message.src, "double-deposit")
            return
        if body.get("deposit_id") != self.context.deposit_id:
            self.reject(message.src, "wrong-deposit")
            return
        if not body.get("fee_proof"):
            self.reject(message.src, "fee")
            return
        h = body.get("h")
        if not isinstance(h, bytes) or len(h) != DIGEST_SIZE:
            self.reject(message.src, "bad-h")
            return
        try:
            sealed = SealedTuple.from_bytes(body.get("tuple", b""))
        except RdmpfError:
            self.reject(message.src, "bad-tuple")
            return
        if not sealed.hint_matches():
            self.reject(message.src, "bad-hint")
            return

        self.deposited = True
        self.alice = message.src
        self.tuple = sealed
        self.token = seal_unseal_token(self.install_secret, self.commit, h, self.rng)
        self.sim.set_timer(self.actor_id, self.sim.tick + STORE_TIMEOUT, TIMER_STORE)
        # C_1 samples the csrn; the others get a replica
        self.send(self.storage_ids[0], MSG_STORE, tuple=sealed.to_bytes(), token=self.token, issue=True,
                  deposit_id=self.context.deposit_id, principal=message.src)
        logger.debug("i1.deposit", deposit_id=self.context.deposit_id)

    def _handle_stored(self, message: Message):
        if message.src not in self.storage_ids or self.aborted or message.src in self.acks:
            return
        self.acks.add(message.src)
        if message.src == self.storage_ids[0]:
            self.csrn = message.body["csrn"]
            self.receipt = CsrnReceipt(message.body["nonce"], message.body["ct"])
            for storage_id in self.storage_ids[1:]:
                self.send(storage_id, MSG_STORE, tuple=self.tuple.to_bytes(), token=self.token, issue=False,
                          csrn=self.csrn, deposit_id=self.context.deposit_id)
        if len(self.acks) == len(self.storage_ids):
            self.send(self.noticeboard_id, MSG_ANNOUNCE, hint=self.tuple.hint, code_hash=self.code_hash,
                      rendezvous_target=self.rendezvous_target)

    def _handle_announced(self, message: Message):
        if message.src != self.noticeboard_id or self.announced:
            return
        self.announced = True
        idx = message.body["idx"]
        self.send(self.router_id, MSG_SEAL, deposit_id=self.context.deposit_id, idx=idx,
                  reclaim_tag=self.tuple.reclaim_tag, c=self.tuple.c)
        self.send(self.alice, MSG_DEPOSIT_ACK, idx=idx, nonce=self.receipt.nonce, ct=self.receipt.ct)
        self.zeroize()
        self.request_cleanup()

    def on_timer(self, message: Message):
        if message.kind == TIMER_STORE:
            if len(self.acks) < len(self.storage_ids) and not self.aborted:
                self.aborted = True
                self.record("abort", acks=len(self.acks))
                self.reject(self.alice, "storage-commit")
                self.zeroize()
                self.request_cleanup()
        else:
            super().on_timer(message)

    def zeroize(self):
        self.install_secret = b""
        self.token = b""
        self.csrn = b""


class StorageActor(Ephemeral):
    """C_i: stores the sealed tuple and answers only I1 and I2."""

    role = ROLE_STORAGE

    def __init__(self, sim: Simulation, subnet: str, actor_id: str):
        super().__init__(sim, subnet, actor_id)
        self.witness_id = ""
        self.corrupt = False
        self.stored: Optional[bytes] = None
        self.token = b""
        self.csrn = b""

    def _handle_message(self, message: Message):
        if message.kind == MSG_STORE:
            self._handle_store(message)
        elif message.kind == MSG_FETCH:
            self._handle_fetch(message)
        elif message.kind == MSG_TEARDOWN:
            if message.src == self.context.id_of(ROLE_I2):
                self.request_cleanup()
        else:
            super()._handle_message(message)

    def _handle_store(self, message: Message):
        body = message.body
        if message.src != self.context.id_of(ROLE_I1):
            self.reject(message.src, "not-i1")
            return
        if self.stored is not None:
            self.reject(message.src, "already-stored")
            return
        sealed = SealedTuple.from_bytes(body["tuple"])
        if self.corrupt:
            sealed = replace(sealed, envelope=flip_bit(sealed.envelope, 0))
        self.stored = sealed.to_bytes()
        self.token = body["token"]
        hint = sealed.hint
        if body.get("issue"):
            self.csrn, receipt = csrn_issue(self.rng, body["deposit_id"], body["principal"])
            self.send(message.src, MSG_STORED, csrn=self.csrn, nonce=receipt.nonce, ct=receipt.ct)
        else:
            self.csrn = body["csrn"]
            self.send(message.src, MSG_STORED)
        self.send(self.witness_id, MSG_COMMIT, hint=hint)

    def _handle_fetch(self, message: Message):
        if message.src != self.context.id_of(ROLE_I2) or self.stored is None:
            self.reject(message.src, "not-found")
            return
        self.send(message.src, MSG_TUPLE, tuple=self.stored, token=self.token, csrn=self.csrn,
                  attempt=message.body.get("attempt", 0))

    def zeroize(self):
        self.stored = None
        self.token = b""
        self.csrn = b""


class RetrievalIntermediary(Ephemeral):
    """I2: gathers a t-of-n quorum, checks h and hands the envelope to Bob."""

    role = ROLE_I2

    def __init__(self, sim: Simulation, subnet: str, actor_id: str):
        super().__init__(sim, subnet, actor_id)
        self.storage_ids: List[str] = []
        self.witness_id = ""
        self.router_id = ""
        self.install_secret = b""
        self.t = 1
        self.order: List[str] = []
        self.attempt = -1
        self.replies: Dict[bytes, int] = {}
        self.quorum: Optional[Dict] = None
        self.requester: Optional[str] = None
        self.served = False

    def _handle_message(self, message: Message):
        if message.kind == MSG_FETCH_CAPSULE:
            self._handle_fetch_capsule(message)
        elif message.kind == MSG_TUPLE:
            self._handle_tuple(message)
        elif message.kind == MSG_RETRIEVE:
            self._handle_retrieve(message)
        else:
            super()._handle_message(message)

    def _handle_fetch_capsule(self, message: Message):
        if self.served:
            self.reject(message.src, "already-served")
            return
        self.requester = message.src
        if self.quorum is not None:
            self._send_capsule()
            return
        if self.attempt < 0:
            self.order = self.rng.shuffled(self.storage_ids)
            self._query_next()

    def _query_next(self):
        self.attempt += 1
        if self.attempt >= len(self.order):
            self.record("quorum-failed", replies=sum(self.replies.values()))
            self.reject(self.requester, "quorum")
            return
        self.send(self.order[self.attempt], MSG_FETCH, attempt=self.attempt)
        self.sim.set_timer(self.actor_id, self.sim.tick + FETCH_TIMEOUT, TIMER_FETCH, {"attempt": self.attempt})

    def _handle_tuple(self, message: Message):
        body = message.body
        if message.src not in self.storage_ids or self.quorum is not None or body.get("attempt") != self.attempt:
            return
        try:
            sealed = SealedTuple.from_bytes(body["tuple"])
        except RdmpfError:
            self.record("bad-reply", src=message.src)
            self._query_next()
            return
        # Replies must match byte for byte to count together
        key = length_prefixed([body["tuple"], body["token"], body["csrn"]])
        self.replies[key] = self.replies.get(key, 0) + 1
        if self.replies[key] >= self.t:
            self.quorum = {"tuple": sealed, "token": body["token"], "csrn": body["csrn"]}
            self.record("quorum", replies=self.replies[key])
            self._send_capsule()
        else:
            self._query_next()

    def _send_capsule(self):
        self.send(self.requester, MSG_CAPSULE, capsule=self.quorum["tuple"].capsule)

    def on_timer(self, message: Message):
        if message.kind == TIMER_FETCH:
            if self.quorum is None and message.body.get("attempt") == self.attempt:
                self._query_next()
        elif message.kind == TIMER_CLEANUP:
            self.request_cleanup(served=True)
        else:
            super().on_timer(message)

    # Constant-time comparison of a submitted h with the one I1 sealed
    def verify_proof(self, h: bytes) -> bool:
        if self.quorum is None or len(h) != DIGEST_SIZE:
            return False
        try:
            expected = open_unseal_token(self.install_secret, self.commit, self.quorum["token"])
        except AuthenticationFailure:
            return False
        return constant_time.bytes_eq(h, expected)

    def _handle_retrieve(self, message: Message):
        body = message.body
        if self.served:
            self.reject(message.src, "already-served")
            return
        if self.quorum is None:
            self.reject(message.src, "no-capsule")
            return
        if not self.verify_proof(body.get("h", b"")):
            self.reject(message.src, "bad-proof")
            return
        payout = body.get("payout")
        if not isinstance(payout, str) or not payout:
            self.reject(message.src, "no-payout")
            return

        self.served = True
        self.send(message.src, MSG_DELIVER, envelope=self.quorum["tuple"].envelope, csrn=self.quorum["csrn"])
        for storage_id in self.storage_ids:
            self.send(storage_id, MSG_TEARDOWN)
        self.send(self.router_id, MSG_PAYOUT, deposit_id=self.context.deposit_id, output=payout)
        self.sim.set_timer(self.actor_id, self.sim.tick + CLEANUP_DELAY, TIMER_CLEANUP)
        logger.debug("i2.served", deposit_id=self.context.deposit_id)

    def on_expire(self):
        self.request_cleanup(served=self.served)

    def zeroize(self):
        self.install_secret = b""
        self.quorum = None
        self.replies = {}


@dataclass(frozen=True)
class WitnessEvent:
    kind: str
    subject: str
    payload: bytes
    digest: bytes
    chain: bytes


def _chain_event(prev: bytes, digest: bytes, payload: bytes) -> bytes:
    return blake2s_event(DomainTag.WITNESS_EVENT, [prev, digest, payload])


def verify_witness_log(events: List[WitnessEvent], context_commit: bytes) -> bool:
    prev = GENESIS
    intents = set()
    for event in events:
        if event.digest != event_digest(event.kind, event.subject, context_commit):
            return False
        if event.kind == DESTRUCT_PROOF and event.subject not in intents:
            return False
        if event.kind == DESTRUCT_INTENT:
            intents.add(event.subject)
        if not constant_time.bytes_eq(event.chain, _chain_event(prev, event.digest, event.payload)):
            return False
        prev = event.chain
    return True


class Witness(Ephemeral):
    """W: certifies commits and staged destructions, then publishes Finalize."""

    role = ROLE_WITNESS
    expiry_margin = WITNESS_EXPIRY_MARGIN

    def __init__(self, sim: Simulation, subnet: str, actor_id: str):
        super().__init__(sim, subnet, actor_id)
        self.noticeboard_id = ""
        self.board = None  # public read access to the noticeboard
        self.expected: List[str] = []
        self.commits = BitArray()
        self.intents = BitArray()
        self.proofs = BitArray()
        self.log: List[WitnessEvent] = []
        self.hint: Optional[bytes] = None
        self.served = False
        self.finalized = False

    def provision(self, context, deadline: int, rng: DetRandom, **routes):
        super().provision(context, deadline, rng, **routes)
        self.expected = context.teardown_subjects()
        self.commits = BitArray(len(context.storage_ids()))
        self.intents = BitArray(len(self.expected))
        self.proofs = BitArray(len(self.expected))

    def _log(self, kind: str, subject: str, payload: bytes = b"") -> WitnessEvent:
        digest = event_digest(kind, subject, self.commit)
        prev = self.log[-1].chain if self.log else GENESIS
        event = WitnessEvent(kind, subject, payload, digest, _chain_event(prev, digest, payload))
        self.log.append(event)
        self.record("witness", event=kind, subject=subject, digest=digest)
        return event

    def _handle_message(self, message: Message):
        body = message.body
        if message.kind == MSG_COMMIT:
            storage = self.context.storage_ids()
            if message.src in storage and not self.commits[storage.index(message.src)]:
                self.commits.set(True, storage.index(message.src))
                self.hint = body["hint"]
                self._log(COMMIT, message.src, body["hint"])
        elif message.kind == MSG_DESTRUCT_INTENT:
            if message.src == self.factory_id and body["subject"] in self.expected:
                self._handle_intent(body)
        elif message.kind == MSG_DESTROYED:
            if message.src == self.factory_id and body["subject"] in self.expected:
                self._handle_destroyed(body["subject"])
        else:
            super()._handle_message(message)

    def _handle_intent(self, body: Dict):
        position = self.expected.index(body["subject"])
        if self.intents[position]:
            return
        self.intents.set(True, position)
        if body["subject"] == self.context.id_of(ROLE_I2):
            self.served = bool(body.get("served"))
        self._log(DESTRUCT_INTENT, body["subject"], str(body.get("deadline", 0)).encode())

    def _handle_destroyed(self, subject: str):
        position = self.expected.index(subject)
        if not self.intents[position]:
            self.record("reject", reason="proof-before-intent", to=subject)
            return
        if self.proofs[position]:
            return
        self.proofs.set(True, position)
        self._log(DESTRUCT_PROOF, subject)
        if self.proofs.all(True) and self.served:
            self.publish_finalize()

    def publish_finalize(self):
        announce = self.board.find_announce(self.hint) if self.hint is not None else None
        if announce is None:
            self.record("reject", reason="no-announce", to=self.noticeboard_id)
            return
        intent = self._log(DESTRUCT_INTENT, self.actor_id, str(self.deadline).encode())
        proofs = [e.digest for e in self.log if e.kind == DESTRUCT_PROOF]
        self.send(self.noticeboard_id, MSG_FINALIZE, idx=announce.idx, subjects=list(self.expected),
                  proofs=proofs, witness_intent=intent.digest)
        self.finalized = True
        logger.info("witness.finalize", idx=announce.idx, proofs=len(proofs))
        self.request_cleanup()
