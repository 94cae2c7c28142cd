"""End-to-end transfer drivers: the world, the two clients and the five phases.

Client actions are sent as messages and the event loop is run until the
expected reply (or a reject) reaches the client, so every step lands in the
trace exactly as a remote call would.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Type

import structlog

from crypto_suite import DIGEST_SIZE, det_random, sha3_256
from ephemeral import CsrnReceipt, SealedTuple, csrn_unwrap
from errors import (AuthenticationFailure, DepositRejected, RdmpfError, ReclaimRejected, RetrievalRejected,
                    SpawnRejected, TransferMismatch)
from factory import POLICY_PREFER_DISTINCT, Factory, SpawnProof, client_verify_spawn, client_verify_witness
from kem_capsule import (ALPHA_SIZE, InnerEnvelope, ReclaimSecrets, auth_proof, decapsulate, encapsulate,
                         open_envelope, reclaim_response)
from ledger import LedgerState
from math_core import OpCounter, PublicKey, PublicParams, ScalarSecret, gen_params, keygen
from noticeboard import Noticeboard, finalize_check
from router import RECLAIMED, Router
from scenario import DEFAULT_SUBNETS, ScenarioConfig
from simulator import (MSG_ALLOCATE, MSG_CAPSULE, MSG_CHALLENGE, MSG_DELIVER, MSG_DEPOSIT, MSG_DEPOSIT_ACK,
                       MSG_FETCH_CAPSULE, MSG_FINALIZE, MSG_RECLAIM_CLAIM, MSG_RECLAIM_REQUEST, MSG_RECLAIM_RESULT,
                       MSG_REJECT, MSG_RETRIEVE, MSG_SPAWNED, ROLE_CLIENT, ROLE_I1, ROLE_I2, WORLD_ACTOR, Actor,
                       Message, Simulation)
from utils import create_principal_id

logger = structlog.get_logger(__name__)

SIDE_SENDER = "sender"
SIDE_RECIPIENT = "recipient"
FEE_PROOF = b"fee-paid"


class ClientActor(Actor):
    """Off-platform client; replies are queued for the driver functions."""

    role = ROLE_CLIENT

    def __init__(self, sim: Simulation):
        super().__init__(sim, subnet="client")
        self.inbox: List[Message] = []
        self.rng = sim.stream(self.actor_id)
        self.counter = OpCounter()

    def _handle_message(self, message: Message):
        self.inbox.append(message)

    def has_reply(self, kinds: Sequence[str]) -> bool:
        return any(m.kind in kinds for m in self.inbox)

    def take(self, kinds: Sequence[str]) -> Optional[Message]:
        for position, message in enumerate(self.inbox):
            if message.kind in kinds:
                return self.inbox.pop(position)
        return None


class SenderClient(ClientActor):

    def __init__(self, sim: Simulation):
        super().__init__(sim)
        self.funding_account = create_principal_id("acct", self.rng.read(16))
        self.refund_output = create_principal_id("refund", self.rng.read(16))
        self.proof: Optional[SpawnProof] = None
        self.secrets: Optional[ReclaimSecrets] = None
        self.receipt: Optional["DepositReceipt"] = None


class RecipientClient(ClientActor):

    def __init__(self, sim: Simulation, params: PublicParams):
        super().__init__(sim)
        self.secret = ScalarSecret.generate(params, self.rng)
        self.pub: PublicKey = keygen(params, self.secret)
        self.payout_output = create_principal_id("payout", self.rng.read(16))


@dataclass
class DepositReceipt:
    deposit_id: str
    idx: int
    hint: bytes
    csrn: bytes
    deadline: int


@dataclass
class Delivery:
    payload: bytes
    csrn: bytes
    idx: int
    proof: SpawnProof


class World:
    """Permanent actors plus the simulator root key of one simulated deployment."""

    def __init__(self, params: PublicParams, seed: bytes, n: int = 2, t: int = 2, ttl: int = 400,
                 subnets: Sequence[str] = DEFAULT_SUBNETS, policy: str = POLICY_PREFER_DISTINCT,
                 capacity: Optional[int] = None):
        self.params = params
        self.n = n
        self.t = t
        self.policy = policy
        self.sim = Simulation(seed)
        self.root_key = det_random("root-key", seed, DIGEST_SIZE)
        self.sim.record(WORLD_ACTOR, "world", root_key=self.root_key, params=params.digest(), n=n, t=t, ttl=ttl)
        self.board = Noticeboard(self.sim)
        self.ledger = LedgerState(self.sim)
        self.factory = Factory(self.sim, subnets, self.root_key, capacity)
        self.router = Router(self.sim, self.factory, self.ledger, self.board, params, n, t, ttl, policy)

    @classmethod
    def from_config(cls, config: ScenarioConfig, params: Optional[PublicParams] = None) -> "World":
        seed = config.seed_bytes
        params = params or gen_params(config.bit_length, config.dim, seed, config.profile)
        world = cls(params, seed, config.n, config.t, config.ttl, config.subnets, config.policy)
        world.router.faults = {"kill_storage": list(config.faults.kill_storage),
                               "corrupt_storage": list(config.faults.corrupt_storage)}
        return world

    def new_sender(self, amount: int) -> SenderClient:
        alice = SenderClient(self.sim)
        self.ledger.mint(alice.funding_account, amount)
        self.sim.record(WORLD_ACTOR, "endpoint", side=SIDE_SENDER, principal=alice.actor_id)
        return alice

    def new_recipient(self) -> RecipientClient:
        bob = RecipientClient(self.sim, self.params)
        self.sim.record(WORLD_ACTOR, "endpoint", side=SIDE_RECIPIENT, principal=bob.actor_id)
        return bob

    def new_client(self) -> ClientActor:
        return ClientActor(self.sim)


# Run the loop until the client holds one of the kinds or a reject
def _await(world: World, client: ClientActor, kinds: Sequence[str], error: Type[RdmpfError]) -> Message:
    wanted = tuple(kinds) + (MSG_REJECT,)
    world.sim.run_until(lambda: client.has_reply(wanted))
    message = client.take(wanted)
    if message is None:
        raise error("no-reply", f"waiting for {', '.join(kinds)}")
    if message.kind == MSG_REJECT:
        raise error(message.body.get("reason", "rejected"))
    return message


def open_transfer(world: World, alice: SenderClient, amount: int) -> SpawnProof:
    """Phase 1: allocate a deposit, have the Factory spawn it and verify the certificate."""
    client_nonce = alice.rng.read(DIGEST_SIZE)
    alice.send(world.router.actor_id, MSG_ALLOCATE, amount=amount, funding_account=alice.funding_account,
               refund_output=alice.refund_output, client_nonce=client_nonce)
    reply = _await(world, alice, (MSG_SPAWNED,), SpawnRejected)
    proof = SpawnProof.from_bytes(reply.body["proof"])
    if proof.client_nonce != client_nonce:
        raise SpawnRejected("nonce")
    client_verify_spawn(proof, world.root_key, world.n, world.policy)
    client_verify_witness(proof, world.root_key, world.n, world.policy)
    alice.proof = proof
    logger.info("client.spawn_verified", deposit_id=proof.context.deposit_id)
    return proof


def deposit(world: World, alice: SenderClient, recipient_pub: PublicKey, payload: bytes) -> DepositReceipt:
    """Phase 2: encapsulate for the recipient and hand the sealed tuple to I1."""
    context = alice.proof.context
    ephemeral_secret = ScalarSecret.generate(world.params, alice.rng)
    enc = encapsulate(world.params, ephemeral_secret, recipient_pub, context.transfer_context(), payload,
                      alice.rng.read(ALPHA_SIZE), rng=alice.rng.fork("kem"), counter=alice.counter)
    sealed = SealedTuple(enc.hint, enc.capsule.to_bytes(), enc.envelope.to_bytes(), enc.secrets.reclaim_tag,
                         enc.secrets.c)
    with enc.k_auth as k_auth:
        h = auth_proof(k_auth)
    alice.secrets = enc.secrets

    alice.send(context.id_of(ROLE_I1), MSG_DEPOSIT, deposit_id=context.deposit_id, tuple=sealed.to_bytes(), h=h,
               fee_proof=FEE_PROOF)
    ack = _await(world, alice, (MSG_DEPOSIT_ACK,), DepositRejected)
    csrn = csrn_unwrap(context.deposit_id, alice.actor_id, CsrnReceipt(ack.body["nonce"], ack.body["ct"]))
    alice.receipt = DepositReceipt(context.deposit_id, ack.body["idx"], enc.hint, csrn, context.ttl)
    logger.info("client.deposited", deposit_id=context.deposit_id, idx=ack.body["idx"])
    return alice.receipt


# Phase 3: pull-based scan; nothing is sent and no actor learns of the query
def discover(board: Noticeboard, hint: bytes) -> Optional[Tuple[int, bytes]]:
    record = board.find_announce(hint)
    if record is None:
        return None
    return record.idx, bytes.fromhex(record.body["rendezvous_token"])


def resolve(world: World, idx: int, token: bytes) -> SpawnProof:
    proof = world.factory.resolve_rendezvous(idx, token)
    if proof is None:
        raise RetrievalRejected("rendezvous")
    client_verify_spawn(proof, world.root_key, world.n, world.policy)
    return proof


def fetch_capsule(world: World, bob: RecipientClient, i2_id: str, hint: bytes) -> bytes:
    bob.send(i2_id, MSG_FETCH_CAPSULE, hint=hint)
    reply = _await(world, bob, (MSG_CAPSULE,), RetrievalRejected)
    capsule = reply.body["capsule"]
    if sha3_256(capsule) != hint:
        raise RetrievalRejected("hint-mismatch")
    return capsule


def retrieve(world: World, bob: RecipientClient, i2_id: str, h: bytes) -> Message:
    bob.send(i2_id, MSG_RETRIEVE, h=h, payout=bob.payout_output)
    return _await(world, bob, (MSG_DELIVER,), RetrievalRejected)


def receive_transfer(world: World, bob: RecipientClient, hint: bytes, wrong_h: bool = False) -> Delivery:
    """Phases 3 and 4 from the recipient's side, given the HINT learned out of band."""
    found = discover(world.board, hint)
    if found is None:
        raise RetrievalRejected("not-found")
    idx, token = found
    proof = resolve(world, idx, token)
    i2_id = proof.context.id_of(ROLE_I2)
    transfer_context = proof.context.transfer_context()

    capsule = fetch_capsule(world, bob, i2_id, hint)
    keys = decapsulate(world.params, bob.secret, bob.pub, capsule, transfer_context, counter=bob.counter)
    h = bob.rng.read(DIGEST_SIZE) if wrong_h else auth_proof(keys.k_auth)
    keys.k_auth.zeroize()

    delivered = retrieve(world, bob, i2_id, h)
    with keys.k_enc as k_enc:
        try:
            contents = open_envelope(k_enc, InnerEnvelope.from_bytes(delivered.body["envelope"]), hint)
        except AuthenticationFailure:
            raise RetrievalRejected("envelope-auth") from None
    if contents.h != h:
        raise RetrievalRejected("envelope-binding")
    logger.info("client.retrieved", idx=idx, payload_len=len(contents.payload))
    return Delivery(contents.payload, delivered.body["csrn"], idx, proof)


def reclaim_flow(world: World, client: ClientActor, deposit_id: str, r: bytes, alpha: bytes,
                 proof: Optional[SpawnProof] = None, idx: Optional[int] = None,
                 challenge: Optional[bytes] = None) -> int:
    """Phase 6: challenge-response refund after the TTL; returns the refunded amount.

    ``idx`` and ``challenge`` replace the values the Router sent and exist so
    callers can exercise mismatched responses.
    """
    client.send(world.router.actor_id, MSG_RECLAIM_REQUEST, deposit_id=deposit_id)
    reply = _await(world, client, (MSG_CHALLENGE,), ReclaimRejected)
    n = challenge if challenge is not None else reply.body["n"]
    bound_idx = idx if idx is not None else reply.body["idx"]
    proof = proof or getattr(client, "proof", None)
    secrets = ReclaimSecrets(r, alpha, sha3_256(alpha))
    resp = reclaim_response(secrets, n, bound_idx, proof.context.transfer_context())

    client.send(world.router.actor_id, MSG_RECLAIM_CLAIM, deposit_id=deposit_id, r=r, alpha=alpha, resp=resp)
    result = _await(world, client, (MSG_RECLAIM_RESULT,), ReclaimRejected)
    logger.info("client.reclaimed", deposit_id=deposit_id, refund=result.body["refund"])
    return result.body["refund"]


def forge_finalize(world: World, idx: int):
    """A non-witness principal appends a Finalize for idx."""
    forger = world.new_client()
    forger.send(world.board.actor_id, MSG_FINALIZE, idx=idx, subjects=[], proofs=[], witness_intent=bytes(DIGEST_SIZE))
    world.sim.run_until(lambda: bool(world.board.finalizes_for(idx)))


@dataclass
class RunOutcome:
    deposit_id: str
    idx: int
    state: str
    hint: bytes
    payload_match: bool = False
    csrn_match: bool = False
    finalized: bool = False
    reclaimed: bool = False
    refund: int = 0
    counters: Dict[str, OpCounter] = field(default_factory=dict)


class ScenarioRun:
    """One scenario execution; ``world`` stays available for artifacts even when a phase fails."""

    def __init__(self, config: ScenarioConfig, params: Optional[PublicParams] = None):
        self.config = config.validate()
        self.world = World.from_config(config, params)
        self.outcome: Optional[RunOutcome] = None

    def execute(self) -> RunOutcome:
        config, world = self.config, self.world
        faults = config.faults
        alice = world.new_sender(config.amount)
        bob = world.new_recipient()
        world.ledger.close_minting()
        payload = config.payload()

        proof = open_transfer(world, alice, config.amount)
        receipt = deposit(world, alice, bob.pub, payload)
        record = world.router.deposits[receipt.deposit_id]
        outcome = RunOutcome(receipt.deposit_id, receipt.idx, record.state, receipt.hint,
                             counters={"sender": alice.counter, "recipient": bob.counter})
        self.outcome = outcome

        if faults.forge_finalize:
            forge_finalize(world, receipt.idx)

        if faults.skip_retrieve:
            world.sim.advance_to(receipt.deadline)
            outcome.refund = reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
            world.sim.run()
            outcome.state = record.state
            outcome.reclaimed = record.state == RECLAIMED
            return outcome

        delivery = receive_transfer(world, bob, receipt.hint, wrong_h=faults.wrong_h)
        world.sim.run()
        outcome.state = record.state
        outcome.payload_match = delivery.payload == payload
        outcome.csrn_match = delivery.csrn == receipt.csrn
        if not outcome.payload_match:
            raise TransferMismatch("payload-mismatch")
        if not outcome.csrn_match:
            raise TransferMismatch("csrn-mismatch")
        outcome.finalized = finalize_check(world.board, receipt.idx, proof.context)
        return outcome


def run_scenario(config: ScenarioConfig, params: Optional[PublicParams] = None) -> Tuple[RunOutcome, World]:
    run = ScenarioRun(config, params)
    return run.execute(), run.world
