from dataclasses import dataclass, field
from typing import Dict, List, Optional

import structlog

from crypto_suite import DIGEST_SIZE
from ephemeral import DepositIntermediary, RetrievalIntermediary, StorageActor, Witness
from errors import DepositRejected, FinalizeRejected, LedgerError, ReclaimRejected, SpawnError, SpawnRejected
from factory import POLICY_PREFER_DISTINCT, Factory, SpawnProof
from kem_capsule import CHALLENGE_SIZE, verify_reclaim
from ledger import MIXER_POOL, LedgerState
from math_core import PublicParams
from noticeboard import Noticeboard, finalize_check
from simulator import (MSG_ALLOCATE, MSG_CHALLENGE, MSG_PAYOUT, MSG_RECLAIM_CLAIM, MSG_RECLAIM_REQUEST,
                       MSG_RECLAIM_RESULT, MSG_SEAL, MSG_SPAWNED, ROLE_I1, ROLE_I2, ROLE_ROUTER, ROLE_STORAGE,
                       ROLE_WITNESS, Actor, Message, Simulation)

logger = structlog.get_logger(__name__)

# Deposit states
ALLOCATED = "Allocated"
CREATED = "Created"
SEALED = "Sealed"
FINALIZED = "Finalized"
RECLAIMED = "Reclaimed"

TRANSITIONS = {
    ALLOCATED: (CREATED,),
    CREATED: (SEALED,),
    SEALED: (FINALIZED, RECLAIMED),
    FINALIZED: (),
    RECLAIMED: (),
}

EPHEMERAL_CLASSES = {
    ROLE_I1: DepositIntermediary,
    ROLE_I2: RetrievalIntermediary,
    ROLE_STORAGE: StorageActor,
    ROLE_WITNESS: Witness,
}


@dataclass
class DepositRecord:
    deposit_id: str
    principal: str
    funding_account: str
    subaccount: str
    amount: int
    deadline: int
    refund_output: str
    state: str = ALLOCATED
    idx: Optional[int] = None
    reclaim_tag: bytes = b""
    c: bytes = b""
    proof: Optional[SpawnProof] = None
    history: List[str] = field(default_factory=lambda: [ALLOCATED])

    # Move along the allowed state graph
    def transition(self, new_state: str):
        if new_state not in TRANSITIONS[self.state]:
            raise DepositRejected("bad-transition", f"{self.state} -> {new_state}")
        self.state = new_state
        self.history.append(new_state)


class Router(Actor):
    """Permanent router: allocates deposits, seals them and runs payouts and reclaims."""

    role = ROLE_ROUTER

    def __init__(self, sim: Simulation, factory: Factory, ledger: LedgerState, board: Noticeboard,
                 params: PublicParams, n: int, t: int, ttl: int, policy: str = POLICY_PREFER_DISTINCT):
        super().__init__(sim, subnet="permanent", actor_id=f"{ROLE_ROUTER}-main")
        self.factory = factory
        self.ledger = ledger
        self.board = board
        self.params = params
        self.n = n
        self.t = t
        self.ttl = ttl
        self.policy = policy
        self.rng = sim.stream("router")
        self.deposits: Dict[str, DepositRecord] = {}
        self.challenges: Dict[str, bytes] = {}
        self.faults: Dict[str, List[int]] = {"kill_storage": [], "corrupt_storage": []}

    def _handle_message(self, message: Message):
        if message.kind == MSG_ALLOCATE:
            self._handle_allocate(message)
        elif message.kind == MSG_SEAL:
            self._handle_seal(message)
        elif message.kind == MSG_PAYOUT:
            self._handle_payout(message)
        elif message.kind == MSG_RECLAIM_REQUEST:
            self._handle_reclaim_request(message)
        elif message.kind == MSG_RECLAIM_CLAIM:
            self._handle_reclaim_claim(message)
        else:
            super()._handle_message(message)

    def _set_state(self, record: DepositRecord, state: str):
        record.transition(state)
        self.record("state", deposit_id=record.deposit_id, state=state)
        logger.info("router.state", deposit_id=record.deposit_id, state=state)

    # Allocation and factory spawn
    def _handle_allocate(self, message: Message):
        body = message.body
        amount = body["amount"]
        if amount <= 0 or self.ledger.balance(body["funding_account"]) < amount:
            self.reject(message.src, "insufficient-funds")
            return

        deposit_id = f"dep-{self.rng.read(8).hex()}"
        record = DepositRecord(
            deposit_id=deposit_id,
            principal=message.src,
            funding_account=body["funding_account"],
            subaccount=self.ledger.open_subaccount(deposit_id),
            amount=amount,
            deadline=self.sim.tick + self.ttl,
            refund_output=body["refund_output"],
        )
        self.deposits[deposit_id] = record
        self.record("state", deposit_id=deposit_id, state=ALLOCATED)

        try:
            proof = self.factory.spawn(deposit_id, self.n, self.policy, record.deadline, self.params.digest(),
                                       body["client_nonce"], record.refund_output, self._install)
        except SpawnError as e:
            self.reject(message.src, e.reason, deposit_id=deposit_id)
            return
        self._provision(proof)
        record.proof = proof
        self._set_state(record, CREATED)
        self.send(message.src, MSG_SPAWNED, deposit_id=deposit_id, proof=proof.to_bytes())

    def _install(self, actor_id: str, role: str, subnet: str) -> Actor:
        return EPHEMERAL_CLASSES[role](self.sim, subnet, actor_id)

    # Per-role routing for a freshly certified transfer
    def _provision(self, proof: SpawnProof):
        context = proof.context
        actors = self.sim.actors
        storage_ids = context.storage_ids()
        i1_id, i2_id, w_id = context.id_of(ROLE_I1), context.id_of(ROLE_I2), context.id_of(ROLE_WITNESS)
        install_secret = self.factory.new_install_secret()
        deadline = context.ttl

        actors[i1_id].provision(context, deadline, self.sim.stream(i1_id), storage_ids=storage_ids,
                                noticeboard_id=self.board.actor_id, router_id=self.actor_id,
                                rendezvous_target=i2_id, install_secret=install_secret,
                                code_hash=context.code_hash_of(ROLE_I1))
        actors[i2_id].provision(context, deadline, self.sim.stream(i2_id), storage_ids=storage_ids,
                                witness_id=w_id, router_id=self.actor_id, install_secret=install_secret, t=self.t)
        for position, storage_id in enumerate(storage_ids):
            storage = actors[storage_id]
            storage.provision(context, deadline, self.sim.stream(storage_id), witness_id=w_id)
            storage.available = position not in self.faults["kill_storage"]
            storage.corrupt = position in self.faults["corrupt_storage"]
        actors[w_id].provision(context, deadline, self.sim.stream(w_id), noticeboard_id=self.board.actor_id,
                               board=self.board)

    def _handle_seal(self, message: Message):
        body = message.body
        record = self.deposits.get(body.get("deposit_id"))
        if record is None or record.proof is None or message.src != record.proof.context.id_of(ROLE_I1):
            self.record("reject", reason="bad-seal", to=message.src)
            return
        if record.state != CREATED:
            self.record("reject", reason="double-deposit", to=message.src)
            return
        try:
            self.ledger.transfer(record.funding_account, record.subaccount, record.amount, memo="fund")
        except LedgerError as e:
            self.record("reject", reason=e.reason, to=message.src)
            return
        record.idx = body["idx"]
        record.reclaim_tag = body["reclaim_tag"]
        record.c = body["c"]
        self._set_state(record, SEALED)
        self.ledger.move_to_mixer(record.deposit_id, record.amount, self.rng.read(DIGEST_SIZE))

    def _handle_payout(self, message: Message):
        body = message.body
        record = self.deposits.get(body.get("deposit_id"))
        if record is None or message.src != record.proof.context.id_of(ROLE_I2):
            self.record("reject", reason="bad-payout", to=message.src)
            return
        if record.state != SEALED:
            self.record("reject", reason="not-sealed", to=message.src)
            return
        self.ledger.transfer(MIXER_POOL, body["output"], record.amount, memo="payout")
        self._set_state(record, FINALIZED)

    # Reason a reclaim cannot proceed, or None
    def _reclaim_blocker(self, record: Optional[DepositRecord], src: str) -> Optional[str]:
        if record is None:
            return "unknown-deposit"
        if src != record.principal:
            return "wrong-principal"
        if self.sim.tick < record.deadline:
            return "too-early"
        if record.state == FINALIZED or self._finalized_on_board(record):
            return "finalized"
        if record.state != SEALED:
            return "not-sealed"
        return None

    # Only a Finalize that passes the public check blocks a reclaim
    def _finalized_on_board(self, record: DepositRecord) -> bool:
        if record.idx is None or not self.board.finalizes_for(record.idx):
            return False
        try:
            return finalize_check(self.board, record.idx, record.proof.context)
        except (FinalizeRejected, SpawnRejected):
            return False

    def _handle_reclaim_request(self, message: Message):
        deposit_id = message.body.get("deposit_id")
        record = self.deposits.get(deposit_id)
        reason = self._reclaim_blocker(record, message.src)
        if reason:
            self.reject(message.src, reason, deposit_id=deposit_id)
            return
        n = self.rng.read(CHALLENGE_SIZE)
        self.challenges[deposit_id] = n
        self.send(message.src, MSG_CHALLENGE, deposit_id=deposit_id, n=n, idx=record.idx)

    def _handle_reclaim_claim(self, message: Message):
        body = message.body
        deposit_id = body.get("deposit_id")
        record = self.deposits.get(deposit_id)
        reason = self._reclaim_blocker(record, message.src)
        if reason:
            self.reject(message.src, reason, deposit_id=deposit_id)
            return
        n = self.challenges.pop(deposit_id, None)  # single use
        if n is None:
            self.reject(message.src, "no-challenge", deposit_id=deposit_id)
            return
        try:
            verify_reclaim(body["r"], body["alpha"], n, record.idx, record.proof.context.transfer_context(),
                           body["resp"], record.reclaim_tag, record.c)
        except ReclaimRejected as e:
            self.reject(message.src, e.reason, deposit_id=deposit_id)
            return
        self.ledger.transfer(MIXER_POOL, record.refund_output, record.amount, memo="refund")
        self._set_state(record, RECLAIMED)
        self.send(message.src, MSG_RECLAIM_RESULT, deposit_id=deposit_id, refund=record.amount,
                  output=record.refund_output)
