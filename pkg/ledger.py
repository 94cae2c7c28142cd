from dataclasses import dataclass
from typing import Dict, List

import structlog

from crypto_suite import DetRandom, DomainTag, blake2s_event
from errors import LedgerError
from simulator import ROLE_LEDGER, Simulation

logger = structlog.get_logger(__name__)

MIXER_POOL = "mixer-pool"
MIN_CHUNKS = 3
MAX_CHUNKS = 8


# Split amount into k in [3, 8] positive chunks (fewer when amount < k)
def mixer_chunk(amount: int, seed: bytes) -> List[int]:
    if amount <= 0:
        raise LedgerError("bad-amount", str(amount))
    rng = DetRandom("mixer-chunk", seed)
    k = min(amount, rng.randrange(MIN_CHUNKS, MAX_CHUNKS + 1))
    cuts = set()
    while len(cuts) < k - 1:
        cuts.add(rng.randrange(1, amount))
    bounds = [0] + sorted(cuts) + [amount]
    return [hi - lo for lo, hi in zip(bounds, bounds[1:])]


# Functional subaccount for a deposit
def subaccount_for(deposit_id: str) -> str:
    return "sub-" + blake2s_event(DomainTag.SUBACCOUNT, [deposit_id.encode()]).hex()


@dataclass(frozen=True)
class LedgerEntry:
    tick: int
    src: str
    dst: str
    amount: int
    memo: str


class LedgerState:
    """Toy token ledger; total supply is fixed once minting is closed."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.actor_id = f"{ROLE_LEDGER}-main"
        self.balances: Dict[str, int] = {MIXER_POOL: 0}
        self.subaccounts: Dict[str, str] = {}  # deposit_id -> subaccount
        self.log: List[LedgerEntry] = []
        self.total_supply = 0
        self.minting_closed = False

    def mint(self, account: str, amount: int):
        if self.minting_closed:
            raise LedgerError("minting-closed")
        self.balances[account] = self.balances.get(account, 0) + amount
        self.total_supply += amount
        self.sim.record(self.actor_id, "mint", account=account, amount=amount)

    def close_minting(self):
        self.minting_closed = True

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def open_subaccount(self, deposit_id: str) -> str:
        account = subaccount_for(deposit_id)
        self.subaccounts[deposit_id] = account
        self.balances.setdefault(account, 0)
        return account

    # Move funds between accounts
    def transfer(self, src: str, dst: str, amount: int, memo: str = ""):
        if amount <= 0:
            raise LedgerError("bad-amount", str(amount))
        if self.balance(src) < amount:
            raise LedgerError("insufficient-funds", f"{src} holds {self.balance(src)}")
        self.balances[src] -= amount
        self.balances[dst] = self.balances.get(dst, 0) + amount
        self.log.append(LedgerEntry(self.sim.tick, src, dst, amount, memo))
        self.sim.record(self.actor_id, "transfer", src=src, dst=dst, amount=amount, memo=memo or "-")
        self.check_conservation()

    # Deposit subaccount into the mixer pool in randomized chunks
    def move_to_mixer(self, deposit_id: str, amount: int, seed: bytes) -> List[int]:
        src = self.subaccounts[deposit_id]
        chunks = mixer_chunk(amount, seed)
        for chunk in chunks:
            self.transfer(src, MIXER_POOL, chunk, memo="mix")
        logger.debug("ledger.mixed", deposit_id=deposit_id, chunks=len(chunks))
        return chunks

    def check_conservation(self):
        total = sum(self.balances.values())
        if total != self.total_supply:
            raise LedgerError("conservation", f"{total} != {self.total_supply}")
