"""Instrumented cost model: RDMPF invocations per actor and wire sizes per transfer.

Each C_i publishes one token; each client runs one transport session per C_i by
combining that token with its own secret; sender and recipient agree once.
In reuse mode the two clients combine published tokens, in recompute mode each
recomputes the peer token first.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import structlog

from crypto_suite import AEAD_TAG_SIZE, DIGEST_SIZE, IV_SIZE, DetRandom
from ephemeral import CSRN_SIZE, SealedTuple
from errors import RdmpfError
from kem_capsule import NONCE_SIZE
from math_core import (OpCounter, PublicParams, ScalarSecret, combine_token, gen_params, keygen, nika_shared_key,
                       public_token)
from utils import format_bytes

logger = structlog.get_logger(__name__)

MODE_REUSE = "reuse"
MODE_RECOMPUTE = "recompute"
MODES = (MODE_REUSE, MODE_RECOMPUTE)
PUBLICATION = "publication"


def predicted_rdmpf(n: int, mode: str) -> int:
    return 3 * n + (2 if mode == MODE_REUSE else 4)


@dataclass
class SizeReport:
    matrix: int
    public_key: int
    capsule: int
    envelope: int
    stored_tuple: int
    per_canister_wire: int
    total_wire: int


@dataclass
class BenchResult:
    dim: int
    bit_length: int
    n: int
    mode: str
    counters: Dict[str, OpCounter] = field(default_factory=dict)
    sizes: Optional[SizeReport] = None

    @property
    def transfer_counters(self) -> Dict[str, OpCounter]:
        return {actor: c for actor, c in self.counters.items() if actor != PUBLICATION}

    @property
    def total_rdmpf(self) -> int:
        return sum(c.rdmpf_calls for c in self.transfer_counters.values())

    @property
    def exponentiations_per_call(self) -> int:
        calls = self.total_rdmpf
        return sum(c.exponentiations for c in self.transfer_counters.values()) // calls if calls else 0

    def rows(self) -> List[str]:
        lines = [f"dim={self.dim} bits={self.bit_length} n={self.n} mode={self.mode}"]
        for actor, counter in self.counters.items():
            lines.append(f"  {actor:<12} rdmpf={counter.rdmpf_calls:<3} exps={counter.exponentiations}")
        lines.append(f"  total rdmpf={self.total_rdmpf} (closed form {predicted_rdmpf(self.n, self.mode)}) "
                     f"exps/call={self.exponentiations_per_call}")
        published = self.counters[PUBLICATION].rdmpf_calls
        lines.append(f"  (publication rdmpf={published} excluded, amortized over every transfer)")
        s = self.sizes
        lines.append(f"  matrix={s.matrix} B  public key={s.public_key} B  capsule={s.capsule} B  "
                     f"envelope={s.envelope} B")
        lines.append(f"  stored tuple={s.stored_tuple} B  per canister={format_bytes(s.per_canister_wire)}  "
                     f"total={format_bytes(s.total_wire)}")
        return lines


def wire_sizes(params: PublicParams, n: int, payload_len: int) -> SizeReport:
    matrix = params.matrix_size
    capsule = 2 * matrix + NONCE_SIZE + DIGEST_SIZE
    envelope = IV_SIZE + 2 * DIGEST_SIZE + payload_len + AEAD_TAG_SIZE
    stored = len(SealedTuple(bytes(DIGEST_SIZE), bytes(capsule), bytes(envelope), bytes(DIGEST_SIZE),
                             bytes(DIGEST_SIZE)).to_bytes())
    unseal_token = IV_SIZE + DIGEST_SIZE + AEAD_TAG_SIZE
    per_canister = stored + unseal_token + CSRN_SIZE
    return SizeReport(matrix, 2 * matrix, capsule, envelope, stored, per_canister, n * per_canister)


def bench_transfer(params: PublicParams, n: int, mode: str, seed: bytes, payload_len: int = 256) -> BenchResult:
    if mode not in MODES:
        raise RdmpfError("bad-mode", mode)
    rng = DetRandom("bench", seed)
    sender = ScalarSecret.generate(params, rng)
    recipient = ScalarSecret.generate(params, rng)
    sender_pub, recipient_pub = keygen(params, sender), keygen(params, recipient)

    counters: Dict[str, OpCounter] = {PUBLICATION: OpCounter(), "sender": OpCounter(), "recipient": OpCounter()}
    canisters = []
    for i in range(n):
        counters[f"C_{i + 1}"] = OpCounter()
        secret = ScalarSecret.generate(params, rng)
        canisters.append(public_token(params, keygen(params, secret), counters[f"C_{i + 1}"]))

    # sender/recipient agreement
    if mode == MODE_REUSE:
        sender_token = public_token(params, sender_pub, counters[PUBLICATION])
        recipient_token = public_token(params, recipient_pub, counters[PUBLICATION])
        k_sender = combine_token(params, sender, recipient_token, counters["sender"])
        k_recipient = combine_token(params, recipient, sender_token, counters["recipient"])
    else:
        k_sender = nika_shared_key(params, sender, sender_pub, recipient_pub, counter=counters["sender"])
        k_recipient = nika_shared_key(params, recipient, recipient_pub, sender_pub, counter=counters["recipient"])
    if k_sender != k_recipient:
        raise RdmpfError("agreement-failed", f"dim={params.dim}")

    # one transport session per canister per client
    for token in canisters:
        combine_token(params, sender, token, counters["sender"])
        combine_token(params, recipient, token, counters["recipient"])

    result = BenchResult(params.dim, params.p.bit_length(), n, mode, counters, wire_sizes(params, n, payload_len))
    logger.info("bench.done", dim=params.dim, mode=mode, rdmpf=result.total_rdmpf)
    return result


def run_bench(dims: List[int], n: int, mode: str, bit_length: int, seed: bytes,
              payload_len: int = 256) -> List[BenchResult]:
    results = []
    for dim in dims:
        params = gen_params(bit_length, dim, seed)
        results.append(bench_transfer(params, n, mode, seed, payload_len))
    return results
