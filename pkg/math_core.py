"""Matrix algebra over Z_p and Z_(p-1), the rank-deficient matrix power function
(RDMPF), the composition operator and scalar-action key generation.

Exponent matrices hold residues mod (p-1), group matrices hold residues mod p.
All values are immutable; operation counting goes through an optional
per-call ``OpCounter``.
"""
import itertools
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import bcoding
import gmpy2
import structlog

from crypto_suite import DetRandom, sha3_256
from errors import DimensionMismatch, ParamsError, ParamsMismatch
from utils import decode_string, get_hex, get_key, int_to_le_bytes, le_bytes_to_int

logger = structlog.get_logger(__name__)

PROFILE_PRODUCTION = "production"
PROFILE_TEST = "test"
PRODUCTION_MIN_BITS = 192
PRODUCTION_MIN_DIM = 8
PRODUCTION_MAX_DIM = 24

MAX_PRIME_ATTEMPTS = 200_000
MAX_MATRIX_ATTEMPTS = 64
PRIMALITY_ROUNDS = 40

NESTED = "nested"
COMPOSE = "compose"

FIXTURE_FORMAT = "rdmpf-params/1"

Rows = Tuple[Tuple[int, ...], ...]


def _freeze(rows: Iterable[Iterable[int]]) -> Rows:
    return tuple(tuple(int(v) for v in row) for row in rows)


def _square_dim(rows: Rows) -> int:
    dim = len(rows)
    if dim == 0 or any(len(row) != dim for row in rows):
        raise DimensionMismatch("not-square", f"{dim} rows")
    return dim


@dataclass
class OpCounter:
    """Counts RDMPF work for one caller."""
    rdmpf_calls: int = 0
    exponentiations: int = 0
    compositions: int = 0

    def merge(self, other: "OpCounter"):
        self.rdmpf_calls += other.rdmpf_calls
        self.exponentiations += other.exponentiations
        self.compositions += other.compositions


@dataclass(frozen=True)
class ExponentMatrix:
    rows: Rows
    order: int  # p - 1

    def __post_init__(self):
        _square_dim(self.rows)
        for row in self.rows:
            for v in row:
                if not 0 <= v < self.order:
                    raise ParamsError("non-canonical", f"exponent entry {v} outside [0, {self.order - 1}]")

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[int]], order: int) -> "ExponentMatrix":
        return cls(_freeze([v % order for v in row] for row in rows), order)

    @classmethod
    def zeros(cls, dim: int, order: int) -> "ExponentMatrix":
        return cls(tuple((0,) * dim for _ in range(dim)), order)

    @classmethod
    def identity(cls, dim: int, order: int) -> "ExponentMatrix":
        return cls(tuple(tuple(1 if i == j else 0 for j in range(dim)) for i in range(dim)), order)

    @property
    def dim(self) -> int:
        return len(self.rows)

    # Entrywise scalar multiple mod (p-1)
    def scale(self, scalar: int) -> "ExponentMatrix":
        return ExponentMatrix.from_rows([[scalar * v for v in row] for row in self.rows], self.order)

    # Matrix product over Z_(p-1)
    def matmul(self, other: "ExponentMatrix") -> "ExponentMatrix":
        if other.dim != self.dim or other.order != self.order:
            raise DimensionMismatch(detail="matmul operands differ")
        cols = list(zip(*other.rows))
        product = [[sum(a * b for a, b in zip(row, col)) for col in cols] for row in self.rows]
        return ExponentMatrix.from_rows(product, self.order)


@dataclass(frozen=True)
class GroupMatrix:
    rows: Rows
    p: int

    def __post_init__(self):
        _square_dim(self.rows)
        for row in self.rows:
            for v in row:
                if not 0 <= v < self.p:
                    raise ParamsError("non-canonical", f"group entry {v} outside [0, {self.p - 1}]")

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[int]], p: int) -> "GroupMatrix":
        return cls(_freeze([v % p for v in row] for row in rows), p)

    @classmethod
    def ones(cls, dim: int, p: int) -> "GroupMatrix":
        return cls(tuple((1,) * dim for _ in range(dim)), p)

    @property
    def dim(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ScalarSecret:
    lam: int
    omega: int

    # Draw a fresh secret; production draws from the units-free range [1, p-2]
    @classmethod
    def generate(cls, params: "PublicParams", rng: DetRandom) -> "ScalarSecret":
        order = params.order
        if params.profile == PROFILE_PRODUCTION:
            return cls(rng.randrange(1, order), rng.randrange(1, order))
        return cls(rng.randbelow(order), rng.randbelow(order))

    def __repr__(self) -> str:
        return "ScalarSecret(<redacted>)"


class PublicKey(NamedTuple):
    p: ExponentMatrix
    q: ExponentMatrix


# Rank over the field Z_p by Gaussian elimination with modular inverses
def rank_over_zp(rows: Sequence[Sequence[int]], p: int) -> int:
    m = [[gmpy2.mpz(v) % p for v in row] for row in rows]
    if not m:
        return 0
    n_rows, n_cols = len(m), len(m[0])
    rank = 0
    for col in range(n_cols):
        pivot = next((r for r in range(rank, n_rows) if m[r][col] != 0), None)
        if pivot is None:
            continue
        m[rank], m[pivot] = m[pivot], m[rank]
        inv = gmpy2.invert(m[rank][col], p)
        m[rank] = [(v * inv) % p for v in m[rank]]
        for r in range(rank + 1, n_rows):
            factor = m[r][col]
            if factor:
                m[r] = [(a - factor * b) % p for a, b in zip(m[r], m[rank])]
        rank += 1
        if rank == n_rows:
            break
    return rank


@dataclass(frozen=True)
class PublicParams:
    p: int
    dim: int
    base_x: ExponentMatrix
    base_y: ExponentMatrix
    w: GroupMatrix
    profile: str = PROFILE_TEST

    def __post_init__(self):
        if self.profile not in (PROFILE_PRODUCTION, PROFILE_TEST):
            raise ParamsError("unknown-profile", self.profile)
        if self.dim < 2:
            raise ParamsError(detail=f"dim {self.dim} < 2")
        if not gmpy2.is_prime(self.p, PRIMALITY_ROUNDS):
            raise ParamsError("not-prime", str(self.p))
        if self.profile == PROFILE_PRODUCTION:
            if self.p.bit_length() < PRODUCTION_MIN_BITS:
                raise ParamsError("weak-prime", f"{self.p.bit_length()} bits")
            if not PRODUCTION_MIN_DIM <= self.dim <= PRODUCTION_MAX_DIM:
                raise ParamsError("bad-dim", f"dim {self.dim} outside production range")
        for name, base in (("base_x", self.base_x), ("base_y", self.base_y)):
            if base.dim != self.dim or base.order != self.order:
                raise ParamsError("bad-base", name)
            if rank_over_zp(base.rows, self.p) != self.dim - 1:
                raise ParamsError("bad-rank", f"{name} must have rank dim-1")
        if self.w.dim != self.dim or self.w.p != self.p:
            raise ParamsError("bad-w")
        if any(v == 0 for row in self.w.rows for v in row):
            raise ParamsError("bad-w", "W entries must be units")
        if rank_over_zp(self.w.rows, self.p) != self.dim:
            raise ParamsError("bad-rank", "W must have full rank")

    @property
    def order(self) -> int:
        return self.p - 1

    @property
    def element_width(self) -> int:
        return element_width(self.p)

    @property
    def matrix_size(self) -> int:
        return self.dim * self.dim * self.element_width

    def to_bytes(self) -> bytes:
        return bcoding.bencode(_params_dict(self))

    def digest(self) -> bytes:
        return sha3_256(self.to_bytes())


# Bytes per encoded element
def element_width(p: int) -> int:
    return (p.bit_length() + 7) // 8


def _sample_prime(rng: DetRandom, bit_length: int) -> int:
    top = 1 << (bit_length - 1)
    for _ in range(MAX_PRIME_ATTEMPTS):
        candidate = rng.randbits(bit_length) | top | 1
        if gmpy2.is_prime(candidate, PRIMALITY_ROUNDS):
            return int(candidate)
    raise ParamsError("generation-failure", f"no {bit_length}-bit prime found")


# (dim-1) random full-rank rows plus one Z_p combination of them
def _rank_deficient_base(rng: DetRandom, p: int, dim: int) -> ExponentMatrix:
    order = p - 1
    for _ in range(MAX_MATRIX_ATTEMPTS):
        top = [[rng.randbelow(order) for _ in range(dim)] for _ in range(dim - 1)]
        if rank_over_zp(top, p) != dim - 1:
            continue
        coeffs = [rng.randbelow(p) for _ in range(dim - 1)]
        last = [sum(c * row[j] for c, row in zip(coeffs, top)) % p for j in range(dim)]
        # an entry equal to p-1 would change under reduction mod (p-1)
        if any(v == order for v in last):
            continue
        rows = top + [last]
        if rank_over_zp(rows, p) == dim - 1:
            return ExponentMatrix.from_rows(rows, order)
    raise ParamsError("generation-failure", "rank-deficient base")


def _full_rank_w(rng: DetRandom, p: int, dim: int) -> GroupMatrix:
    for _ in range(MAX_MATRIX_ATTEMPTS):
        rows = [[rng.randrange(1, p) for _ in range(dim)] for _ in range(dim)]
        if rank_over_zp(rows, p) == dim:
            return GroupMatrix.from_rows(rows, p)
    raise ParamsError("generation-failure", "full-rank W")


def default_profile(bit_length: int, dim: int) -> str:
    if bit_length >= PRODUCTION_MIN_BITS and PRODUCTION_MIN_DIM <= dim <= PRODUCTION_MAX_DIM:
        return PROFILE_PRODUCTION
    return PROFILE_TEST


# Deterministic public parameters for (bit_length, dim, seed)
def gen_params(bit_length: int, dim: int, seed: bytes, profile: Optional[str] = None) -> PublicParams:
    if bit_length < 8:
        raise ParamsError("bad-bit-length", str(bit_length))
    if dim < 2:
        raise ParamsError("bad-dim", str(dim))
    if not seed:
        raise ParamsError("empty-seed")
    profile = profile or default_profile(bit_length, dim)
    rng = DetRandom(f"gen-params/{bit_length}/{dim}", seed)

    p = _sample_prime(rng.fork("prime"), bit_length)
    base_x = _rank_deficient_base(rng.fork("base-x"), p, dim)
    base_y = _rank_deficient_base(rng.fork("base-y"), p, dim)
    w = _full_rank_w(rng.fork("w"), p, dim)

    params = PublicParams(p=p, dim=dim, base_x=base_x, base_y=base_y, w=w, profile=profile)
    logger.debug("params.generated", bits=p.bit_length(), dim=dim, profile=profile)
    return params


def _check_secret(params: PublicParams, secret: ScalarSecret):
    for value in (secret.lam, secret.omega):
        if not 0 <= value < params.order:
            raise ParamsError("non-canonical", "scalar outside [0, p-2]")
    if params.profile == PROFILE_PRODUCTION and (secret.lam == 0 or secret.omega == 0):
        raise ParamsError("degenerate-scalar", "zero scalar rejected in production profile")


# Public key (lambda * BaseX, omega * BaseY) mod (p-1)
def keygen(params: PublicParams, secret: ScalarSecret) -> PublicKey:
    _check_secret(params, secret)
    return PublicKey(params.base_x.scale(secret.lam), params.base_y.scale(secret.omega))


def _check_operands(x: ExponentMatrix, w: GroupMatrix, y: ExponentMatrix):
    if not x.dim == w.dim == y.dim:
        raise DimensionMismatch(detail=f"{x.dim}/{w.dim}/{y.dim}")
    if x.order != y.order or x.order != w.p - 1:
        raise ParamsMismatch(detail="exponent modulus does not match group")


def rdmpf(x: ExponentMatrix, w: GroupMatrix, y: ExponentMatrix,
          counter: Optional[OpCounter] = None) -> GroupMatrix:
    """Entry (j, k) is the product over (l, m) of W[l][m] ** (X[j][l] * Y[m][k] mod (p-1)) mod p."""
    _check_operands(x, w, y)
    dim, order, p = x.dim, x.order, w.p
    modulus = gmpy2.mpz(p)
    w_rows = [[gmpy2.mpz(v) for v in row] for row in w.rows]
    y_cols = list(zip(*y.rows))
    exps = 0

    out = []
    for x_row in x.rows:
        row = []
        for y_col in y_cols:
            acc = gmpy2.mpz(1)
            for x_jl, w_row in zip(x_row, w_rows):
                for w_lm, y_mk in zip(w_row, y_col):
                    acc = acc * gmpy2.powmod(w_lm, (x_jl * y_mk) % order, modulus) % modulus
            exps += dim * dim
            row.append(int(acc))
        out.append(tuple(row))

    if counter is not None:
        counter.rdmpf_calls += 1
        counter.exponentiations += exps
    return GroupMatrix(tuple(out), p)


def compose(t1: GroupMatrix, t2: GroupMatrix, counter: Optional[OpCounter] = None) -> GroupMatrix:
    """(T1 |> T2)[i][j] is the product over k of T2[k][j] ** (T1[i][k] mod (p-1)) mod p."""
    if t1.dim != t2.dim:
        raise DimensionMismatch(detail=f"{t1.dim}/{t2.dim}")
    if t1.p != t2.p:
        raise ParamsMismatch(detail="composition operands use different primes")
    p, order = t1.p, t1.p - 1
    modulus = gmpy2.mpz(p)
    t2_cols = list(zip(*t2.rows))

    out = []
    for t1_row in t1.rows:
        row = []
        for t2_col in t2_cols:
            acc = gmpy2.mpz(1)
            for exponent, base in zip(t1_row, t2_col):
                acc = acc * gmpy2.powmod(base, exponent % order, modulus) % modulus
            row.append(int(acc))
        out.append(tuple(row))

    if counter is not None:
        counter.compositions += 1
        counter.exponentiations += t1.dim ** 3
    return GroupMatrix(tuple(out), p)


def _check_public_key(params: PublicParams, pub: PublicKey):
    for m in pub:
        if m.dim != params.dim or m.order != params.order:
            raise ParamsMismatch(detail="public key generated under different params")


# Published token RDMPF(P, W, Q) of a key pair
def public_token(params: PublicParams, pub: PublicKey, counter: Optional[OpCounter] = None) -> GroupMatrix:
    _check_public_key(params, pub)
    return rdmpf(pub.p, params.w, pub.q, counter)


# Outer RDMPF of the nested form applied to a peer's token
def combine_token(params: PublicParams, my_secret: ScalarSecret, peer_token: GroupMatrix,
                  counter: Optional[OpCounter] = None) -> GroupMatrix:
    mine = keygen(params, my_secret)
    if peer_token.dim != params.dim or peer_token.p != params.p:
        raise ParamsMismatch(detail="token generated under different params")
    return rdmpf(mine.p, peer_token, mine.q, counter)


def nika_shared_key(params: PublicParams, my_secret: ScalarSecret, my_pub: PublicKey, peer_pub: PublicKey,
                    mode: str = NESTED, counter: Optional[OpCounter] = None) -> GroupMatrix:
    """Shared matrix from one party's secret scalars and the peer's public key.

    The local matrices are always re-derived from ``my_secret``; ``my_pub`` only has
    to be compatible with ``params``.
    """
    _check_public_key(params, my_pub)
    _check_public_key(params, peer_pub)
    mine = keygen(params, my_secret)

    if mode == NESTED:
        inner = rdmpf(peer_pub.p, params.w, peer_pub.q, counter)
        return rdmpf(mine.p, inner, mine.q, counter)
    if mode == COMPOSE:
        t1 = rdmpf(mine.p, params.w, peer_pub.q, counter)
        t2 = rdmpf(peer_pub.p, params.w, mine.q, counter)
        return compose(t1, t2, counter)
    raise ParamsError("unknown-mode", mode)


Matrix = Union[ExponentMatrix, GroupMatrix]


# Row-major fixed-width little-endian encoding
def encode_matrix(m: Matrix, params: PublicParams) -> bytes:
    if m.dim != params.dim:
        raise DimensionMismatch(detail=f"matrix dim {m.dim} != {params.dim}")
    width = params.element_width
    return b"".join(int_to_le_bytes(v, width) for row in m.rows for v in row)


def _decode_rows(data: bytes, params: PublicParams) -> List[List[int]]:
    width = params.element_width
    if len(data) != params.matrix_size:
        raise ParamsError("bad-encoding", f"{len(data)} bytes, expected {params.matrix_size}")
    values = [le_bytes_to_int(data[i:i + width]) for i in range(0, len(data), width)]
    return [values[r * params.dim:(r + 1) * params.dim] for r in range(params.dim)]


def decode_group_matrix(data: bytes, params: PublicParams) -> GroupMatrix:
    return GroupMatrix(_freeze(_decode_rows(data, params)), params.p)


def decode_exponent_matrix(data: bytes, params: PublicParams) -> ExponentMatrix:
    return ExponentMatrix(_freeze(_decode_rows(data, params)), params.order)


def encode_public_key(pub: PublicKey, params: PublicParams) -> bytes:
    return encode_matrix(pub.p, params) + encode_matrix(pub.q, params)


def decode_public_key(data: bytes, params: PublicParams) -> PublicKey:
    size = params.matrix_size
    if len(data) != 2 * size:
        raise ParamsError("bad-encoding", f"{len(data)} bytes, expected {2 * size}")
    return PublicKey(decode_exponent_matrix(data[:size], params), decode_exponent_matrix(data[size:], params))


def _params_dict(params: PublicParams) -> dict:
    return {
        "format": FIXTURE_FORMAT,
        "p": format(params.p, 'x'),
        "dim": params.dim,
        "profile": params.profile,
        "base_x": encode_matrix(params.base_x, params).hex(),
        "base_y": encode_matrix(params.base_y, params).hex(),
        "w": encode_matrix(params.w, params).hex(),
    }


def params_from_bytes(data: bytes) -> PublicParams:
    try:
        decoded = bcoding.bdecode(data)
        if decode_string(get_key(decoded, "format")) != FIXTURE_FORMAT:
            raise ParamsError("bad-fixture", "unknown format")
        p = int(decode_string(get_key(decoded, "p")), 16)
        dim = int(get_key(decoded, "dim"))
        profile = decode_string(get_key(decoded, "profile"))
    except (KeyError, ValueError, TypeError) as e:
        raise ParamsError("bad-fixture", str(e)) from None

    # a shell object carries p and dim for the decoders before validation
    shape = _Shape(p, dim)
    return PublicParams(
        p=p, dim=dim,
        base_x=decode_exponent_matrix(get_hex(decoded, "base_x"), shape),
        base_y=decode_exponent_matrix(get_hex(decoded, "base_y"), shape),
        w=decode_group_matrix(get_hex(decoded, "w"), shape),
        profile=profile,
    )


class _Shape(NamedTuple):
    p: int
    dim: int

    @property
    def order(self) -> int:
        return self.p - 1

    @property
    def element_width(self) -> int:
        return element_width(self.p)

    @property
    def matrix_size(self) -> int:
        return self.dim * self.dim * self.element_width


def save_params(params: PublicParams, path: str):
    with open(path, 'wb') as f:
        f.write(params.to_bytes())


def load_params(path: str) -> PublicParams:
    with open(path, 'rb') as f:
        return params_from_bytes(f.read())


@dataclass(frozen=True)
class OracleReport:
    p: int
    trials: int
    agreements: int
    counterexample: Optional[Tuple[ScalarSecret, ScalarSecret, GroupMatrix, GroupMatrix]] = None

    @property
    def agrees(self) -> bool:
        return self.agreements == self.trials


# Small fixed bases for the brute-force oracle: rank 1 over every p >= 7
ORACLE_BASE_X = ((1, 2), (2, 4))
ORACLE_BASE_Y = ((1, 1), (1, 1))
ORACLE_W = ((2, 3), (1, 4))


def oracle_params(p: int) -> PublicParams:
    return PublicParams(
        p=p, dim=2,
        base_x=ExponentMatrix.from_rows(ORACLE_BASE_X, p - 1),
        base_y=ExponentMatrix.from_rows(ORACLE_BASE_Y, p - 1),
        w=GroupMatrix.from_rows(ORACLE_W, p),
    )


def composition_law_oracle(p: int, params: Optional[PublicParams] = None) -> OracleReport:
    """Compare compose mode with nested mode over every scalar quadruple."""
    params = params or oracle_params(p)
    order = params.order
    agreements = trials = 0
    counterexample = None

    for lam_s, omega_s, lam_r, omega_r in itertools.product(range(order), repeat=4):
        sender = ScalarSecret(lam_s, omega_s)
        recipient = ScalarSecret(lam_r, omega_r)
        sender_pub = keygen(params, sender)
        recipient_pub = keygen(params, recipient)
        nested = nika_shared_key(params, sender, sender_pub, recipient_pub, NESTED)
        composed = nika_shared_key(params, sender, sender_pub, recipient_pub, COMPOSE)
        trials += 1
        if nested == composed:
            agreements += 1
        elif counterexample is None:
            counterexample = (sender, recipient, nested, composed)

    logger.info("oracle.done", p=params.p, trials=trials, agreements=agreements)
    return OracleReport(params.p, trials, agreements, counterexample)
