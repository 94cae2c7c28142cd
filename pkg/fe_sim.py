"""Idealized two-input functional encryption run by a trusted dealer.

Encodings are AEAD-sealed exponent matrices that only the dealer can open.
Anchored keys are Ed25519-signed by the dealer; evaluation returns single
products P[i][l] * Q[m][k] mod (p-1) and nothing else.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import bcoding
import gmpy2
import structlog
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from crypto_suite import IV_SIZE, DetRandom, KeyMaterial, aead_open, aead_seal, det_random, system_random
from errors import AnchoringViolation, FEError, IndexOutOfRange, InvalidKey
from math_core import (ExponentMatrix, GroupMatrix, OpCounter, PublicKey, PublicParams, compose,
                       decode_exponent_matrix, encode_matrix)
from utils import decode_string, get_hex, get_key, length_prefixed

logger = structlog.get_logger(__name__)

LEFT = "L"
RIGHT = "R"
SIDES = (LEFT, RIGHT)
REGISTRY_FORMAT = "fe-registry/1"


@dataclass(frozen=True)
class FEPublicParams:
    params_digest: bytes
    verification_key: bytes  # raw Ed25519 public key

    def to_bytes(self) -> bytes:
        return bcoding.bencode({"params_digest": self.params_digest.hex(),
                                "verification_key": self.verification_key.hex()})


class FEMasterSecret:
    """Dealer-only key material; never serialized."""

    def __init__(self, signing_key: Ed25519PrivateKey, sealing_key: bytes):
        self.signing_key = signing_key
        self.sealing_key = sealing_key

    def __repr__(self) -> str:
        return "FEMasterSecret(<dealer-only>)"


@dataclass(frozen=True)
class Encoding:
    side: str
    owner: str
    blob: bytes  # iv || AEAD(matrix)

    def aad(self, pp: FEPublicParams) -> bytes:
        return _encoding_aad(self.side, self.owner, pp)


@dataclass(frozen=True)
class AnchoredKey:
    side: str
    anchor: str
    dim: int  # the key authorizes every index in [0, dim)^4
    signature: bytes

    def message(self, pp: FEPublicParams) -> bytes:
        return _key_message(self.side, self.anchor, self.dim, pp)


def _encoding_aad(side: str, owner: str, pp: FEPublicParams) -> bytes:
    return length_prefixed([b"fe-encoding", side.encode(), owner.encode(), pp.params_digest])


def _key_message(side: str, anchor: str, dim: int, pp: FEPublicParams) -> bytes:
    return length_prefixed([b"fe-key", side.encode(), anchor.encode(), str(dim).encode(), pp.params_digest])


def _check_side(side: str):
    if side not in SIDES:
        raise FEError("bad-side", side)


# Deterministic dealer setup
def fe_setup(params: PublicParams, seed: bytes) -> Tuple[FEPublicParams, FEMasterSecret]:
    signing_key = Ed25519PrivateKey.from_private_bytes(det_random("fe-dealer-signing", seed, 32))
    sealing_key = det_random("fe-dealer-sealing", seed, 32)
    verification_key = signing_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
    pp = FEPublicParams(params.digest(), verification_key)
    return pp, FEMasterSecret(signing_key, sealing_key)


# Check a dealer signature on a key using only public parameters
def verify_key(pp: FEPublicParams, key: AnchoredKey) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pp.verification_key).verify(key.signature, key.message(pp))
        return True
    except InvalidSignature:
        return False


class TrustedDealer:
    """Holds msk and serves Enc, KeyGen, Eval one request at a time."""

    def __init__(self, params: PublicParams, pp: FEPublicParams, msk: FEMasterSecret,
                 rng: Optional[DetRandom] = None):
        self.params = params
        self.pp = pp
        self._msk = msk
        self._rng = rng or system_random("fe-dealer")
        self._opened: Dict[bytes, ExponentMatrix] = {}  # blob -> matrix cache
        self.eval_calls = 0

    @classmethod
    def from_seed(cls, params: PublicParams, seed: bytes) -> "TrustedDealer":
        pp, msk = fe_setup(params, seed)
        return cls(params, pp, msk, DetRandom("fe-dealer-iv", seed))

    def _sealing_key(self) -> KeyMaterial:
        return KeyMaterial(self._msk.sealing_key, "enc")

    # Seal a matrix for one side of the functionality
    def fe_enc(self, side: str, matrix: ExponentMatrix, owner: str) -> Encoding:
        _check_side(side)
        if matrix.dim != self.params.dim or matrix.order != self.params.order:
            raise FEError("bad-matrix", "matrix does not match params")
        iv = self._rng.read(IV_SIZE)
        aad = _encoding_aad(side, owner, self.pp)
        with self._sealing_key() as key:
            blob = iv + aead_seal(key, iv, aad, encode_matrix(matrix, self.params))
        return Encoding(side, owner, blob)

    # Dealer-side open of an encoding
    def open_encoding(self, encoding: Encoding) -> ExponentMatrix:
        cached = self._opened.get(encoding.blob)
        if cached is not None:
            return cached
        iv, sealed = encoding.blob[:IV_SIZE], encoding.blob[IV_SIZE:]
        with self._sealing_key() as key:
            data = aead_open(key, iv, encoding.aad(self.pp), sealed)
        matrix = decode_exponent_matrix(data, self.params)
        self._opened[encoding.blob] = matrix
        return matrix

    def fe_keygen(self, side: str, anchor_owner: str) -> AnchoredKey:
        _check_side(side)
        message = _key_message(side, anchor_owner, self.params.dim, self.pp)
        return AnchoredKey(side, anchor_owner, self.params.dim, self._msk.signing_key.sign(message))

    def fe_eval(self, key: AnchoredKey, enc_left: Encoding, enc_right: Encoding, i: int, l: int, m: int,
                k: int) -> int:
        """P[i][l] * Q[m][k] mod (p-1) for P under enc_left and Q under enc_right."""
        if not verify_key(self.pp, key):
            raise InvalidKey()
        if enc_left.side != LEFT or enc_right.side != RIGHT:
            raise FEError("bad-slot", "encodings in the wrong slots")
        anchored_slot = enc_left if key.side == LEFT else enc_right
        if anchored_slot.owner != key.anchor:
            raise AnchoringViolation(detail=f"{key.side} slot owned by {anchored_slot.owner}")
        dim = key.dim
        if not all(0 <= index < dim for index in (i, l, m, k)):
            raise IndexOutOfRange(detail=f"({i}, {l}, {m}, {k})")

        p_matrix = self.open_encoding(enc_left)
        q_matrix = self.open_encoding(enc_right)
        self.eval_calls += 1
        return (p_matrix.rows[i][l] * q_matrix.rows[m][k]) % self.params.order


def rdmpf_via_fe(dealer: TrustedDealer, key: AnchoredKey, enc_a: Encoding, enc_b: Encoding, w: GroupMatrix,
                 counter: Optional[OpCounter] = None) -> GroupMatrix:
    """RDMPF(P, W, Q) with every exponent obtained from dealer evaluations."""
    dim, p = w.dim, w.p
    if dim != dealer.params.dim or p != dealer.params.p:
        raise FEError("bad-matrix", "W does not match params")
    out = []
    for j in range(dim):
        row = []
        for k in range(dim):
            acc = 1
            for l in range(dim):
                for m in range(dim):
                    exponent = dealer.fe_eval(key, enc_a, enc_b, j, l, m, k)
                    acc = int(acc * gmpy2.powmod(w.rows[l][m], exponent, p) % p)
            row.append(acc)
        out.append(tuple(row))
    if counter is not None:
        counter.rdmpf_calls += 1
        counter.exponentiations += dim ** 4
    return GroupMatrix(tuple(out), p)


def compose_via_fe(dealer: TrustedDealer, registry: "KeyRegistry", mine: str, peer: str,
                   counter: Optional[OpCounter] = None) -> GroupMatrix:
    """T1 |> T2 with T1 = RDMPF(P_mine, W, Q_peer) and T2 = RDMPF(P_peer, W, Q_mine)."""
    w = dealer.params.w
    t1 = rdmpf_via_fe(dealer, dealer.fe_keygen(LEFT, mine), registry.lookup(mine, LEFT),
                      registry.lookup(peer, RIGHT), w, counter)
    t2 = rdmpf_via_fe(dealer, dealer.fe_keygen(RIGHT, mine), registry.lookup(peer, LEFT),
                      registry.lookup(mine, RIGHT), w, counter)
    return compose(t1, t2, counter)


class KeyRegistry:
    """Pseudonymous table of published encodings; raw matrices are never stored."""

    def __init__(self):
        self.records: Dict[Tuple[str, str], Encoding] = {}

    # Publish both encodings of a user's public key
    def publish(self, dealer: TrustedDealer, owner: str, pub: PublicKey):
        self.records[(owner, LEFT)] = dealer.fe_enc(LEFT, pub.p, owner)
        self.records[(owner, RIGHT)] = dealer.fe_enc(RIGHT, pub.q, owner)
        logger.debug("registry.published", owner=owner)

    def lookup(self, owner: str, side: str) -> Encoding:
        try:
            return self.records[(owner, side)]
        except KeyError:
            raise FEError("not-registered", f"{owner}/{side}") from None

    def owners(self) -> Iterator[str]:
        return iter(sorted({owner for owner, _ in self.records}))

    def to_bytes(self) -> bytes:
        rows = [{"owner": enc.owner, "side": enc.side, "blob": enc.blob.hex()}
                for _, enc in sorted(self.records.items())]
        return bcoding.bencode({"format": REGISTRY_FORMAT, "records": rows})

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyRegistry":
        decoded = bcoding.bdecode(data)
        if decode_string(get_key(decoded, "format")) != REGISTRY_FORMAT:
            raise FEError("bad-registry", "unknown format")
        registry = cls()
        for row in get_key(decoded, "records"):
            owner = decode_string(get_key(row, "owner"))
            side = decode_string(get_key(row, "side"))
            registry.records[(owner, side)] = Encoding(side, owner, get_hex(row, "blob"))
        return registry

    def save(self, path: str):
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "KeyRegistry":
        with open(path, 'rb') as f:
            return cls.from_bytes(f.read())
