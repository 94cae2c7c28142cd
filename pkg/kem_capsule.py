"""Non-interactive encapsulation on top of the RDMPF key agreement.

Capsule wire format: epk_S (encoded P_S then Q_S) || nonce (32) || tag (32).
Envelope wire format: iv (12) || AEAD(h || reclaim_tag || payload) with the HINT as aad.
"""
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import bcoding
import structlog
from cryptography.hazmat.primitives import constant_time

from crypto_suite import (AEAD_TAG_SIZE, DIGEST_SIZE, IV_SIZE, DetRandom, DomainTag, KeyMaterial, aead_open,
                          aead_seal, derive_key, hkdf, hmac_sha3, hmac_verify, sha3_256, system_random)
from errors import CapsuleParseError, ParamsError, ReclaimRejected, TagMismatch
from math_core import (NESTED, OpCounter, PublicKey, PublicParams, ScalarSecret, decode_public_key,
                       encode_matrix, encode_public_key, gen_params, keygen, nika_shared_key)
from utils import encode_index, length_prefixed

logger = structlog.get_logger(__name__)

NONCE_SIZE = 32
ALPHA_SIZE = 32
CHALLENGE_SIZE = 32
ENVELOPE_HEADER_SIZE = 2 * DIGEST_SIZE
RECLAIM_LABEL = b"reclaim"


@dataclass(frozen=True)
class TransferContext:
    """Transfer binding that is MAC'd into the capsule and the reclaim response."""
    factory_txid: str
    canister_ids: Tuple[str, ...]
    subnets: Tuple[str, ...]
    ttl: int
    code_hashes: Tuple[str, ...]
    params_digest: bytes
    deposit_id: str = ""
    refund_output: str = ""

    # Bencoded dictionary: keys sorted, strings length-prefixed
    def to_bytes(self) -> bytes:
        fields = {
            "canister_ids": list(self.canister_ids),
            "code_hashes": list(self.code_hashes),
            "deposit_id": self.deposit_id,
            "factory_txid": self.factory_txid,
            "params_digest": self.params_digest.hex(),
            "refund_output": self.refund_output,
            "subnets": list(self.subnets),
            "ttl": self.ttl,
        }
        return bcoding.bencode(dict(sorted(fields.items())))


@dataclass(frozen=True)
class Capsule:
    epk: bytes
    nonce: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.epk + self.nonce + self.tag

    @property
    def hint(self) -> bytes:
        return compute_hint(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, params: PublicParams) -> "Capsule":
        epk_size = 2 * params.matrix_size
        if len(data) != epk_size + NONCE_SIZE + DIGEST_SIZE:
            raise CapsuleParseError(detail=f"capsule of {len(data)} bytes")
        return cls(data[:epk_size], data[epk_size:epk_size + NONCE_SIZE], data[epk_size + NONCE_SIZE:])


@dataclass(frozen=True)
class InnerEnvelope:
    iv: bytes
    sealed: bytes  # ciphertext || 16-byte tag

    def to_bytes(self) -> bytes:
        return self.iv + self.sealed

    @classmethod
    def from_bytes(cls, data: bytes) -> "InnerEnvelope":
        if len(data) < IV_SIZE + AEAD_TAG_SIZE + ENVELOPE_HEADER_SIZE:
            raise CapsuleParseError(detail=f"envelope of {len(data)} bytes")
        return cls(data[:IV_SIZE], data[IV_SIZE:])


class EnvelopeContents(NamedTuple):
    h: bytes
    reclaim_tag: bytes
    payload: bytes


class TransportKeys(NamedTuple):
    k_enc: KeyMaterial
    k_auth: KeyMaterial


@dataclass(frozen=True)
class ReclaimSecrets:
    r: bytes
    alpha: bytes
    c: bytes

    @classmethod
    def derive(cls, z: bytes, alpha: bytes) -> "ReclaimSecrets":
        return cls(reclaim_seed(z), alpha, sha3_256(alpha))

    @property
    def reclaim_tag(self) -> bytes:
        return sha3_256(self.r)

    def __repr__(self) -> str:
        return f"ReclaimSecrets(c={self.c.hex()[:16]}...)"


@dataclass
class Encapsulation:
    capsule: Capsule
    hint: bytes
    envelope: InnerEnvelope
    secrets: ReclaimSecrets
    k_auth: KeyMaterial


# HINT is computed from the capsule bytes alone
def compute_hint(capsule_bytes: bytes) -> bytes:
    return sha3_256(capsule_bytes)

# Z is the digest of the encoded nested shared matrix
def derive_shared_secret(params: PublicParams, my_secret: ScalarSecret, my_pub: PublicKey, peer_pub: PublicKey,
                         counter: Optional[OpCounter] = None) -> bytes:
    shared = nika_shared_key(params, my_secret, my_pub, peer_pub, NESTED, counter)
    return sha3_256(encode_matrix(shared, params))

# First 32 bytes are K_enc, next 32 are K_auth
def derive_transport_keys(z: bytes, nonce: bytes) -> TransportKeys:
    okm = hkdf(z, nonce, DomainTag.RDMPF_KEM, 2 * DIGEST_SIZE)
    return TransportKeys(KeyMaterial(okm[:DIGEST_SIZE], "enc"), KeyMaterial(okm[DIGEST_SIZE:], "auth"))

# R from Z with empty salt
def reclaim_seed(z: bytes) -> bytes:
    return hkdf(z, b"", DomainTag.RECLAIM, DIGEST_SIZE)

# Authorization value h = SHA3-256(K_auth)
def auth_proof(k_auth: KeyMaterial) -> bytes:
    return sha3_256(k_auth.data)


def encapsulate(params: PublicParams, sender_secret: ScalarSecret, recipient_pub: PublicKey,
                context: TransferContext, payload: bytes, alpha: bytes,
                rng: Optional[DetRandom] = None, counter: Optional[OpCounter] = None) -> Encapsulation:
    if len(alpha) != ALPHA_SIZE:
        raise ParamsError("bad-alpha", f"{len(alpha)} bytes")
    rng = rng or system_random("kem")

    sender_pub = keygen(params, sender_secret)
    z = derive_shared_secret(params, sender_secret, sender_pub, recipient_pub, counter)
    nonce = rng.read(NONCE_SIZE)
    keys = derive_transport_keys(z, nonce)

    tag = hmac_sha3(keys.k_auth.data, context.to_bytes())
    capsule = Capsule(encode_public_key(sender_pub, params), nonce, tag)
    hint = capsule.hint
    secrets = ReclaimSecrets.derive(z, alpha)

    iv = rng.read(IV_SIZE)
    plaintext = auth_proof(keys.k_auth) + secrets.reclaim_tag + payload
    with keys.k_enc as k_enc:
        envelope = InnerEnvelope(iv, aead_seal(k_enc, iv, hint, plaintext))

    logger.debug("kem.encapsulated", hint=hint.hex()[:16], payload_len=len(payload))
    return Encapsulation(capsule, hint, envelope, secrets, keys.k_auth)


def decapsulate(params: PublicParams, recipient_secret: ScalarSecret, recipient_pub: PublicKey,
                capsule: Union[Capsule, bytes], context: TransferContext,
                counter: Optional[OpCounter] = None) -> TransportKeys:
    if isinstance(capsule, bytes):
        capsule = Capsule.from_bytes(capsule, params)
    try:
        sender_pub = decode_public_key(capsule.epk, params)
    except ParamsError as e:
        raise CapsuleParseError(detail=e.reason) from None

    z = derive_shared_secret(params, recipient_secret, recipient_pub, sender_pub, counter)
    keys = derive_transport_keys(z, capsule.nonce)
    if not hmac_verify(keys.k_auth.data, context.to_bytes(), capsule.tag):
        keys.k_enc.zeroize()
        keys.k_auth.zeroize()
        raise TagMismatch()
    return keys


def open_envelope(k_enc: KeyMaterial, envelope: InnerEnvelope, hint: bytes) -> EnvelopeContents:
    plaintext = aead_open(k_enc, envelope.iv, hint, envelope.sealed)
    if len(plaintext) < ENVELOPE_HEADER_SIZE:
        raise CapsuleParseError(detail="short envelope plaintext")
    return EnvelopeContents(plaintext[:DIGEST_SIZE], plaintext[DIGEST_SIZE:ENVELOPE_HEADER_SIZE],
                            plaintext[ENVELOPE_HEADER_SIZE:])


def _reclaim_message(n: bytes, idx: int, context: TransferContext) -> bytes:
    return length_prefixed([n, encode_index(idx), context.to_bytes(), RECLAIM_LABEL])


def reclaim_key(r: bytes, alpha: bytes) -> KeyMaterial:
    return derive_key(r + alpha, b"", DomainTag.RECLAIM_MAC, "rec")


def reclaim_response(secrets: ReclaimSecrets, n: bytes, idx: int, context: TransferContext) -> bytes:
    with reclaim_key(secrets.r, secrets.alpha) as k_rec:
        return hmac_sha3(k_rec.data, _reclaim_message(n, idx, context))


def verify_reclaim(r: bytes, alpha: bytes, n: bytes, idx: int, context: TransferContext, resp: bytes,
                   reclaim_tag: bytes, c: bytes) -> bool:
    """Accept only the committed (R, alpha) and a fresh MAC; raises ReclaimRejected otherwise."""
    if not constant_time.bytes_eq(sha3_256(r), reclaim_tag):
        raise ReclaimRejected("bad-R")
    if not constant_time.bytes_eq(sha3_256(alpha), c):
        raise ReclaimRejected("bad-alpha")
    with reclaim_key(r, alpha) as k_rec:
        if not hmac_verify(k_rec.data, _reclaim_message(n, idx, context), resp):
            raise ReclaimRejected("bad-mac")
    return True


# Golden vectors

VECTOR_PARAMS_SEED = b"golden-vectors"
VECTOR_BITS = 64
VECTOR_DIM = 4


def vector_context(params: PublicParams) -> TransferContext:
    return TransferContext(
        factory_txid="factory-tx-0001",
        canister_ids=("i1-0001", "i2-0001", "c-0001", "c-0002", "w-0001"),
        subnets=("subnet-a", "subnet-b", "subnet-c", "subnet-d", "subnet-e"),
        ttl=400,
        code_hashes=tuple(sha3_256(role.encode()).hex() for role in ("I1", "I2", "C", "W")),
        params_digest=params.digest(),
        deposit_id="deposit-0001",
        refund_output="refund-0001",
    )


def generate_vector(params: PublicParams, seed: bytes, idx: int = 0) -> Dict[str, str]:
    rng = DetRandom("golden-vector", seed)
    sender = ScalarSecret.generate(params, rng)
    recipient = ScalarSecret.generate(params, rng)
    recipient_pub = keygen(params, recipient)
    context = vector_context(params)
    payload = rng.read(48)
    alpha = rng.read(ALPHA_SIZE)

    enc = encapsulate(params, sender, recipient_pub, context, payload, alpha, rng)
    n = rng.read(CHALLENGE_SIZE)
    resp = reclaim_response(enc.secrets, n, idx, context)
    enc.k_auth.zeroize()
    return {
        "seed": seed.hex(),
        "context": context.to_bytes().hex(),
        "payload": payload.hex(),
        "capsule": enc.capsule.to_bytes().hex(),
        "hint": enc.hint.hex(),
        "envelope": enc.envelope.to_bytes().hex(),
        "alpha": alpha.hex(),
        "reclaim_tag": enc.secrets.reclaim_tag.hex(),
        "c": enc.secrets.c.hex(),
        "n": n.hex(),
        "idx": format(idx, 'x'),
        "resp": resp.hex(),
    }


def vector_params() -> PublicParams:
    return gen_params(VECTOR_BITS, VECTOR_DIM, VECTOR_PARAMS_SEED)


# One record per line: name then key=hex fields in sorted order
def format_vector_line(name: str, fields: Dict[str, str]) -> str:
    return " ".join([name] + [f"{k}={fields[k]}" for k in sorted(fields)])


def parse_vector_line(line: str) -> Tuple[str, Dict[str, str]]:
    parts = line.split()
    if not parts:
        raise CapsuleParseError(detail="empty vector line")
    fields = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise CapsuleParseError(detail=f"malformed field {part!r}")
        fields[key] = value
    return parts[0], fields


def write_vectors(path: str, records: List[Tuple[str, Dict[str, str]]]):
    with open(path, 'w') as f:
        for name, fields in records:
            f.write(format_vector_line(name, fields) + "\n")


def load_vectors(path: str) -> List[Tuple[str, Dict[str, str]]]:
    with open(path, 'r') as f:
        return [parse_vector_line(line) for line in f if line.strip()]
