import hashlib
import os
from enum import Enum
from typing import Iterable, List, Union

import structlog
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import constant_time, hashes
from cryptography.hazmat.primitives import hmac as crypto_hmac
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from errors import AuthenticationFailure, DomainTagError, KeyDerivationError, RdmpfError
from utils import int_to_bytes, length_prefixed

logger = structlog.get_logger(__name__)

DIGEST_SIZE = 32
KEY_SIZE = 32
IV_SIZE = 12
AEAD_TAG_SIZE = 16
MAX_HKDF_OUTPUT = 255 * DIGEST_SIZE

# Closed set of domain separation labels
class DomainTag(str, Enum):
    RDMPF_KEM = "rdmpf-kem"
    RECLAIM = "reclaim"
    RECLAIM_MAC = "reclaim-mac"
    CSRN_TRANSIT = "csrn-transit"
    WITNESS_EVENT = "witness-event"
    CONTEXT_COMMIT = "context-commit"
    SUBACCOUNT = "subaccount"
    HINT = "hint"

    @classmethod
    def parse(cls, label: Union[str, "DomainTag"]) -> "DomainTag":
        if isinstance(label, DomainTag):
            return label
        try:
            return cls(label)
        except ValueError:
            raise DomainTagError(detail=str(label)) from None

    @property
    def encoded(self) -> bytes:
        return self.value.encode('ascii')


# Tags accepted by blake2s_event
EVENT_TAGS = frozenset({DomainTag.WITNESS_EVENT, DomainTag.CONTEXT_COMMIT, DomainTag.SUBACCOUNT})

KEY_ROLES = ("enc", "auth", "rec", "transit")


class KeyMaterial:
    """A 32-byte secret with a role, overwritten in place on release."""

    def __init__(self, data: bytes, role: str):
        if len(data) != KEY_SIZE:
            raise KeyDerivationError("bad-key-length", f"{len(data)} bytes")
        if role not in KEY_ROLES:
            raise RdmpfError("bad-key-role", role)
        self._buf = bytearray(data)
        self.role = role
        self.zeroized = False

    @property
    def data(self) -> bytes:
        if self.zeroized:
            raise RdmpfError("key-zeroized", self.role)
        return bytes(self._buf)

    def zeroize(self):
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self.zeroized = True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.zeroize()

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeyMaterial):
            return NotImplemented
        return self.role == other.role and constant_time.bytes_eq(bytes(self._buf), bytes(other._buf))

    def __hash__(self):
        return hash((self.role, sha3_256(bytes(self._buf))))

    def __repr__(self) -> str:
        state = "zeroized" if self.zeroized else "live"
        return f"KeyMaterial(role={self.role!r}, {state})"


# SHA3-256 digest
def sha3_256(data: bytes) -> bytes:
    return hashlib.sha3_256(data).digest()

# HMAC over SHA3-256
def hmac_sha3(key: bytes, msg: bytes) -> bytes:
    h = crypto_hmac.HMAC(key, hashes.SHA3_256())
    h.update(msg)
    return h.finalize()

# Constant-time tag check
def hmac_verify(key: bytes, msg: bytes, tag: bytes) -> bool:
    h = crypto_hmac.HMAC(key, hashes.SHA3_256())
    h.update(msg)
    try:
        h.verify(tag)
        return True
    except InvalidSignature:
        return False

# RFC 5869 extract-then-expand over HMAC-SHA3-256
def hkdf(ikm: bytes, salt: bytes, info: Union[str, DomainTag], out_len: int) -> bytes:
    tag = DomainTag.parse(info)
    if out_len > MAX_HKDF_OUTPUT:
        raise KeyDerivationError(detail=f"{out_len} > {MAX_HKDF_OUTPUT}")
    if out_len <= 0:
        raise KeyDerivationError("bad-length", str(out_len))
    kdf = HKDF(algorithm=hashes.SHA3_256(), length=out_len, salt=salt or None, info=tag.encoded)
    return kdf.derive(ikm)

# Derive a KeyMaterial directly
def derive_key(ikm: bytes, salt: bytes, info: Union[str, DomainTag], role: str) -> KeyMaterial:
    return KeyMaterial(hkdf(ikm, salt, info, KEY_SIZE), role)

# ChaCha20-Poly1305 seal, returns ciphertext || tag
def aead_seal(key: KeyMaterial, iv: bytes, aad: bytes, plaintext: bytes) -> bytes:
    _check_aead_inputs(key, iv)
    return ChaCha20Poly1305(key.data).encrypt(iv, plaintext, aad)

# ChaCha20-Poly1305 open, raises AuthenticationFailure on any modification
def aead_open(key: KeyMaterial, iv: bytes, aad: bytes, sealed: bytes) -> bytes:
    _check_aead_inputs(key, iv)
    if len(sealed) < AEAD_TAG_SIZE:
        raise AuthenticationFailure("truncated-ciphertext")
    try:
        return ChaCha20Poly1305(key.data).decrypt(iv, sealed, aad)
    except InvalidTag:
        raise AuthenticationFailure() from None

def _check_aead_inputs(key: KeyMaterial, iv: bytes):
    if key.role not in ("enc", "transit"):
        raise RdmpfError("bad-key-role", f"aead with {key.role} key")
    if len(iv) != IV_SIZE:
        raise RdmpfError("bad-iv-length", f"{len(iv)} bytes")

# BLAKE2s-256 over the tag and length-prefixed fields
def blake2s_event(tag: Union[str, DomainTag], fields: Iterable[bytes]) -> bytes:
    tag = DomainTag.parse(tag)
    if tag not in EVENT_TAGS:
        raise DomainTagError("wrong-tag", tag.value)
    h = hashlib.blake2s(digest_size=DIGEST_SIZE)
    h.update(length_prefixed([tag.encoded] + list(fields)))
    return h.digest()


class DetRandom:
    """Seeded byte stream built from SHAKE-256 in counter mode.

    Streams with different labels are independent. The first ``n`` bytes of a
    stream equal ``det_random(label, seed, n)``.
    """

    BLOCK_SIZE = 136

    def __init__(self, label: str, seed: bytes):
        self.label = label
        self._seed = bytes(seed)
        self._prefix = length_prefixed([label.encode('utf-8'), self._seed])
        self._counter = 0
        self._buffer = bytearray()

    # Next n bytes of the stream
    def read(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hashlib.shake_256(self._prefix + int_to_bytes(self._counter, 8)).digest(self.BLOCK_SIZE)
            self._buffer += block
            self._counter += 1
        out = bytes(self._buffer[:n])
        del self._buffer[:n]
        return out

    # Uniform integer in [0, bound) by rejection sampling
    def randbelow(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        if bound == 1:
            return 0
        bits = (bound - 1).bit_length()
        width = (bits + 7) // 8
        excess = width * 8 - bits
        while True:
            value = int.from_bytes(self.read(width), 'big') >> excess
            if value < bound:
                return value

    # Uniform integer in [low, high)
    def randrange(self, low: int, high: int) -> int:
        return low + self.randbelow(high - low)

    def randbits(self, bits: int) -> int:
        width = (bits + 7) // 8
        return int.from_bytes(self.read(width), 'big') >> (width * 8 - bits)

    # Fisher-Yates shuffle returning a new list
    def shuffled(self, items: List) -> List:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    # Independent child stream
    def fork(self, label: str) -> "DetRandom":
        return DetRandom(f"{self.label}/{label}", self._seed)


# Deterministic pseudorandom bytes for (label, seed)
def det_random(stream_label: str, seed: bytes, n: int) -> bytes:
    if n == 0:
        return b""
    return DetRandom(stream_label, seed).read(n)

# Fresh unseeded stream for callers without a simulator seed
def system_random(label: str = "system") -> DetRandom:
    return DetRandom(label, os.urandom(32))
