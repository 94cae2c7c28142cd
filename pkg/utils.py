import hashlib
from typing import Any, Dict, Iterable, Union

from bitstring import BitArray

# Width of every length prefix
LENGTH_PREFIX_BYTES = 4

# Convert integer to bytes (big endian)
def int_to_bytes(value: int, length: int) -> bytes:
    return value.to_bytes(length, byteorder='big')

# Little endian conversions used by the matrix encoding
def le_bytes_to_int(data: bytes) -> int:
    return int.from_bytes(data, byteorder='little')

def int_to_le_bytes(value: int, length: int) -> bytes:
    return value.to_bytes(length, byteorder='little')

# Concatenate fields, each preceded by its 4-byte big-endian length
def length_prefixed(fields: Iterable[bytes]) -> bytes:
    out = bytearray()
    for field in fields:
        out += int_to_bytes(len(field), LENGTH_PREFIX_BYTES)
        out += field
    return bytes(out)

# Format bytes into human readable format
def format_bytes(bytes_count: int) -> str:
    for unit in ['B', 'KB', 'MB', 'GB']:
        if bytes_count < 1024.0:
            return f"{bytes_count:.1f} {unit}"
        bytes_count /= 1024.0
    return f"{bytes_count:.1f} TB"

# Create a pseudonymous principal id from random bytes
def create_principal_id(prefix: str, entropy: bytes) -> str:
    return f"{prefix}-{hashlib.sha3_256(entropy).hexdigest()[:16]}"

# Return a copy of data with one bit inverted
def flip_bit(data: bytes, index: int) -> bytes:
    bits = BitArray(bytes=data)
    bits.invert(index % len(bits))
    return bits.bytes

# Encode an integer index as the 8-byte big-endian form used in MAC inputs
def encode_index(idx: int) -> bytes:
    return int_to_bytes(idx, 8)

# Get a bdecoded dictionary value with either string or byte key
def get_key(data: Dict, key: str) -> Any:
    byte_key = key.encode('utf-8')
    if byte_key in data:
        return data[byte_key]
    elif key in data:
        return data[key]
    else:
        raise KeyError(f"Key '{key}' not found in data")

# Decode string values that might be bytes or strings
def decode_string(value: Union[str, bytes]) -> str:
    if isinstance(value, bytes):
        return value.decode('utf-8')
    return value

# Read a hex-encoded binary field from bdecoded data
def get_hex(data: Dict, key: str) -> bytes:
    return bytes.fromhex(decode_string(get_key(data, key)))
