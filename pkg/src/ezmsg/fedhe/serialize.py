import struct
import typing

import numpy as np

from .params import RingParams
from .linear import identity
from .mhe import (
    Ciphertext, Plaintext, PublicKey, SwitchingKey, CollectiveKeys,
    PublicKeyShare, RelinShare, RotationKeyShare, DecryptionShare,
    KeySwitchShare, BootstrapRequest, BootstrapShare
)
from .reference import RefCiphertext, RefPublicKey, RefCollectiveKeys, RefShare, RefBootstrapRequest
from .ring import DIGITS_PER_PRIME
from .errors import SerializationError

MAGIC = b'FDHE'
VERSION = 1

# Every blob: magic, version, type tag, payload length
HEADER = '<4sBBQ'
HEADER_SIZE = struct.calcsize(HEADER)

TAG_PARAMS = 1
TAG_CIPHERTEXT = 2
TAG_PLAINTEXT = 3
TAG_PUBLIC_KEY = 4
TAG_SWITCHING_KEY = 5
TAG_COLLECTIVE_KEYS = 6
TAG_PUBLIC_KEY_SHARE = 7
TAG_RELIN_SHARE = 8
TAG_ROTATION_KEY_SHARE = 9
TAG_DECRYPTION_SHARE = 10
TAG_KEY_SWITCH_SHARE = 11
TAG_BOOTSTRAP_REQUEST = 12
TAG_BOOTSTRAP_SHARE = 13

CIPHERTEXT_HEAD = '<IIBd'
PLAINTEXT_HEAD = '<IId'
KEY_HEAD = '<II'
SWITCHING_KEY_HEAD = '<III'
PARTY_HEAD = '<iII'
ROTATION_SHARE_HEAD = '<iIII'
RELIN_SHARE_HEAD = '<iIIIB'
REQUEST_HEAD = '<IIdQH'
BOOTSTRAP_SHARE_HEAD = '<iQIII'


def _frame(tag: int, payload: bytes) -> bytes:
    return struct.pack(HEADER, MAGIC, VERSION, tag, len(payload)) + payload


def _array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype = '<i8').tobytes()


def _read_array(buf: memoryview, offset: int, shape: typing.Tuple[int, ...]) -> typing.Tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    out = np.frombuffer(buf, dtype = '<i8', count = count, offset = offset).reshape(shape).astype(np.int64)
    return out, offset + 8 * count


def dumps(obj: typing.Any) -> bytes:
    """ Binary encoding of parameters, keys, ciphertexts and protocol messages """
    if isinstance(obj, RingParams):
        chain = obj.modulus_chain
        payload = struct.pack('<IdIBdI', obj.ring_dim, obj.initial_scale, obj.security_level,
                              int(obj.toy_mode), obj.sigma, len(chain))
        payload += struct.pack(f'<{len(chain) + 1}Q', *chain, obj.special_prime)
        return _frame(TAG_PARAMS, payload)

    if isinstance(obj, Ciphertext):
        N = obj.parts[0].shape[-1]
        head = struct.pack(CIPHERTEXT_HEAD, N, obj.level, len(obj.parts), obj.scale)
        return _frame(TAG_CIPHERTEXT, head + b''.join(_array(p) for p in obj.parts))

    if isinstance(obj, Plaintext):
        head = struct.pack(PLAINTEXT_HEAD, obj.poly.shape[-1], obj.level, obj.scale)
        return _frame(TAG_PLAINTEXT, head + _array(obj.poly))

    if isinstance(obj, PublicKey):
        rows, N = obj.b.shape
        return _frame(TAG_PUBLIC_KEY, struct.pack(KEY_HEAD, N, rows) + _array(obj.b) + _array(obj.a))

    if isinstance(obj, SwitchingKey):
        digits, rows, N = obj.b.shape
        head = struct.pack(SWITCHING_KEY_HEAD, N, digits, rows)
        return _frame(TAG_SWITCHING_KEY, head + _array(obj.b) + _array(obj.a))

    if isinstance(obj, CollectiveKeys):
        parts = [dumps(obj.public), dumps(obj.relin) if obj.relin is not None else b'']
        payload = struct.pack('<QQI', len(parts[0]), len(parts[1]), len(obj.rotations)) + parts[0] + parts[1]
        for offset, key in sorted(obj.rotations.items()):
            blob = dumps(key)
            payload += struct.pack('<IQ', offset, len(blob)) + blob
        return _frame(TAG_COLLECTIVE_KEYS, payload)

    if isinstance(obj, PublicKeyShare):
        rows, N = obj.b.shape
        return _frame(TAG_PUBLIC_KEY_SHARE, struct.pack(PARTY_HEAD, obj.party, N, rows) + _array(obj.b))

    if isinstance(obj, RotationKeyShare):
        digits, rows, N = obj.b.shape
        head = struct.pack(ROTATION_SHARE_HEAD, obj.party, obj.offset, N, rows)
        return _frame(TAG_ROTATION_KEY_SHARE, head + _array(obj.b))

    if isinstance(obj, RelinShare):
        digits, rows, N = obj.h0.shape
        head = struct.pack(RELIN_SHARE_HEAD, obj.party, N, digits, rows, obj.round)
        return _frame(TAG_RELIN_SHARE, head + _array(obj.h0) + _array(obj.h1))

    if isinstance(obj, DecryptionShare):
        head = struct.pack(PARTY_HEAD, obj.party, obj.h.shape[-1], obj.level)
        return _frame(TAG_DECRYPTION_SHARE, head + _array(obj.h))

    if isinstance(obj, KeySwitchShare):
        head = struct.pack(PARTY_HEAD, obj.party, obj.h0.shape[-1], obj.level)
        return _frame(TAG_KEY_SWITCH_SHARE, head + _array(obj.h0) + _array(obj.h1))

    if isinstance(obj, BootstrapRequest):
        key = obj.transform.key.encode()
        head = struct.pack(REQUEST_HEAD, obj.c1.shape[-1], obj.level, obj.scale, obj.nonce, len(key))
        return _frame(TAG_BOOTSTRAP_REQUEST, head + key + _array(obj.c1))

    if isinstance(obj, BootstrapShare):
        N = obj.h0.shape[-1]
        head = struct.pack(BOOTSTRAP_SHARE_HEAD, obj.party, obj.nonce, N, len(obj.h0), len(obj.h1))
        return _frame(TAG_BOOTSTRAP_SHARE, head + _array(obj.h0) + _array(obj.h1))

    raise SerializationError(f'Cannot serialize {type(obj).__name__}')


def loads(data: bytes) -> typing.Any:
    buf = memoryview(data)
    if len(buf) < HEADER_SIZE:
        raise SerializationError('Truncated header')
    magic, version, tag, length = struct.unpack_from(HEADER, buf, 0)
    if magic != MAGIC:
        raise SerializationError(f'Bad magic {magic!r}')
    if version != VERSION:
        raise SerializationError(f'Unsupported {version=}')
    if len(buf) < HEADER_SIZE + length:
        raise SerializationError('Truncated payload')
    off = HEADER_SIZE

    if tag == TAG_PARAMS:
        N, scale, security, toy, sigma, count = struct.unpack_from('<IdIBdI', buf, off)
        off += struct.calcsize('<IdIBdI')
        moduli = struct.unpack_from(f'<{count + 1}Q', buf, off)
        return RingParams(
            ring_dim = N, modulus_chain = tuple(moduli[:-1]), special_prime = moduli[-1],
            initial_scale = scale, security_level = security, toy_mode = bool(toy), sigma = sigma
        )

    if tag == TAG_CIPHERTEXT:
        N, level, n_parts, scale = struct.unpack_from(CIPHERTEXT_HEAD, buf, off)
        off += struct.calcsize(CIPHERTEXT_HEAD)
        parts = []
        for _ in range(n_parts):
            part, off = _read_array(buf, off, (level + 1, N))
            parts.append(part)
        return Ciphertext(tuple(parts), level, scale)

    if tag == TAG_PLAINTEXT:
        N, level, scale = struct.unpack_from(PLAINTEXT_HEAD, buf, off)
        off += struct.calcsize(PLAINTEXT_HEAD)
        poly, _ = _read_array(buf, off, (level + 1, N))
        return Plaintext(poly, level, scale)

    if tag == TAG_PUBLIC_KEY:
        N, rows = struct.unpack_from(KEY_HEAD, buf, off)
        off += struct.calcsize(KEY_HEAD)
        b, off = _read_array(buf, off, (rows, N))
        a, _ = _read_array(buf, off, (rows, N))
        return PublicKey(b = b, a = a)

    if tag == TAG_SWITCHING_KEY:
        N, digits, rows = struct.unpack_from(SWITCHING_KEY_HEAD, buf, off)
        off += struct.calcsize(SWITCHING_KEY_HEAD)
        b, off = _read_array(buf, off, (digits, rows, N))
        a, _ = _read_array(buf, off, (digits, rows, N))
        return SwitchingKey(b = b, a = a)

    if tag == TAG_COLLECTIVE_KEYS:
        n_public, n_relin, n_rot = struct.unpack_from('<QQI', buf, off)
        off += struct.calcsize('<QQI')
        public = loads(bytes(buf[off: off + n_public]))
        off += n_public
        relin = loads(bytes(buf[off: off + n_relin])) if n_relin else None
        off += n_relin
        rotations = {}
        for _ in range(n_rot):
            offset, size = struct.unpack_from('<IQ', buf, off)
            off += struct.calcsize('<IQ')
            rotations[offset] = loads(bytes(buf[off: off + size]))
            off += size
        return CollectiveKeys(public = public, relin = relin, rotations = rotations)

    if tag == TAG_PUBLIC_KEY_SHARE:
        party, N, rows = struct.unpack_from(PARTY_HEAD, buf, off)
        off += struct.calcsize(PARTY_HEAD)
        b, _ = _read_array(buf, off, (rows, N))
        return PublicKeyShare(party = party, b = b)

    if tag == TAG_ROTATION_KEY_SHARE:
        party, offset, N, rows = struct.unpack_from(ROTATION_SHARE_HEAD, buf, off)
        off += struct.calcsize(ROTATION_SHARE_HEAD)
        digits = (length - struct.calcsize(ROTATION_SHARE_HEAD)) // (8 * rows * N)
        b, _ = _read_array(buf, off, (digits, rows, N))
        return RotationKeyShare(party = party, offset = offset, b = b)

    if tag == TAG_RELIN_SHARE:
        party, N, digits, rows, rnd = struct.unpack_from(RELIN_SHARE_HEAD, buf, off)
        off += struct.calcsize(RELIN_SHARE_HEAD)
        h0, off = _read_array(buf, off, (digits, rows, N))
        h1, _ = _read_array(buf, off, (digits, rows, N))
        return RelinShare(party, rnd, h0, h1)

    if tag == TAG_DECRYPTION_SHARE:
        party, N, level = struct.unpack_from(PARTY_HEAD, buf, off)
        off += struct.calcsize(PARTY_HEAD)
        h, _ = _read_array(buf, off, (level + 1, N))
        return DecryptionShare(party = party, level = level, h = h)

    if tag == TAG_KEY_SWITCH_SHARE:
        party, N, level = struct.unpack_from(PARTY_HEAD, buf, off)
        off += struct.calcsize(PARTY_HEAD)
        h0, off = _read_array(buf, off, (level + 1, N))
        h1, _ = _read_array(buf, off, (level + 1, N))
        return KeySwitchShare(party = party, level = level, h0 = h0, h1 = h1)

    if tag == TAG_BOOTSTRAP_REQUEST:
        N, level, scale, nonce, key_len = struct.unpack_from(REQUEST_HEAD, buf, off)
        off += struct.calcsize(REQUEST_HEAD)
        key = bytes(buf[off: off + key_len]).decode()
        off += key_len
        if key != identity().key:
            raise SerializationError(f'Transform {key!r} must be resolved by the receiver')
        c1, _ = _read_array(buf, off, (level + 1, N))
        return BootstrapRequest(c1 = c1, level = level, scale = scale, nonce = nonce)

    if tag == TAG_BOOTSTRAP_SHARE:
        party, nonce, N, rows0, rows1 = struct.unpack_from(BOOTSTRAP_SHARE_HEAD, buf, off)
        off += struct.calcsize(BOOTSTRAP_SHARE_HEAD)
        h0, off = _read_array(buf, off, (rows0, N))
        h1, _ = _read_array(buf, off, (rows1, N))
        return BootstrapShare(party = party, nonce = nonce, h0 = h0, h1 = h1)

    raise SerializationError(f'Unknown type {tag=}')


def ciphertext_size(params: RingParams, level: int, parts: int = 2) -> int:
    return HEADER_SIZE + struct.calcsize(CIPHERTEXT_HEAD) + 8 * parts * (level + 1) * params.ring_dim


def public_key_size(params: RingParams) -> int:
    rows = params.initial_level + 1
    return HEADER_SIZE + struct.calcsize(KEY_HEAD) + 16 * rows * params.ring_dim


def wire_size(obj: typing.Any, params: RingParams) -> int:
    """
    Serialized size in bytes. Reference-backend objects are sized as the
    lattice objects they stand in for, so both backends account identically.
    """
    N = params.ring_dim
    top = params.initial_level
    digits = (top + 1) * DIGITS_PER_PRIME
    ext_rows = top + 2

    if isinstance(obj, RefCiphertext):
        return ciphertext_size(params, obj.level, obj.degree + 1)
    if isinstance(obj, RefPublicKey):
        return public_key_size(params)
    if isinstance(obj, RefCollectiveKeys):
        switching = HEADER_SIZE + struct.calcsize(SWITCHING_KEY_HEAD) + 16 * digits * ext_rows * N
        size = HEADER_SIZE + struct.calcsize('<QQI') + public_key_size(params)
        size += switching if obj.relin else 0
        return size + len(obj.rotations) * (struct.calcsize('<IQ') + switching)
    if isinstance(obj, RefBootstrapRequest):
        key = len(obj.transform.key.encode())
        return HEADER_SIZE + struct.calcsize(REQUEST_HEAD) + key + 8 * (obj.level + 1) * N
    if isinstance(obj, RefShare):
        if obj.kind == 'public_key':
            return HEADER_SIZE + struct.calcsize(PARTY_HEAD) + 8 * (top + 1) * N
        if obj.kind == 'rotation_key':
            return HEADER_SIZE + struct.calcsize(ROTATION_SHARE_HEAD) + 8 * digits * ext_rows * N
        if obj.kind == 'relin':
            return HEADER_SIZE + struct.calcsize(RELIN_SHARE_HEAD) + 16 * digits * ext_rows * N
        if obj.kind == 'decryption':
            return HEADER_SIZE + struct.calcsize(PARTY_HEAD) + 8 * (obj.level + 1) * N
        if obj.kind == 'key_switch':
            return HEADER_SIZE + struct.calcsize(PARTY_HEAD) + 16 * (obj.level + 1) * N
        if obj.kind == 'bootstrap':
            return HEADER_SIZE + struct.calcsize(BOOTSTRAP_SHARE_HEAD) + 8 * (obj.level + 1 + top + 1) * N
        raise SerializationError(f'{obj.kind} shares never travel')
    return len(dumps(obj))
