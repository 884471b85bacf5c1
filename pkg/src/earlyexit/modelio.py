"""Versioned binary model files.

Layout (all integers little-endian)::

    b"BNET"                 magic
    u32                     format version
    u32                     length L of the network text
    L bytes                 network in config text form (UTF-8)
    u64                     payload length P in bytes
    P bytes                 parameters as float32, declaration order
    u32                     CRC-32 of the payload

The network text fixes parameter names and shapes, so the payload carries
no per-tensor headers.
"""

import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .config import parse_network, serialize_network
from .errors import BadMagicError, ConfigError, ModelFormatError, PayloadLengthError, UnsupportedVersionError
from .graph import parameter_layout
from .layers import ParameterStore
from .reporting import atomic_open

MAGIC = b"BNET"
VERSION = 1


class ChecksumWarning(UserWarning):
    """Stored payload checksum does not match the payload."""


@dataclass
class LoadedModel:
    spec: object
    params: ParameterStore
    checksum_ok: bool


def encode_model(spec, params):
    layout = parameter_layout(spec)
    chunks = []
    for name, shape in layout:
        if name not in params:
            raise ModelFormatError(f"parameter {name!r} missing from the store")
        value = params[name]
        if value.shape != shape:
            raise ModelFormatError(f"parameter {name!r} has shape {value.shape}, network expects {shape}")
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    extra = sorted(set(params.names()) - {n for n, _ in layout})
    if extra:
        raise ModelFormatError(f"parameters not in the network: {extra}")
    payload = b"".join(chunks)
    text = serialize_network(spec).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(text)),
        text,
        struct.pack("<Q", len(payload)),
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def decode_model(buf):
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a model file: expected magic {MAGIC!r}, got {bytes(buf[:4])!r}")
    version, text_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"model format version {version} is not supported (this build reads {VERSION})")
    off = 12
    if len(buf) < off + text_len + 8:
        raise PayloadLengthError(f"file ends inside the header ({len(buf)} bytes)")
    try:
        spec = parse_network(buf[off:off + text_len].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as e:
        raise ModelFormatError(f"embedded network description is invalid: {e}") from None
    off += text_len
    (payload_len,) = struct.unpack_from("<Q", buf, off)
    off += 8
    layout = parameter_layout(spec)
    expected = 4 * sum(int(np.prod(shape)) for _, shape in layout)
    if payload_len != expected:
        raise PayloadLengthError(f"payload declares {payload_len} bytes, network needs {expected}")
    if len(buf) != off + payload_len + 4:
        raise PayloadLengthError(f"file is {len(buf)} bytes, expected {off + payload_len + 4}")
    payload = bytes(buf[off:off + payload_len])
    (stored_crc,) = struct.unpack_from("<I", buf, off + payload_len)
    ok = zlib.crc32(payload) == stored_crc
    if not ok:
        warnings.warn("model payload checksum mismatch; parameters may be corrupt", ChecksumWarning, stacklevel=3)
    params = ParameterStore()
    pos = 0
    for name, shape in layout:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        params.add(name, arr)
        pos += 4 * count
    return LoadedModel(spec, params, ok)


def save_model(path, spec, params):
    """Write atomically: a failed save leaves no partial file at ``path``."""
    data = encode_model(spec, params)
    with atomic_open(path, "wb") as f:
        f.write(data)


def load_model(path):
    with open(path, "rb") as f:
        return decode_model(f.read())
