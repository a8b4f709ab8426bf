# ===== app/services/checkpoint.py =====
"""MSNN parameter checkpoints.

Layout (little-endian): magic ``MSNN``, format version u32, then one record
per tensor: name length u32, UTF-8 name, rank u32, dims u32 x rank, f64
payload. Records run to the end of the file. Metadata (config hash, model
kind, step counters) travels as ``meta.*`` tensors.
"""
import struct

import numpy as np

from app.errors import ConfigError, DataFormatError

MAGIC = b'MSNN'
VERSION = 1


def text_tensor(text):
    """Encode a string as a rank-1 tensor of its UTF-8 byte values."""
    return np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype(np.float64)


def tensor_text(tensor):
    return bytes(np.asarray(tensor, dtype=np.uint8).tolist()).decode('utf-8')


def encode_checkpoint(tensors):
    parts = [MAGIC, struct.pack('<I', VERSION)]
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<I', value.ndim))
        if value.ndim:
            parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(np.ascontiguousarray(value).astype('<f8').tobytes())
    return b''.join(parts)


def _unpack(fmt, data, offset, what):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise DataFormatError(f'truncated checkpoint while reading {what}', offset)
    return struct.unpack_from(fmt, data, offset), offset + size


def decode_checkpoint(data):
    if data[:4] != MAGIC:
        raise DataFormatError('bad checkpoint magic, expected MSNN', 0)
    (version,), offset = _unpack('<I', data, 4, 'format version')
    if version != VERSION:
        raise DataFormatError(f'unsupported checkpoint version {version}', 4)

    tensors = {}
    while offset < len(data):
        (name_len,), offset = _unpack('<I', data, offset, 'name length')
        if offset + name_len > len(data):
            raise DataFormatError('truncated checkpoint while reading tensor name', offset)
        try:
            name = data[offset:offset + name_len].decode('utf-8')
        except UnicodeDecodeError as exc:
            raise DataFormatError('tensor name is not valid UTF-8', offset) from exc
        offset += name_len
        (rank,), offset = _unpack('<I', data, offset, f'rank of {name}')
        dims, offset = _unpack(f'<{rank}I', data, offset, f'dims of {name}') if rank else ((), offset)
        count = int(np.prod(dims)) if rank else 1
        if offset + 8 * count > len(data):
            raise DataFormatError(f'truncated checkpoint while reading payload of {name}', offset)
        payload = np.frombuffer(data, dtype='<f8', count=count, offset=offset)
        tensors[name] = payload.astype(np.float64).reshape(dims)
        offset += 8 * count
    return tensors


def write_checkpoint(path, tensors):
    data = encode_checkpoint(tensors)
    try:
        with open(path, 'wb') as handle:
            handle.write(data)
    except OSError as exc:
        raise ConfigError(f'cannot write checkpoint {path}: {exc.strerror}') from exc


def read_checkpoint(path):
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as exc:
        raise ConfigError(f'cannot read checkpoint {path}: {exc.strerror}') from exc
    return decode_checkpoint(data)
