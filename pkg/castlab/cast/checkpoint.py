"""
Binary checkpoint files.

Layout (little-endian): magic ``CASTCKPT``, version u32, tensor count u32,
then per tensor: name length u16, UTF-8 name, rank u8, one u32 per extent,
raw float32 data in row-major order.
"""
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'CASTCKPT'
VERSION = 1


def write_checkpoint(path, tensors):
    """Write ``{name: array}`` to ``path`` in insertion order."""
    path = Path(path)
    chunks = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        data = np.ascontiguousarray(array, dtype='<f4')
        if data.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has rank {data.ndim}")
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', data.ndim))
        chunks.append(struct.pack(f'<{data.ndim}I', *data.shape))
        chunks.append(data.tobytes())
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(b''.join(chunks))
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (%d tensors)", path, len(tensors))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: float32 array}`` dict."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(blob, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (rank,) = reader.unpack('<B')
        shape = reader.unpack(f'<{rank}I')
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape)
        tensors[name] = data.astype(np.float32)
    if reader.offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - reader.offset} trailing bytes")
    return tensors
