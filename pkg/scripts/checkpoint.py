"""
Binary artifact helpers.
- CLQN checkpoint: named float32 tensor table followed by a JSON metadata block
- Little-endian integer framing shared by the CLRL dataset and CLDS distill files

CLQN layout:
    b"CLQN" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | <f4 values
    u32 metadata length | UTF-8 JSON metadata
"""

import json
from collections import OrderedDict

import numpy as np

from scripts.errors import ArtifactFormatError

CHECKPOINT_MAGIC = b"CLQN"
CHECKPOINT_VERSION = 1


def u32(value):
    return int(value).to_bytes(4, "little")


def u64(value):
    return int(value).to_bytes(8, "little")


class BinaryReader:
    """Cursor over a bytes buffer; running off the end raises ArtifactFormatError."""

    def __init__(self, data, label="artifact"):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ArtifactFormatError(f"{self.label} is truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return int.from_bytes(self.take(4), "little")

    def u64(self):
        return int.from_bytes(self.take(8), "little")

    def text(self):
        return self.take(self.u32()).decode("utf-8")

    def json(self):
        return json.loads(self.text())

    def expect(self, magic, version):
        found = self.take(len(magic))
        if found != magic:
            raise ArtifactFormatError(f"{self.label}: bad magic {found!r}, expected {magic!r}")
        found_version = self.u32()
        if found_version != version:
            raise ArtifactFormatError(f"{self.label}: unsupported version {found_version}")

    @property
    def remaining(self):
        return len(self.data) - self.pos


def text_block(text):
    raw = text.encode("utf-8")
    return u32(len(raw)) + raw


def encode_tensors(tensors, metadata=None):
    parts = [CHECKPOINT_MAGIC, u32(CHECKPOINT_VERSION), u32(len(tensors))]
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f4")
        parts.append(text_block(name))
        parts.append(u32(value.ndim))
        parts.extend(u32(d) for d in value.shape)
        parts.append(value.tobytes())
    parts.append(text_block(json.dumps(metadata or {}, sort_keys=True)))
    return b"".join(parts)


def decode_tensors(data, label="checkpoint"):
    reader = BinaryReader(data, label)
    reader.expect(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    tensors = OrderedDict()
    for _ in range(reader.u32()):
        name = reader.text()
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    metadata = reader.json()
    return tensors, metadata


def save_tensors(path, tensors, metadata=None):
    with open(path, "wb") as f:
        f.write(encode_tensors(tensors, metadata))


def load_tensors(path):
    with open(path, "rb") as f:
        return decode_tensors(f.read(), label=str(path))


def count_parameters(source, prefix=""):
    """Scalar count over a tensor table, a checkpoint path, or a network layer."""
    if hasattr(source, "named_parameters"):
        return sum(p.size for _, p in source.named_parameters())
    if not isinstance(source, dict):
        source, _ = load_tensors(source)
    return int(sum(v.size for name, v in source.items() if name.startswith(prefix)))
