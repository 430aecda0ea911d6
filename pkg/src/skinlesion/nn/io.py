"""Weights container.

Layout (all integers little-endian)::

    magic        8 bytes   b"SKLWGT\\x00\\x01"
    version      uint32    1
    count        uint32    number of records
    record * count:
        node id      uint16 length + utf-8 bytes
        name         uint16 length + utf-8 bytes
        kind         uint8     0 = trainable parameter, 1 = buffer (running statistics)
        ndim         uint8
        dims         uint32 * ndim
        data         float32 * prod(dims), little-endian, C order

Records follow the graph's topological order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SKLWGT\x00\x01"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class StructureMismatch(ValueError):
    pass


def _records(g):
    for nid, name, arr in g.named_params():
        yield nid, name, 0, arr
    for nid, name, arr in g.named_buffers():
        yield nid, name, 1, arr


def dump_weights(g) -> bytes:
    chunks = []
    records = list(_records(g))
    chunks.append(MAGIC + struct.pack("<II", VERSION, len(records)))
    for nid, name, kind, arr in records:
        for text in (nid, name):
            raw = text.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", kind, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_weights(blob: bytes) -> list:
    """Decode a weights blob into (node, name, kind, array) records."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError(f"truncated weights file at byte {pos} (needed {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version}")
    records = []
    for _ in range(count):
        texts = []
        for _ in range(2):
            (n,) = struct.unpack("<H", take(2))
            texts.append(bytes(take(n)).decode("utf-8"))
        kind, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(dims)
        records.append((texts[0], texts[1], kind, arr))
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after last record")
    return records


def save_weights(g, path) -> None:
    Path(path).write_bytes(dump_weights(g))


def load_weights(g, path) -> None:
    """Load weights into `g`. The whole file is validated before anything is assigned."""
    records = parse_weights(Path(path).read_bytes())
    expected = [(nid, name, kind, arr.shape) for nid, name, kind, arr in _records(g)]
    if len(records) != len(expected):
        raise StructureMismatch(f"file has {len(records)} records, graph expects {len(expected)}")
    for (nid, name, kind, arr), (enid, ename, ekind, eshape) in zip(records, expected):
        if (nid, name, kind) != (enid, ename, ekind):
            raise StructureMismatch(f"record {nid}.{name} does not match graph entry {enid}.{ename}")
        if arr.shape != eshape:
            raise StructureMismatch(f"{nid}.{name}: file shape {arr.shape}, graph shape {eshape}")
    for nid, name, kind, arr in records:
        target = g.params_of(nid) if kind == 0 else g.buffers_of(nid)
        target[name] = arr.astype(g.dtype)


def import_weights(g, arrays: dict) -> None:
    """Hook for externally sourced weights: ``{(node id, name): array}``.

    Only listed entries are replaced; shapes must match exactly.
    """
    for (nid, name), arr in arrays.items():
        if nid not in g.nodes:
            raise StructureMismatch(f"unknown node {nid!r}")
        params = g.params_of(nid)
        target = params if name in params else g.buffers_of(nid)
        if name not in target:
            raise StructureMismatch(f"node {nid!r} has no parameter {name!r}")
        arr = np.asarray(arr)
        if arr.shape != target[name].shape:
            raise StructureMismatch(f"{nid}.{name}: got shape {arr.shape}, expected {target[name].shape}")
        target[name] = arr.astype(g.dtype)
