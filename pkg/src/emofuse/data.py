"""On-disk containers: the EMOF feature store and EMOC model checkpoints.

Both formats are little-endian and bit-exact: writing a store (or checkpoint)
and reading it back reproduces every byte of payload. Training math runs in
float64; feature storage is float32, so values survive the round trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CheckpointError, CorruptionError, FormatError

LABEL_NAMES = ("neutral", "anger", "happiness", "sadness", "worry", "surprise")
NAME_TO_ORDINAL = {name: i for i, name in enumerate(LABEL_NAMES)}
N_CLASSES = len(LABEL_NAMES)
SPLITS = ("labeled", "unlabeled", "test")

STORE_MAGIC = b"EMOF"
STORE_VERSION = 1
CKPT_MAGIC = b"EMOC"
CKPT_VERSION = 1

_U32 = struct.Struct("<I")


@dataclass
class FeatureStore:
    """Per-sample multimodal feature tensors plus the manifest binding them.

    acoustic is (n, k, d_a): k pooled hidden-layer vectors per sample, one per
    entry of layer_ids. visual is (n, d_v), lexical is (n, d_l). labels holds
    the class ordinal per sample, -1 where the manifest has no label.
    """

    sample_ids: list
    labels: np.ndarray
    splits: list
    acoustic: np.ndarray
    visual: np.ndarray
    lexical: np.ndarray
    layer_ids: tuple

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    @property
    def k(self) -> int:
        return self.acoustic.shape[1]

    @property
    def d_a(self) -> int:
        return self.acoustic.shape[2]

    @property
    def d_v(self) -> int:
        return self.visual.shape[1]

    @property
    def d_l(self) -> int:
        return self.lexical.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ArgumentError(f"unknown split {split!r}, expected one of {SPLITS}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def validate(self):
        n = self.n
        if self.labels.shape != (n,):
            raise ArgumentError(f"labels shape {self.labels.shape} does not match {n} samples")
        if len(self.splits) != n:
            raise ArgumentError(f"{len(self.splits)} split tags for {n} samples")
        if self.acoustic.ndim != 3 or self.acoustic.shape[0] != n:
            raise ArgumentError(f"acoustic block shape {self.acoustic.shape} invalid for n={n}")
        if self.acoustic.shape[1] != len(self.layer_ids):
            raise ArgumentError(
                f"acoustic block has {self.acoustic.shape[1]} layers "
                f"but {len(self.layer_ids)} layer ids"
            )
        for name in ("visual", "lexical"):
            block = getattr(self, name)
            if block.ndim != 2 or block.shape[0] != n:
                raise ArgumentError(f"{name} block shape {block.shape} invalid for n={n}")
        for name in ("acoustic", "visual", "lexical"):
            if getattr(self, name).dtype != np.float32:
                raise ArgumentError(f"{name} block must be float32")
        for i, (sid, split) in enumerate(zip(self.sample_ids, self.splits)):
            if "\t" in sid or "\n" in sid or not sid:
                raise ArgumentError(f"sample id {sid!r} at row {i} is not manifest-safe")
            if split not in SPLITS:
                raise ArgumentError(f"sample {sid}: unknown split {split!r}")
            lbl = int(self.labels[i])
            if split == "labeled" and not 0 <= lbl < N_CLASSES:
                raise ArgumentError(f"labeled sample {sid} has invalid class {lbl}")
            if split == "unlabeled" and lbl != -1:
                raise ArgumentError(f"unlabeled sample {sid} carries a label")
            if split == "test" and not (lbl == -1 or 0 <= lbl < N_CLASSES):
                raise ArgumentError(f"test sample {sid} has invalid class {lbl}")


def _manifest_bytes(store: FeatureStore) -> bytes:
    rows = []
    for sid, lbl, split in zip(store.sample_ids, store.labels, store.splits):
        name = LABEL_NAMES[int(lbl)] if lbl >= 0 else "-"
        rows.append(f"{sid}\t{name}\t{split}\n")
    return "".join(rows).encode("utf-8")


def write_store(store: FeatureStore, path):
    store.validate()
    manifest = _manifest_bytes(store)
    header = [
        STORE_MAGIC,
        _U32.pack(STORE_VERSION),
        _U32.pack(store.n),
        _U32.pack(store.k),
        _U32.pack(store.d_a),
        _U32.pack(store.d_v),
        _U32.pack(store.d_l),
    ]
    header += [_U32.pack(int(lid)) for lid in store.layer_ids]
    header.append(_U32.pack(len(manifest)))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(manifest)
        fh.write(np.ascontiguousarray(store.acoustic, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(store.visual, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(store.lexical, dtype="<f4").tobytes())


class _Reader:
    """Sequential parser that reports the exact byte offset on truncation."""

    def __init__(self, buf: bytes, path, error_cls=CorruptionError):
        self.buf = buf
        self.off = 0
        self.path = path
        self.error_cls = error_cls

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.off + nbytes
        if end > len(self.buf):
            raise self.error_cls(
                f"{self.path}: truncated while reading {what} at byte offset {self.off} "
                f"(need {nbytes} bytes, {len(self.buf) - self.off} remain)"
            )
        chunk = self.buf[self.off : end]
        self.off = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def floats(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def read_store(path) -> FeatureStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
    version = r.u32("format version")
    if version != STORE_VERSION:
        raise FormatError(
            f"{path}: store format version {version} not supported, "
            f"this build reads version {STORE_VERSION}"
        )
    n = r.u32("sample count")
    k = r.u32("layer count")
    d_a = r.u32("acoustic dim")
    d_v = r.u32("visual dim")
    d_l = r.u32("lexical dim")
    layer_ids = tuple(r.u32(f"layer id {i}") for i in range(k))
    manifest_len = r.u32("manifest length")
    manifest = r.take(manifest_len, "manifest").decode("utf-8")

    sample_ids, labels, splits = [], [], []
    rows = manifest.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    for lineno, row in enumerate(rows):
        parts = row.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}: manifest row {lineno} has {len(parts)} fields, expected 3")
        sid, name, split = parts
        if name == "-":
            labels.append(-1)
        elif name in NAME_TO_ORDINAL:
            labels.append(NAME_TO_ORDINAL[name])
        else:
            raise FormatError(f"{path}: manifest row {lineno} has unknown label {name!r}")
        if split not in SPLITS:
            raise FormatError(f"{path}: manifest row {lineno} has unknown split {split!r}")
        sample_ids.append(sid)
        splits.append(split)
    if len(sample_ids) != n:
        raise FormatError(f"{path}: manifest has {len(sample_ids)} rows, header says {n}")

    acoustic = r.floats(n * k * d_a, "<f4", "acoustic block").reshape(n, k, d_a)
    visual = r.floats(n * d_v, "<f4", "visual block").reshape(n, d_v)
    lexical = r.floats(n * d_l, "<f4", "lexical block").reshape(n, d_l)
    if r.off != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.off} trailing bytes after lexical block")

    store = FeatureStore(
        sample_ids=sample_ids,
        labels=np.array(labels, dtype=np.int64),
        splits=splits,
        acoustic=acoustic,
        visual=visual,
        lexical=lexical,
        layer_ids=layer_ids,
    )
    store.validate()
    return store


def save_checkpoint(path, kind: str, dims: dict, tensors: dict, extras: dict | None = None):
    """Write named float64 parameter tensors under a self-describing header."""
    order = list(tensors.keys())
    header = {
        "kind": kind,
        "dims": {k: int(v) for k, v in dims.items()},
        "tensors": [[name, list(tensors[name].shape)] for name in order],
        "extras": extras or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_U32.pack(CKPT_VERSION))
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)
        for name in order:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    kind: str
    dims: dict
    tensors: dict
    extras: dict = field(default_factory=dict)


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path, error_cls=CheckpointError)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    version = r.u32("checkpoint version")
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} not supported, "
            f"this build reads version {CKPT_VERSION}"
        )
    header_len = r.u32("header length")
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {exc}") from exc
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint holds a {kind!r} model, this stage expects {expect_kind!r}"
        )
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = r.floats(count, "<f8", f"tensor {name!r}").reshape(shape)
    if r.off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.off} trailing bytes after tensors")
    return Checkpoint(kind=kind, dims=header["dims"], tensors=tensors, extras=header.get("extras", {}))
