"""On-disk formats: model checkpoints, embedding indices, run configs.

All binary fields are little-endian.  Checkpoint layout::

    b"RDRC" | u16 version | u32 entry count
    per entry: u16 name length | name (UTF-8) | u8 rank | u32 extent * rank
               | f32 values (row-major)
    u32 config length | config text (UTF-8 key=value lines)

Index layout::

    b"RDIX" | u16 version | u32 dim | u32 count
    per row: i32 identity | u16 camera | u8 role | f32 value * dim
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, StorageError, TruncationError, ValidationError, VersionMismatchError
from .evalrank import EmbeddingIndex
from .model import BackboneConfig, EmbeddingModel
from .pnm import atomic_write_bytes

CHECKPOINT_MAGIC = b"RDRC"
CHECKPOINT_VERSION = 1
INDEX_MAGIC = b"RDIX"
INDEX_VERSION = 1
INDEX_NORM_TOL = 1e-5
PHASES = ("init", "pretrain", "triplet")


# ---------------------------------------------------------------- key=value text


def format_kv(pairs) -> str:
    lines = []
    for k, v in pairs.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValidationError(f"config entry {k!r} cannot be written as key=value")
        lines.append(f"{k}={v}")
    return "".join(line + "\n" for line in lines)


def parse_kv(text: str, source="<config>") -> dict:
    """``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source} line {n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValidationError(f"{source} line {n}: empty key")
        if key in out:
            raise ValidationError(f"{source} line {n}: duplicate key {key!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------- reader


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncationError(f"{self.path}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_file(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def _header(r: _Reader, magic, version, kind):
    if len(r.data) < 4 and magic.startswith(r.data):
        r.take(4, "magic")
    got = r.take(4, "magic") if len(r.data) >= 4 else r.data
    if got != magic:
        raise BadMagicError(f"{r.path}: bad magic {got!r}, expected {magic!r} ({kind})")
    (ver,) = r.unpack("<H", "version")
    if ver != version:
        raise VersionMismatchError(f"{r.path}: {kind} version {ver} is not supported (expected {version})")


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray, insertion order kept
    config: dict = field(default_factory=dict)  # str -> str
    version: int = CHECKPOINT_VERSION

    @property
    def seed(self):
        return int(self.config["seed"]) if "seed" in self.config else None

    @property
    def phase(self):
        return self.config.get("phase")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise ValidationError(f"tensor {name!r} must be float32, got {a.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValidationError(f"tensor {name!r} name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    text = format_kv(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    _header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of entry {i}")
        name = r.take(nlen, f"name of entry {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of tensor {name!r}")
        shape = r.unpack(f"<{rank}I", f"extents of tensor {name!r}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"values of tensor {name!r}")
        if name in tensors:
            raise ValidationError(f"{path}: tensor {name!r} appears twice")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    (clen,) = r.unpack("<I", "config length")
    config = parse_kv(r.take(clen, "config block").decode("utf-8"), f"{path} config")
    if r.pos != len(data):
        raise ValidationError(f"{path}: {len(data) - r.pos} trailing bytes after config block")
    return Checkpoint(tensors, config)


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(_read_file(path), path)


def model_checkpoint(model: EmbeddingModel, phase, seed, extra=None) -> Checkpoint:
    if phase not in PHASES:
        raise ValidationError(f"phase must be one of {PHASES}")
    config = {f"backbone.{k}": v for k, v in model.config.to_dict().items()}
    config.update({"phase": phase, "seed": str(int(seed))})
    config.update({k: str(v) for k, v in (extra or {}).items()})
    tensors = {name: t.data.astype(np.float32) for name, t in model.named_params().items()}
    return Checkpoint(tensors, config)


def model_from_checkpoint(ckpt: Checkpoint) -> EmbeddingModel:
    prefix = "backbone."
    cfg = BackboneConfig.from_dict({k[len(prefix):]: v for k, v in ckpt.config.items() if k.startswith(prefix)})
    model = EmbeddingModel.from_tensors(cfg, ckpt.tensors)
    unknown = set(ckpt.tensors) - set(model.named_params())
    if unknown:
        raise ValidationError(f"checkpoint has unexpected tensors {sorted(unknown)}")
    return model


def save_model(path, model, phase, seed, extra=None):
    save_checkpoint(path, model_checkpoint(model, phase, seed, extra))


def load_model(path) -> EmbeddingModel:
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------- indices

_ROW = np.dtype([("identity", "<i4"), ("camera", "<u2"), ("role", "u1")])


def encode_index(index: EmbeddingIndex) -> bytes:
    if np.any(index.cameras < -1) or np.any(index.cameras >= 0xFFFF):
        raise ValidationError("index cameras must lie in [-1, 65534]")
    meta = np.zeros(index.count, _ROW)
    meta["identity"] = index.identities
    # distractor camera -1 is stored as 0xFFFF
    meta["camera"] = index.cameras & 0xFFFF
    meta["role"] = index.roles
    rows = np.zeros(index.count, np.dtype([("meta", _ROW), ("v", "<f4", (index.dim,))]))
    rows["meta"] = meta
    rows["v"] = index.vectors
    return INDEX_MAGIC + struct.pack("<HII", INDEX_VERSION, index.dim, index.count) + rows.tobytes()


def decode_index(data: bytes, path="<bytes>", check_norm=True) -> EmbeddingIndex:
    r = _Reader(data, path)
    _header(r, INDEX_MAGIC, INDEX_VERSION, "index")
    dim, count = r.unpack("<II", "dim and count")
    row = np.dtype([("meta", _ROW), ("v", "<f4", (dim,))])
    body = r.take(row.itemsize * count, f"{count} rows of dim {dim}")
    if r.pos != len(data):
        raise ValidationError(f"{path}: {len(data) - r.pos} trailing bytes after {count} rows")
    rows = np.frombuffer(body, row)
    cams = rows["meta"]["camera"].astype(np.int64)
    cams[cams == 0xFFFF] = -1
    index = EmbeddingIndex(rows["v"].astype(np.float32), rows["meta"]["identity"].astype(np.int64), cams,
                           rows["meta"]["role"].astype(np.int64))
    if check_norm:
        index.check_unit_norm(INDEX_NORM_TOL)
    return index


def save_index(path, index: EmbeddingIndex):
    atomic_write_bytes(path, encode_index(index))


def load_index(path, check_norm=True) -> EmbeddingIndex:
    return decode_index(_read_file(path), path, check_norm)
