"""
On-disk formats: headerless CSV observation sets, the ``BDCK`` binary
tensor container, checkpoints, and flat dotted-key JSON run configs.

Tensor container (all integers little-endian ``u32``)::

    b"BDCK" | version=1 | rank | dims[rank] | dtype (1=f32, 2=f64) | payload

The payload is the row-major array in little-endian byte order.

Checkpoint::

    b"BDCP" | version=1 | n_sections
    n_sections x ( name_len | name (utf-8) | blob_len (u64) | tensor container )
    config_len (u64) | config JSON (utf-8)
    sha256 digest (32 bytes) of everything above
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError

TENSOR_MAGIC = b"BDCK"
CHECKPOINT_MAGIC = b"BDCP"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


# --------------------------------------------------------------------------
# CSV


def read_csv_matrix(path) -> np.ndarray:
    """Headerless numeric CSV as an ``(rows, cols)`` float64 array.

    Errors name the offending line (1-based).
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise InvalidInputError(f"{path} line {lineno}: non-numeric field in {row!r}") from None
            if not all(np.isfinite(vals)):
                raise InvalidInputError(f"{path} line {lineno}: non-finite value")
            if rows and len(vals) != len(rows[0]):
                raise InvalidInputError(
                    f"{path} line {lineno}: expected {len(rows[0])} fields, got {len(vals)}"
                )
            rows.append(vals)
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def write_csv_matrix(a, fh):
    a = np.atleast_2d(np.asarray(a))
    for row in a:
        fh.write(",".join(repr(float(v)) for v in row) + "\n")


# --------------------------------------------------------------------------
# Tensor container


def encode_tensor(a) -> bytes:
    a = np.asarray(a)
    if a.dtype not in _TAGS:
        a = a.astype(np.float64)
    tag = _TAGS[a.dtype]
    header = TENSOR_MAGIC + struct.pack(f"<II{a.ndim}II", VERSION, a.ndim, *a.shape, tag)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != TENSOR_MAGIC:
        raise InvalidInputError("not a tensor container (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise InvalidInputError(f"unsupported tensor container version {version}")
    off = 12
    if len(buf) < off + 4 * rank + 4:
        raise InvalidInputError("truncated tensor container header")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<I", buf, off)
    off += 4
    if tag not in _DTYPES:
        raise InvalidInputError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise InvalidInputError(
            f"tensor payload has {len(buf) - off} bytes, expected {expected}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, a):
    Path(path).write_bytes(encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def load_matrix(path) -> np.ndarray:
    """Observation matrix from a ``.csv`` file or a tensor container."""
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{path}: no such file")
    head = p.read_bytes()[:4]
    if head == TENSOR_MAGIC:
        a = load_tensor(p).astype(np.float64)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2:
            raise InvalidInputError(f"{path}: expected a rank-1 or rank-2 tensor, got rank {a.ndim}")
        return a
    return read_csv_matrix(p)


# --------------------------------------------------------------------------
# Checkpoints


def encode_checkpoint(sections: dict, config: dict) -> bytes:
    body = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, arr in sections.items():
        raw = name.encode()
        blob = encode_tensor(np.asarray(arr, dtype=np.float64))
        body += struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(blob)) + blob
    cfg = json.dumps(config, sort_keys=True).encode()
    body += struct.pack("<Q", len(cfg)) + cfg
    return bytes(body) + hashlib.sha256(body).digest()


def decode_checkpoint(buf: bytes):
    """Return ``(sections, config, checksum_hex)``."""
    if len(buf) < 44 or buf[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError("not a checkpoint (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise InvalidInputError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    off = 12
    sections = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + n].decode()
            off += 4 + n
            (size,) = struct.unpack_from("<Q", body, off)
            off += 8
            sections[name] = decode_tensor(body[off:off + size])
            off += size
        (size,) = struct.unpack_from("<Q", body, off)
        config = json.loads(body[off + 8:off + 8 + size].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"corrupt checkpoint: {exc}") from None
    return sections, config, digest.hex()


def model_sections(model) -> dict:
    out = {"projection.weight": model.projection.weight, "tau": np.array([model.tau])}
    if model.projection.bias is not None:
        out["projection.bias"] = model.projection.bias
    if model.classifier is not None:
        out["classifier.weights"] = model.classifier.weights
        out["classifier.tau"] = np.array([model.classifier.tau])
    return out


def save_checkpoint(path, model, config: dict) -> str:
    """Write ``model`` with a config echo; returns the sha256 hex digest."""
    data = encode_checkpoint(model_sections(model), config)
    Path(path).write_bytes(data)
    return data[-32:].hex()


def load_checkpoint(path):
    """Return ``(model, config, checksum_hex)``."""
    from .engine import ModelState
    from .heads import ClassifierWeights
    from .layer import PoolingConfig, Projection

    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{path}: no such file")
    sections, config, digest = decode_checkpoint(p.read_bytes())
    try:
        proj = Projection(sections["projection.weight"], sections.get("projection.bias"))
        pooling = PoolingConfig(config.get("pooling.axis", "channels"), proj.out_dim)
        model = ModelState(proj, pooling, float(sections["tau"][0]))
    except KeyError as exc:
        raise InvalidInputError(f"checkpoint lacks section {exc}") from None
    if "classifier.weights" in sections:
        model.classifier = ClassifierWeights(
            sections["classifier.weights"], float(sections["classifier.tau"][0])
        )
    return model, config, digest


# --------------------------------------------------------------------------
# Run configuration

DEFAULTS = {
    "pipeline": "meta",
    "head": "bdc",
    "similarity": "inner_product",
    "prototype_mode": "avg_bdc",
    "pooling.axis": "channels",
    "pooling.dim": 16,
    "pooling.bias": True,
    "task.n_way": 5,
    "task.k_shot": 1,
    "task.n_query": 16,
    "task.n_episodes": 2000,
    "seed.data": 0,
    "seed.init": 0,
    "seed.train": 0,
    "seed.eval": 0,
    "data.source": "synthetic",
    "data.n_classes": 30,
    "data.items_per_class": 30,
    "data.h": 8,
    "data.w": 8,
    "data.channels": 16,
    "data.signal": "dependency_structure",
    "data.noise": 0.1,
    "data.signal_scale": 1.0,
    "data.split": [15, 5, 10],
    "train.lr": 1e-5,
    "train.milestones": [],
    "train.gamma": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.epochs": 2,
    "train.episodes_per_epoch": 100,
    "train.batch_size": 64,
    "train.val_episodes": 200,
    "train.tau_init": 1.0,
    "train.pretrain_stl_epochs": 0,
    "train.stl_lr": 1e-3,
    "logreg.lam": 1.0,
    "simstudy.n": 1000,
    "simstudy.noise": 0.05,
    "simstudy.seed": 0,
    "simstudy.slopes": [-4.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0],
}

CHOICES = {
    "pipeline": ("meta", "stl"),
    "head": ("bdc", "protonet", "covnet", "adm"),
    "similarity": ("inner_product", "neg_sq_euclidean", "cosine"),
    "prototype_mode": ("avg_bdc", "avg_features", "concat_features"),
    "pooling.axis": ("channels", "spatial"),
    "data.signal": ("mean_shift", "dependency_structure", "both"),
}

_POSITIVE = {
    "pooling.dim", "task.n_way", "task.k_shot", "task.n_query", "task.n_episodes",
    "data.n_classes", "data.items_per_class", "data.h", "data.w", "data.channels",
    "train.batch_size", "train.val_episodes", "simstudy.n",
}
_NON_NEGATIVE = {
    "train.lr", "train.momentum", "train.weight_decay", "train.epochs",
    "train.episodes_per_epoch", "train.pretrain_stl_epochs", "train.stl_lr",
    "data.noise", "data.signal_scale", "simstudy.noise",
}


def _coerce(key, value, problems):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, list):
                raise ValueError
            return [float(v) if isinstance(v, float) else v for v in value]
        return str(value)
    except (ValueError, TypeError, json.JSONDecodeError):
        problems.append(f"{key}: cannot interpret {value!r} as {type(default).__name__}")
        return default


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_config(base: dict | None = None, overrides=()) -> dict:
    """Merge defaults, a loaded JSON dict and ``key=value`` overrides, then
    validate. Every problem found is reported in one :class:`ConfigError`."""
    problems = []
    cfg = dict(DEFAULTS)
    merged = dict(base or {})
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        merged[key] = value
    for key, value in merged.items():
        if key not in DEFAULTS:
            problems.append(f"{key}: unknown configuration key")
            continue
        cfg[key] = _coerce(key, value, problems)
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            problems.append(f"{key}: {cfg[key]!r} not in {list(allowed)}")
    for key in _POSITIVE:
        if isinstance(cfg[key], (int, float)) and cfg[key] < 1:
            problems.append(f"{key}: must be positive")
    for key in _NON_NEGATIVE:
        if isinstance(cfg[key], (int, float)) and cfg[key] < 0:
            problems.append(f"{key}: must be non-negative")
    split = cfg["data.split"]
    if len(split) != 3 or any((not isinstance(s, int)) or s < 0 for s in split):
        problems.append("data.split: expected three non-negative integers [train, val, test]")
    elif cfg["data.source"] == "synthetic" and sum(split) > cfg["data.n_classes"]:
        problems.append("data.split: uses more classes than data.n_classes")
    if cfg["pipeline"] == "stl" and cfg["head"] != "bdc":
        problems.append("head: the stl pipeline only uses the bdc head")
    if cfg["task.n_way"] < 2:
        problems.append("task.n_way: at least two classes are needed")
    if problems:
        raise ConfigError(problems)
    return cfg


def read_config_file(path) -> dict:
    try:
        base = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(base, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return base


def load_config(path=None, overrides=()) -> dict:
    base = read_config_file(path) if path is not None else {}
    return build_config(base, overrides)
