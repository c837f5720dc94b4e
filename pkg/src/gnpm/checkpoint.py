"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"GNPMCKPT"  u32 version
    repeated records:
        u64 record_bytes            (everything after this field)
        u32 name_len, name (utf-8)
        2 bytes dtype tag           f4 | f8 | i8 | u1
        u32 rank, rank x u64 dims
        payload                     C-order, little-endian

JSON blobs (config, metadata) are stored as ``u1`` byte arrays. Unknown
records are skipped with a warning so that newer writers stay readable.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, to_dict, train_config_from_dict

MAGIC = b"GNPMCKPT"
VERSION = 1

_TAGS = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}
_KNOWN_PREFIXES = ("config", "meta", "rng", "log", "param/", "adam/m/", "adam/v/", "adam/step")


class CheckpointError(ValueError):
    """A checkpoint file that cannot be read; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, msg: str):
        self.path, self.offset = str(path), offset
        super().__init__(f"{path}@{offset}: {msg}")


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _TAGS.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def _encode(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    tag = _tag(arr)
    raw = name.encode("utf-8")
    body = io.BytesIO()
    body.write(struct.pack("<I", len(raw)))
    body.write(raw)
    body.write(tag.encode("ascii"))
    body.write(struct.pack("<I", arr.ndim))
    body.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    body.write(arr.astype(_TAGS[tag], copy=False).tobytes())
    data = body.getvalue()
    return struct.pack("<Q", len(data)) + data


def _json_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def write_records(path, records: dict[str, np.ndarray]) -> None:
    """Write named arrays; the file is replaced atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in records.items():
            fh.write(_encode(name, np.asarray(arr)))
    tmp.replace(path)


def read_records(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into ``{name: array}``; raises :class:`CheckpointError` on damage."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise CheckpointError(path, 0, "not a GNPM checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(path, 8, f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise CheckpointError(path, pos, "truncated record header")
        (size,) = struct.unpack_from("<Q", buf, pos)
        start, end = pos + 8, pos + 8 + size
        if end > len(buf):
            raise CheckpointError(path, pos, f"truncated record ({size} bytes declared, {len(buf) - start} present)")
        try:
            (nlen,) = struct.unpack_from("<I", buf, start)
            p = start + 4
            name = buf[p : p + nlen].decode("utf-8")
            p += nlen
            tag = buf[p : p + 2].decode("ascii")
            p += 2
            (rank,) = struct.unpack_from("<I", buf, p)
            p += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, p)
            p += 8 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(path, pos, f"malformed record header: {exc}") from None
        if tag not in _TAGS:
            raise CheckpointError(path, pos, f"record {name!r}: unknown dtype tag {tag!r}")
        dt = _TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        if p + count * dt.itemsize != end:
            raise CheckpointError(path, pos, f"record {name!r}: payload size does not match shape {dims}")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=p).reshape(dims).astype(dt.newbyteorder("="))
        if not name.startswith(_KNOWN_PREFIXES):
            warnings.warn(f"checkpoint {path}: skipping unknown record {name!r}", stacklevel=2)
        else:
            out[name] = arr
        pos = end
    for required in ("config", "meta"):
        if required not in out:
            raise CheckpointError(path, len(buf), f"missing required record {required!r}")
    return out


# -- trainer-level checkpoint ----------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    log: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "supervised" if self.config.supervised else "cycle"


def _log_array(log: list[dict]) -> np.ndarray:
    from .losses import LOG_COLUMNS

    if not log:
        return np.zeros((0, len(LOG_COLUMNS)))
    return np.array([[float(r[c]) for c in LOG_COLUMNS] for r in log], dtype=np.float64)


def _log_rows(arr: np.ndarray) -> list[dict]:
    from .losses import LOG_COLUMNS

    rows = []
    for vals in arr:
        row = dict(zip(LOG_COLUMNS, (float(v) for v in vals)))
        row["step"], row["epoch"] = int(row["step"]), int(row["epoch"])
        rows.append(row)
    return rows


def save_checkpoint(path, trainer) -> None:
    """Serialize weights, latent codes, Adam moments, epoch counters and the loss log."""
    cfg = trainer.config
    meta = {
        "kind": "supervised" if cfg.supervised else "cycle",
        "epoch": trainer.epoch,
        "step": trainer.step,
        "train_frames": [int(f) for f in trainer.frame_ids],
        "shape_ids": [int(c) for c in trainer.shape_ids],
    }
    records: dict[str, np.ndarray] = {
        "config": _json_array(to_dict(cfg)),
        "meta": _json_array(meta),
        "rng": _json_array({"seed": cfg.seed, "epoch": trainer.epoch, "scheme": "default_rng([seed, epoch])"}),
    }
    state = trainer.optimizer.state
    for name, p in trainer.parameters().items():
        records[f"param/{name}"] = p.values
        if name in state.m:
            records[f"adam/m/{name}"] = state.m[name]
            records[f"adam/v/{name}"] = state.v[name]
    records["adam/step"] = np.array([state.step], dtype=np.int64)
    records["log"] = _log_array(trainer.log)
    write_records(path, records)


def load_checkpoint(path) -> Checkpoint:
    rec = read_records(path)
    try:
        cfg = train_config_from_dict(json.loads(rec["config"].tobytes().decode("utf-8")))
        meta = json.loads(rec["meta"].tobytes().decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(path, 0, f"bad config/meta record: {exc}") from None
    params = {k[len("param/") :]: v for k, v in rec.items() if k.startswith("param/")}
    m = {k[len("adam/m/") :]: v for k, v in rec.items() if k.startswith("adam/m/")}
    v = {k[len("adam/v/") :]: v for k, v in rec.items() if k.startswith("adam/v/")}
    step = int(rec["adam/step"][0]) if "adam/step" in rec else 0
    log = _log_rows(rec["log"]) if "log" in rec else []
    return Checkpoint(cfg, int(meta["epoch"]), int(meta["step"]), params, m, v, step, log, meta)


def restore_trainer(ckpt: Checkpoint, dataset, verbose: bool = False):
    """Rebuild a :class:`gnpm.optim.Trainer` in exactly the saved state."""
    from .optim import Trainer

    trainer = Trainer(dataset, ckpt.config, verbose)
    if [int(f) for f in trainer.frame_ids] != ckpt.meta.get("train_frames"):
        raise ValueError("checkpoint was trained on different frames than this dataset provides")
    load_parameters(trainer.parameters(), ckpt.params)
    state = trainer.optimizer.state
    state.m = {k: a.copy() for k, a in ckpt.adam_m.items()}
    state.v = {k: a.copy() for k, a in ckpt.adam_v.items()}
    state.step = ckpt.adam_step
    trainer.epoch, trainer.step = ckpt.epoch, ckpt.step
    trainer.log = list(ckpt.log)
    return trainer


def load_parameters(params: dict, arrays: dict[str, np.ndarray]) -> None:
    """Copy saved arrays into live tensors, checking names, shapes and dtypes."""
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing}")
    for name, t in params.items():
        arr = arrays[name]
        if arr.shape != t.values.shape or arr.dtype != t.values.dtype:
            raise ValueError(f"parameter {name}: checkpoint has {arr.dtype}{arr.shape}, model expects {t.values.dtype}{t.values.shape}")
        t.values = arr.copy()


def build_model(ckpt: Checkpoint):
    """Model and latent bank with the saved weights, independent of any dataset."""
    from .model import GnpmModel, LatentBank, SupervisedGnpm

    cfg = ckpt.config
    rng = np.random.default_rng(cfg.seed)
    cls = SupervisedGnpm if cfg.supervised else GnpmModel
    model = cls(cfg.model, rng, cfg.dtype)
    n_shapes = ckpt.params["bank.shape"].shape[0]
    n_poses = ckpt.params["bank.pose"].shape[0]
    bank = LatentBank(n_shapes, n_poses, cfg.model.shape_dim, cfg.model.pose_dim, rng, cfg.code_init_std, cfg.dtype)
    load_parameters(model.parameters(), ckpt.params)
    load_parameters(bank.parameters(), ckpt.params)
    return model, bank
