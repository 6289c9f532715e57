"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"HSDFCKPT"  u32 version  u32 section_count
    per section: u16 name_len, name (utf-8), u8 kind, u64 payload_len, payload

Section kinds:

* 0 text: utf-8 bytes (config text, config hash, trainer state JSON)
* 1 tensor: u8 dtype code, u8 ndim, u32 dims..., raw little-endian data
* 2 hash grid: u32 level_count, u32 channels, u32 resolution per level,
  u32 table rows per level, then every table in level order as
  little-endian float32
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HSDFCKPT"
VERSION = 1
TEXT, TENSOR, GRID = 0, 1, 2
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    version: int
    sections: dict  # name -> value (str, tensor, or grid dict)

    def text(self, name: str) -> str:
        return self.sections[name]

    @property
    def config_text(self) -> str:
        return self.sections["config"]

    @property
    def trainer_state(self) -> dict:
        return json.loads(self.sections["trainer"])

    def config(self):
        from .config import RunConfig
        return RunConfig.from_text(self.config_text)


# --- encoding ----------------------------------------------------------------------

def _tensor_payload(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _CODES:
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    code = _CODES[t.dtype]
    head = struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape)
    return head + t.numpy().astype(_DTYPES[code]).tobytes()


def _grid_payload(grid) -> bytes:
    res = grid._res_np.tolist()
    rows = list(grid.sizes)
    head = struct.pack("<II", len(res), grid.tables.shape[1])
    head += struct.pack(f"<{len(res)}I", *res) + struct.pack(f"<{len(rows)}I", *rows)
    return head + grid.tables.detach().cpu().numpy().astype("<f4").tobytes()


def write_sections(path, sections: list) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, kind, payload in sections:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)))
        buf.write(payload)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def save_checkpoint(path, trainer) -> None:
    from .training import schedule_at
    cfg = trainer.config
    state = {"iteration": trainer.iteration, "n_images": len(trainer.train_ids),
             "consecutive_skips": trainer.optimizer.consecutive_skips,
             "total_skips": trainer.optimizer.total_skips,
             "schedule": asdict(schedule_at(trainer.iteration, trainer.schedule))}
    sections = [("config", TEXT, cfg.to_text().encode()),
                ("config_hash", TEXT, cfg.hash().encode()),
                ("trainer", TEXT, json.dumps(state).encode()),
                ("grid", GRID, _grid_payload(trainer.field.grid))]
    for name, p in trainer.field.named_parameters():
        if name != "grid.tables":
            sections.append((f"param/{name}", TENSOR, _tensor_payload(p)))
    for key, t in trainer.optimizer.state_tensors().items():
        sections.append((f"optim/{key}", TENSOR, _tensor_payload(t)))
    write_sections(path, sections)


def save_field(path, field, config) -> None:
    """Parameters only (no optimizer state), e.g. for analytic test fields."""
    state = {"iteration": 0, "n_images": field.config.n_images, "consecutive_skips": 0,
             "total_skips": 0}
    sections = [("config", TEXT, config.to_text().encode()),
                ("config_hash", TEXT, config.hash().encode()),
                ("trainer", TEXT, json.dumps(state).encode()),
                ("grid", GRID, _grid_payload(field.grid))]
    for name, p in field.named_parameters():
        if name != "grid.tables":
            sections.append((f"param/{name}", TENSOR, _tensor_payload(p)))
    write_sections(path, sections)


# --- decoding ----------------------------------------------------------------------

def _read_tensor(payload: bytes) -> torch.Tensor:
    code, ndim = struct.unpack_from("<BB", payload, 0)
    shape = struct.unpack_from(f"<{ndim}I", payload, 2)
    data = np.frombuffer(payload, dtype=_DTYPES[code], offset=2 + 4 * ndim)
    return torch.from_numpy(data.astype(_DTYPES[code][1:]).reshape(shape).copy())


def _read_grid(payload: bytes) -> dict:
    levels, channels = struct.unpack_from("<II", payload, 0)
    res = struct.unpack_from(f"<{levels}I", payload, 8)
    rows = struct.unpack_from(f"<{levels}I", payload, 8 + 4 * levels)
    data = np.frombuffer(payload, dtype="<f4", offset=8 + 8 * levels)
    if data.size != sum(rows) * channels:
        raise CheckpointError("grid section size does not match its header")
    return {"resolutions": list(res), "rows": list(rows), "channels": channels,
            "tables": torch.from_numpy(data.astype(np.float32).reshape(-1, channels).copy())}


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, sections = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode()
            kind, size = struct.unpack_from("<BQ", data, pos + 2 + n)
            pos += 2 + n + 9
            payload = data[pos:pos + size]
            if len(payload) != size:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            pos += size
            if kind == TEXT:
                sections[name] = payload.decode()
            elif kind == TENSOR:
                sections[name] = _read_tensor(payload)
            elif kind == GRID:
                sections[name] = _read_grid(payload)
            else:
                raise CheckpointError(f"{path}: unknown section kind {kind}")
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from None
    return Checkpoint(version, sections)


def _load_params(field, ckpt: Checkpoint) -> None:
    grid = ckpt.sections["grid"]
    if list(grid["resolutions"]) != field.grid._res_np.tolist() \
            or tuple(grid["tables"].shape) != tuple(field.grid.tables.shape):
        raise CheckpointError("grid layout does not match the configured encoding")
    with torch.no_grad():
        field.grid.tables.copy_(grid["tables"].to(field.grid.tables.dtype))
        for name, p in field.named_parameters():
            if name == "grid.tables":
                continue
            src = ckpt.sections.get(f"param/{name}")
            if src is None or src.shape != p.shape:
                raise CheckpointError(f"missing or mismatched parameter {name}")
            p.copy_(src.to(p.dtype))


def field_from_checkpoint(ckpt: Checkpoint):
    from .field import NeuralField
    cfg = ckpt.config()
    field = NeuralField(cfg.field_config(ckpt.trainer_state["n_images"]), cfg.seed)
    _load_params(field, ckpt)
    return field, cfg


def restore_trainer(trainer, ckpt: Checkpoint) -> None:
    if ckpt.config().resume_key() != trainer.config.resume_key():
        raise CheckpointError("checkpoint was written with a different configuration")
    _load_params(trainer.field, ckpt)
    prefix = "optim/"
    trainer.optimizer.load_state_tensors(
        {k[len(prefix):]: v for k, v in ckpt.sections.items() if k.startswith(prefix)})
    st = ckpt.trainer_state
    trainer.iteration = st["iteration"]
    trainer.optimizer.consecutive_skips = st["consecutive_skips"]
    trainer.optimizer.total_skips = st["total_skips"]
