"""Run-level operations behind the command line: generate, train, extract,
render, evaluate and ablate."""
from __future__ import annotations

import contextlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import field_from_checkpoint, load_checkpoint
from .config import RunConfig, scaled_schedule
from .mesh import TriangleMesh, export_mesh, field_sdf_fn, marching_cubes, sample_surface
from .metrics import chamfer, f1_score, psnr
from .renderer import render_image
from .synthetic import load_dataset, make_dataset, write_png
from .training import ScheduleConfig, Trainer, schedule_at

REPORT_VERSION = 1
MAP_MAGIC = b"HSDFMAP1"


class RunLocked(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(run_dir):
    """Exclusive lock file so two processes never write one run directory."""
    path = Path(run_dir) / "LOCK"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{run_dir} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# --- generate / train --------------------------------------------------------------

def generate(cfg: RunConfig, out_dir) -> Path:
    return make_dataset(cfg.scene, out_dir, n_views=cfg.n_views, image_size=cfg.image_size,
                        rig=cfg.rig, seed=cfg.seed, n_test=cfg.n_test_views,
                        exposure=cfg.exposure, n_points=cfg.gt_points)


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.hsdf"))
    return ckpts[-1] if ckpts else None


def train(cfg: RunConfig, data_dir, run_dir, resume=None, callback=None) -> Trainer:
    """Train into ``run_dir``; ``resume`` is a checkpoint path or True for the latest."""
    dataset = load_dataset(data_dir)
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        (run_dir / "config.txt").write_text(cfg.to_text())
        trainer = Trainer(cfg, dataset, run_dir)
        if resume:
            ckpt = latest_checkpoint(run_dir) if resume is True else Path(resume)
            if ckpt is None:
                raise FileNotFoundError(f"no checkpoint to resume in {run_dir}")
            trainer.load(ckpt)
        elif trainer.metrics_path.exists():
            trainer.metrics_path.unlink()
        trainer.train(callback=callback)
    return trainer


# --- loaded models --------------------------------------------------------------------

@dataclass
class LoadedModel:
    field: torch.nn.Module
    config: RunConfig
    iteration: int

    @property
    def state(self):
        return schedule_at(max(self.iteration - 1, 0), ScheduleConfig.from_run(self.config))


def load_model(checkpoint) -> LoadedModel:
    ckpt = load_checkpoint(checkpoint)
    field, cfg = field_from_checkpoint(ckpt)
    return LoadedModel(field, cfg, ckpt.trainer_state["iteration"])


def model_from_trainer(trainer: Trainer) -> LoadedModel:
    return LoadedModel(trainer.field, trainer.config, trainer.iteration)


def extract(model: LoadedModel, resolution: int | None = None) -> TriangleMesh:
    res = resolution or model.config.mc_resolution
    return marching_cubes(field_sdf_fn(model.field, model.state.active_levels), res)


def extract_to_file(checkpoint, out_path, resolution=None, fmt=None) -> TriangleMesh:
    mesh = extract(load_model(checkpoint), resolution)
    export_mesh(mesh, out_path, fmt)
    return mesh


# --- rendering -----------------------------------------------------------------------

def write_map(path, arr: np.ndarray) -> None:
    """Float map: magic, u32 height, width, channels, then little-endian float32."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC + struct.pack("<III", *a.shape))
        fh.write(a.tobytes())


def read_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAP_MAGIC:
        raise ValueError(f"{path}: not a float map")
    h, w, c = struct.unpack_from("<III", data, 8)
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c).copy()


def render_views(model: LoadedModel, dataset, indices) -> list[dict]:
    st = model.state
    return [render_image(dataset.cameras[i], model.field, cfg=model.config.render_config(),
                         eps=st.eps, active_levels=st.active_levels,
                         analytic=not model.config.numerical) for i in indices]


def render_to_dir(checkpoint, data_dir, out_dir, split="test") -> list[Path]:
    model, dataset = load_model(checkpoint), load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = dataset.indices(split)
    written = []
    for i, r in zip(idx, render_views(model, dataset, idx)):
        write_png(out / f"{i:03d}.png", r["rgb"])
        write_map(out / f"{i:03d}_depth.map", r["depth"])
        write_map(out / f"{i:03d}_normal.map", r["normal"])
        written.append(out / f"{i:03d}.png")
    return written


# --- evaluation ----------------------------------------------------------------------

def evaluate(model: LoadedModel, dataset, mesh: TriangleMesh | None = None,
             psnr_views: bool = True) -> dict:
    """Surface and image metrics.  Returns {name: (value, units)}."""
    cfg = model.config
    mesh = extract(model) if mesh is None else mesh
    out = {"vertices": (float(len(mesh.vertices)), "count")}
    if mesh.is_empty:
        out["chamfer"] = (float("inf"), "scene units")
    else:
        pts = sample_surface(mesh, cfg.eval_points, seed=cfg.seed)
        gt = dataset.gt_points
        out["chamfer"] = (chamfer(pts, gt), "scene units")
        p, r, f = f1_score(pts, gt, cfg.f1_tau)
        out["precision"], out["recall"], out["f1"] = (p, "fraction"), (r, "fraction"), (f, "fraction")
    if psnr_views:
        idx = dataset.indices("test")
        vals = [psnr(r["rgb"], dataset.images[i], dataset.masks[i])
                for i, r in zip(idx, render_views(model, dataset, idx))]
        out["psnr_masked"] = (float(np.mean(vals)) if vals else float("nan"), "dB")
    return out


def format_report(metrics: dict, cfg: RunConfig) -> str:
    lines = [f"# hsdf-eval v{REPORT_VERSION}", "metric\tvalue\tunits\tconfig_hash"]
    lines += [f"{k}\t{v!r}\t{u}\t{cfg.hash()}" for k, (v, u) in metrics.items()]
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(checkpoint, data_dir, mesh_path=None) -> tuple[dict, str]:
    from .mesh import import_mesh
    model, dataset = load_model(checkpoint), load_dataset(data_dir)
    mesh = import_mesh(mesh_path) if mesh_path else None
    metrics = evaluate(model, dataset, mesh)
    return metrics, format_report(metrics, model.config)


# --- ablation ----------------------------------------------------------------------

def ablate(cfg: RunConfig, data_dir, modes, budget: int | None, out_dir,
           psnr_views: bool = True, callback=None) -> list[dict]:
    """Train each mode with identical seed and budget; rows ranked by Chamfer.

    A failing run yields a row with ``error`` set instead of aborting the rest.
    """
    if len(modes) < 1:
        raise ValueError("need at least one mode")
    base = scaled_schedule(cfg, budget) if budget and budget != cfg.iterations else cfg
    dataset = load_dataset(data_dir)
    rows = []
    for n, mode in enumerate(modes):
        run_cfg = base.replace(mode=mode)
        row = {"mode": mode, "run": n, "chamfer": float("nan"), "psnr_masked": float("nan"),
               "error": None, "config_hash": run_cfg.hash()}
        try:
            trainer = train(run_cfg, data_dir, Path(out_dir) / f"{n:02d}_{mode}")
            m = evaluate(model_from_trainer(trainer), dataset, psnr_views=psnr_views)
            row.update({k: v for k, (v, _) in m.items()})
        except Exception as e:  # noqa: BLE001 - partial reports are the contract
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
        if callback:
            callback(row)
    rows.sort(key=lambda r: (r["error"] is not None, _nan_last(r["chamfer"]), r["run"]))
    return rows


def _nan_last(v: float) -> float:
    return float("inf") if v != v else v


def format_ablation(rows: list[dict]) -> str:
    lines = [f"# hsdf-ablation v{REPORT_VERSION}",
             "rank\tmode\tchamfer\tpsnr_masked\tconfig_hash\tstatus"]
    for rank, r in enumerate(rows, 1):
        status = "ok" if r["error"] is None else "failed: " + r["error"]
        lines.append(f"{rank}\t{r['mode']}\t{r['chamfer']!r}\t{r['psnr_masked']!r}\t"
                     f"{r['config_hash']}\t{status}")
    return "\n".join(lines) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")
