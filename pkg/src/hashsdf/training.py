"""Losses, the coarse-to-fine schedule, the optimizer wrapper and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .encoding import cell_size, level_resolutions
from .field import NeuralField
from .geometry import InvalidInput
from .renderer import camera_rays, render_rays

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 100
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
_TOL = 1e-9


class LossError(RuntimeError):
    """A loss term became non-finite."""


class TrainingAborted(RuntimeError):
    """Too many consecutive optimizer steps had non-finite gradients."""


# --- losses -------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    w_eik: float = 0.1
    w_curv_peak: float = 5e-4
    w_curv_current: float = 0.0

    def __post_init__(self):
        if min(self.w_eik, self.w_curv_peak, self.w_curv_current) < 0:
            raise InvalidInput("loss weights must be non-negative")


def loss_rgb(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every channel of every pixel."""
    if rendered.shape != target.shape:
        raise InvalidInput(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return (rendered - target).abs().mean()


def loss_eikonal(gradients: torch.Tensor) -> torch.Tensor:
    return ((gradients.norm(dim=-1) - 1.0) ** 2).mean()


def loss_curvature(laplacians: torch.Tensor) -> torch.Tensor:
    return laplacians.abs().mean()


def total_loss(parts, weights: LossWeights) -> torch.Tensor:
    """rgb + w_eik * eikonal + w_curv_current * curvature.

    ``parts`` is a mapping with keys rgb, eik, curv (or a 3-sequence in that
    order).  A non-finite part raises :class:`LossError` naming it.
    """
    if not isinstance(parts, dict):
        parts = dict(zip(("rgb", "eik", "curv"), parts))
    for name, value in parts.items():
        v = torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise LossError(f"non-finite {name} loss: {v.detach().tolist()}")
    total = parts["rgb"] + weights.w_eik * parts["eik"]
    if weights.w_curv_current != 0:
        total = total + weights.w_curv_current * parts["curv"]
    return total


# --- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    cells: tuple  # cell size per level, coarse to fine
    growth: float
    init_active: int = 4
    activation_interval: int = 5000
    progressive: bool = True
    lr: float = 1e-3
    lr_warmup: int = 5000
    lr_milestones: tuple = (300_000, 400_000)
    lr_decay: float = 0.1
    w_curv_peak: float = 5e-4
    curv_warmup: int = 5000
    curv_decay: bool = True

    @classmethod
    def from_run(cls, rc) -> "ScheduleConfig":
        enc = rc.encoding_config()
        return cls(tuple(cell_size(v) for v in level_resolutions(enc)), enc.growth,
                   rc.init_active_levels, rc.activation_interval, rc.progressive, rc.lr,
                   rc.lr_warmup, tuple(rc.lr_milestones), rc.lr_decay, rc.w_curv,
                   rc.curv_warmup, rc.curv_decay)

    @property
    def levels(self) -> int:
        return len(self.cells)

    def eps_levels(self) -> list[float]:
        """The distinct step sizes: eps0 / b^k down to the finest cell size."""
        eps0, finest = self.cells[0], self.cells[-1]
        out, k = [eps0], 1
        while out[-1] > finest:
            e = eps0 * self.growth ** (-k)
            out.append(finest if e <= finest * (1 + _TOL) else e)
            k += 1
        return out


@dataclass(frozen=True)
class ScheduleState:
    iteration: int
    eps: float
    active_levels: int
    learning_rate: float
    decay_count: int
    w_curv: float


def schedule_at(iteration: int, cfg: ScheduleConfig) -> ScheduleState:
    """Closed-form schedule state; a pure function of the iteration count."""
    if iteration < 0:
        raise InvalidInput("iteration must be >= 0")
    eps_list = cfg.eps_levels()
    k = min(iteration // cfg.activation_interval, len(eps_list) - 1)
    eps = eps_list[k]
    if cfg.progressive:
        active = _active_levels(iteration // cfg.activation_interval, cfg, eps_list)
    else:
        active = cfg.levels

    lr = cfg.lr * _ramp(iteration, cfg.lr_warmup)
    lr *= cfg.lr_decay ** sum(1 for m in cfg.lr_milestones if iteration >= m)

    w = cfg.w_curv_peak * _ramp(iteration, cfg.curv_warmup)
    if cfg.curv_decay:
        # only eps decreases at or after the end of the warmup count
        events = sum(1 for m in range(1, k + 1)
                     if m * cfg.activation_interval >= cfg.curv_warmup)
        w *= cfg.growth ** (-events)
    return ScheduleState(iteration, eps, active, lr, k, w)


def _active_levels(intervals: int, cfg: ScheduleConfig, eps_list: list) -> int:
    """Levels whose cell size eps has reached, adding at most one per interval.

    The rate limit only binds when rounding gives neighbouring levels the
    same resolution.
    """
    active = 0
    for j in range(intervals + 1):
        k = min(j, len(eps_list) - 1)
        reached = sum(1 for c in cfg.cells if eps_list[k] <= c * (1 + _TOL))
        target = min(cfg.levels, max(cfg.init_active, reached))
        active = target if j == 0 else min(target, active + 1)
        if active == cfg.levels or (k == len(eps_list) - 1 and active == target):
            break
    return active


def _ramp(iteration: int, window: int) -> float:
    return 1.0 if window <= 0 else min(1.0, (iteration + 1) / window)


def schedule_step(state: ScheduleState, cfg: ScheduleConfig) -> ScheduleState:
    return schedule_at(state.iteration + 1, cfg)


# --- optimizer ------------------------------------------------------------------

class Optimizer:
    """AdamW with decoupled weight decay on every parameter and a non-finite guard."""

    def __init__(self, params, weight_decay: float = 1e-2, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.AdamW(self.params, lr=0.0, betas=betas, eps=eps,
                                     weight_decay=weight_decay, foreach=False)
        self.consecutive_skips = 0
        self.total_skips = 0

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self, lr: float) -> bool:
        """One update; returns False (and counts) when any gradient is non-finite."""
        grads = [p.grad for p in self.params if p.grad is not None]
        # a float64 sum of float32 values is non-finite iff some term is
        total = torch.stack([g.sum(dtype=torch.float64) for g in grads]).sum() if grads else 0.0
        if not torch.isfinite(torch.as_tensor(total)):
            self.consecutive_skips += 1
            self.total_skips += 1
            log.warning("skipping step: non-finite gradient (%d in a row)",
                        self.consecutive_skips)
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise TrainingAborted(f"{self.consecutive_skips} consecutive non-finite steps")
            return False
        self.consecutive_skips = 0
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        return True

    def state_tensors(self) -> dict:
        """Moment buffers and step counters keyed by parameter position."""
        out = {}
        for i, p in enumerate(self.params):
            st = self.opt.state.get(p)
            if st:
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    out[f"{i}/{key}"] = torch.as_tensor(st[key])
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        self.opt.state.clear()
        for i, p in enumerate(self.params):
            if f"{i}/step" in tensors:
                self.opt.state[p] = {k: tensors[f"{i}/{k}"].clone().to(
                    torch.float32 if k == "step" else p.dtype)
                    for k in ("step", "exp_avg", "exp_avg_sq")}


def optimizer_step(optimizer: Optimizer, lr: float) -> bool:
    return optimizer.step(lr)


# --- training loop ----------------------------------------------------------------

def iteration_seed(seed: int, iteration: int) -> int:
    return (seed * 1_000_003 + iteration) % (2 ** 63)


class Trainer:
    """Single-writer training loop over a :class:`SceneDataset`.

    Every iteration re-seeds its own generator from (seed, iteration), so a
    resumed run draws the same rays as an uninterrupted one.
    """

    def __init__(self, config, dataset, run_dir=None, field: NeuralField | None = None):
        self.config = config
        self.dataset = dataset
        self.run_dir = Path(run_dir) if run_dir else None
        self.train_ids = dataset.indices("train")
        if not self.train_ids:
            raise InvalidInput("dataset has no training views")
        self.field = field or NeuralField(config.field_config(len(self.train_ids)), config.seed)
        self.optimizer = Optimizer(self.field.parameters(), config.weight_decay)
        self.schedule = ScheduleConfig.from_run(config)
        self.render_cfg = config.render_config()
        self.iteration = 0
        self._prepare_rays()

    def _prepare_rays(self):
        o, d, c, ids = [], [], [], []
        for j, i in enumerate(self.train_ids):
            oi, di = camera_rays(self.dataset.cameras[i], torch.float32)
            o.append(oi)
            d.append(di)
            c.append(torch.as_tensor(self.dataset.images[i].reshape(-1, 3), dtype=torch.float32))
            ids.append(torch.full((oi.shape[0],), j, dtype=torch.long))
        self.origins, self.dirs = torch.cat(o), torch.cat(d)
        self.colors, self.image_ids = torch.cat(c), torch.cat(ids)
        self.pixels_per_image = o[0].shape[0]

    @property
    def state(self) -> ScheduleState:
        return schedule_at(self.iteration, self.schedule)

    def _select(self, gen: torch.Generator) -> torch.Tensor:
        R, k = self.config.rays_per_batch, self.config.images_per_batch
        if k == 0:
            return torch.randint(self.origins.shape[0], (R,), generator=gen)
        k = min(k, len(self.train_ids))
        imgs = torch.randperm(len(self.train_ids), generator=gen)[:k]
        per = -(-R // k)
        pix = torch.randint(self.pixels_per_image, (k, per), generator=gen)
        return (imgs[:, None] * self.pixels_per_image + pix).reshape(-1)[:R]

    def step(self) -> dict:
        st = self.state
        gen = torch.Generator().manual_seed(iteration_seed(self.config.seed, self.iteration))
        idx = self._select(gen)
        out = render_rays(self.field, self.origins[idx], self.dirs[idx], cfg=self.render_cfg,
                          eps=st.eps, active_levels=st.active_levels,
                          analytic=not self.config.numerical, gen=gen,
                          image_index=self.image_ids[idx])
        parts = {"rgb": loss_rgb(out.rgb, self.colors[idx])}
        if out.gradients is not None:
            parts["eik"] = loss_eikonal(out.gradients)
            parts["curv"] = loss_curvature(out.laplacians)
        else:
            zero = out.rgb.sum() * 0
            parts["eik"], parts["curv"] = zero, zero
        weights = LossWeights(self.config.w_eik, self.config.w_curv, st.w_curv)
        loss = total_loss(parts, weights)
        self.optimizer.zero_grad()
        loss.backward()
        applied = self.optimizer.step(st.learning_rate)
        record = {"iteration": self.iteration, "loss": loss.item(),
                  "loss_rgb": parts["rgb"].item(), "loss_eik": parts["eik"].item(),
                  "loss_curv": parts["curv"].item(), "eps": st.eps,
                  "active_levels": st.active_levels, "lr": st.learning_rate,
                  "w_curv": st.w_curv, "s": self.field.sharpness().item(),
                  "skipped": not applied}
        self.iteration += 1
        return record

    # -- run management -------------------------------------------------------------
    @property
    def metrics_path(self) -> Path | None:
        return self.run_dir / "metrics.jsonl" if self.run_dir else None

    def checkpoint_path(self, iteration: int) -> Path:
        return self.run_dir / "checkpoints" / f"ckpt_{iteration:07d}.hsdf"

    def save(self, path=None) -> Path:
        from .checkpoint import save_checkpoint
        path = Path(path) if path else self.checkpoint_path(self.iteration)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self)
        return path

    def load(self, path) -> None:
        from .checkpoint import load_checkpoint, restore_trainer
        restore_trainer(self, load_checkpoint(path))
        if self.metrics_path and self.metrics_path.exists():
            keep = [ln for ln in self.metrics_path.read_text().splitlines()
                    if ln and json.loads(ln)["iteration"] < self.iteration]
            self.metrics_path.write_text("".join(ln + "\n" for ln in keep))

    def train(self, until: int | None = None, callback=None) -> list[dict]:
        """Run to iteration ``until`` (default: the configured total)."""
        until = self.config.iterations if until is None else until
        records = []
        if self.run_dir is not None and self.iteration == 0:
            self.save()
        while self.iteration < until:
            rec = self.step()
            if rec["iteration"] % self.config.log_every == 0:
                records.append(rec)
                if self.metrics_path:
                    with open(self.metrics_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
                if callback:
                    callback(rec)
            if self.run_dir is not None and (self.iteration % self.config.ckpt_every == 0
                                             or self.iteration == until):
                self.save()
        return records

    def final_state(self) -> ScheduleState:
        """Schedule state of the last completed iteration."""
        return schedule_at(max(self.iteration - 1, 0), self.schedule)


def schedule_to_dict(state: ScheduleState) -> dict:
    return asdict(state)


def constant_gradient_limit(lr: float, steps: int, g: float = 1.0) -> float:
    """Closed-form displacement after ``steps`` AdamW steps with a constant gradient.

    With constant g the bias-corrected moments are exactly g and g^2, so
    each step moves by lr * g / (|g| + eps).
    """
    return -steps * lr * g / (abs(g) + ADAM_EPS)

