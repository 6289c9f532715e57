"""Flat typed run configuration: ``key = value`` text with environment overrides.

Every field carries its full-scale reference value in ``metadata["full"]``
(where one exists); :meth:`RunConfig.full_scale` builds that configuration.
Environment variables ``HSDF_<KEY>`` (upper case) override file values.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import EncodingConfig
from .field import FieldConfig
from .renderer import RenderConfig

MODES = ("AG", "AG+P", "NG", "NG+P")
SCENES = ("SPHERE", "BOX", "TORUS", "CSG-DIFF", "SPECULAR")
ENV_PREFIX = "HSDF_"


class ConfigError(ValueError):
    pass


def _f(default, full=None, doc=""):
    meta = {"doc": doc}
    if full is not None:
        meta["full"] = full
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class RunConfig:
    # dataset
    scene: str = _f("SPHERE", doc="canonical scene name")
    n_views: int = _f(16, doc="training views")
    n_test_views: int = _f(4, doc="held-out views")
    image_size: int = _f(64)
    rig: str = _f("hemisphere", doc="orbit | hemisphere")
    exposure: bool = _f(False, doc="per-image random gain in [0.8, 1.25]")
    gt_points: int = _f(100_000)
    # encoding
    levels: int = _f(8, full=16)
    min_res: int = _f(16, full=32)
    max_res: int = _f(128, full=2048)
    channels: int = _f(4, full=8)
    table_log2: int = _f(16, full=22)
    init_active_levels: int = _f(4, full=4)
    # networks
    sdf_hidden: int = _f(64, doc="width of the single hidden SDF layer")
    feature_dim: int = _f(15)
    color_hidden: int = _f(64)
    color_layers: int = _f(4, full=4)
    use_embedding: bool = _f(False)
    embedding_dim: int = _f(8)
    init_radius: float = _f(0.5)
    s_init: float = _f(64.0)
    # sampling
    n_uniform: int = _f(24)
    n_importance: int = _f(12)
    importance_rounds: int = _f(2)
    rays_per_batch: int = _f(128)
    images_per_batch: int = _f(0, doc="0 draws pixels uniformly from all training images")
    # schedule and optimizer
    mode: str = _f("NG+P", doc="AG | AG+P | NG | NG+P")
    iterations: int = _f(5000, full=500_000)
    activation_interval: int = _f(500, full=5000)
    lr: float = _f(3e-3, full=1e-3)
    lr_warmup: int = _f(500, full=5000)
    lr_milestones: tuple = _f((3000, 4000), full=(300_000, 400_000))
    lr_decay: float = _f(0.1, full=0.1)
    weight_decay: float = _f(1e-2, full=1e-2)
    w_eik: float = _f(0.1, full=0.1)
    w_curv: float = _f(5e-4, full=5e-4)
    curv_warmup: int = _f(500, full=5000, doc="0 applies full strength from the start")
    curv_decay: bool = _f(True, full=True)
    # bookkeeping
    seed: int = _f(0)
    log_every: int = _f(50)
    ckpt_every: int = _f(1000)
    # extraction and evaluation
    mc_resolution: int = _f(128, full=512)
    eval_points: int = _f(100_000)
    f1_tau: float = _f(0.01)
    data_dir: str = _f("")
    out_dir: str = _f("runs/default")

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------------
    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scene.upper() not in SCENES:
            raise ConfigError(f"scene must be one of {SCENES}, got {self.scene!r}")
        if self.rig not in ("orbit", "hemisphere"):
            raise ConfigError(f"unknown rig {self.rig!r}")
        if not 1 <= self.init_active_levels <= self.levels:
            raise ConfigError("init_active_levels must lie in [1, levels]")
        for name in ("iterations", "lr_warmup", "curv_warmup", "images_per_batch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("activation_interval", "rays_per_batch", "log_every", "ckpt_every",
                     "n_uniform", "image_size", "n_views"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "weight_decay", "w_eik", "w_curv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError("lr_milestones must be increasing")
        self.encoding_config()

    # -- derived configs ------------------------------------------------------------
    @property
    def numerical(self) -> bool:
        return self.mode.startswith("NG")

    @property
    def progressive(self) -> bool:
        return self.mode.endswith("+P")

    def encoding_config(self) -> EncodingConfig:
        try:
            return EncodingConfig(self.levels, self.min_res, self.max_res, self.channels,
                                  2 ** self.table_log2)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def field_config(self, n_images: int = 0) -> FieldConfig:
        return FieldConfig(self.encoding_config(), self.sdf_hidden, self.feature_dim,
                           self.color_hidden, self.color_layers, n_images, self.embedding_dim,
                           self.use_embedding, self.init_radius, self.s_init)

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.n_uniform, self.n_importance, self.importance_rounds)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def full_scale(cls, **kw) -> "RunConfig":
        vals = {f.name: f.metadata["full"] for f in dataclasses.fields(cls)
                if "full" in f.metadata}
        vals.update(kw)
        return cls(**vals)

    # -- text format ------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Digest of every setting except the filesystem paths."""
        text = self.replace(data_dir="", out_dir="").to_text()
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def resume_key(self) -> str:
        """Hash of the settings a resumed run must share; the total length may differ."""
        return self.replace(iterations=0).hash()

    @classmethod
    def from_text(cls, text: str, env=None) -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        if env is not None:
            for key in _FIELDS:
                if ENV_PREFIX + key.upper() in env:
                    values[key] = env[ENV_PREFIX + key.upper()]
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {}
        for key, value in values.items():
            typed[key] = _parse(key, value) if isinstance(value, str) else value
        return cls(**typed)

    @classmethod
    def load(cls, path=None, env=None, **overrides) -> "RunConfig":
        """Read a config file (optional) then apply environment and keyword overrides."""
        text = Path(path).read_text() if path else ""
        env = os.environ if env is None else env
        cfg = cls.from_text(text, env)
        return cfg.replace(**overrides) if overrides else cfg


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, text: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def scaled_schedule(cfg: RunConfig, iterations: int) -> RunConfig:
    """Same schedule shape compressed (or stretched) to ``iterations`` steps.

    Activation interval, warmups and learning-rate milestones scale by the
    same factor; logging and checkpoint periods are left alone.
    """
    if cfg.iterations == 0:
        raise ConfigError("cannot rescale a zero-iteration schedule")
    k = iterations / cfg.iterations

    def sc(v):
        return max(1, round(v * k))
    return cfg.replace(iterations=iterations, activation_interval=sc(cfg.activation_interval),
                       lr_warmup=round(cfg.lr_warmup * k), curv_warmup=round(cfg.curv_warmup * k),
                       lr_milestones=tuple(sc(m) for m in cfg.lr_milestones))
