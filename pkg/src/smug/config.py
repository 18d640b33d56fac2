"""Experiment configuration: an INI file with one section per component.

Example::

    [run]
    seed = 0
    record_timing = true

    [data]
    size = 64
    n_train = 50

    [smoothing]
    sigma = 0.05
    samples = 4

Missing keys take the defaults below. The ``seed`` keys of individual
sections are combined with the master ``[run] seed``. ``config_hash`` is the SHA-256 of the
canonical JSON form, so two files that parse to the same settings share a hash.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import PhantomSpec
from .errors import ConfigError
from .models import DenoiserSpec, EncoderSpec, IstaSpec
from .recon import METHODS, SmoothingConfig, UnrollConfig
from .robustness import AttackConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    n_train: int = 50
    n_val: int = 10
    n_test: int = 20
    n_ellipses_min: int = 3
    n_ellipses_max: int = 8
    texture: float = 0.05
    measurement_noise: float = 0.0


@dataclass(frozen=True)
class MaskConfig:
    accel: float = 4.0
    center_frac: float = 0.08


@dataclass(frozen=True)
class ModelConfig:
    denoiser_channels: tuple = (2, 16, 16, 2)
    denoiser_kernel: int = 3
    denoiser_bound: float = 1.5
    encoder_width: int = 4
    ista_width: int = 8


@dataclass(frozen=True)
class TrainSection:
    pretrain_epochs: int = 20
    epochs: int = 5
    batch_size: int = 2
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_ell: float = 1.0
    ustab_samples: int = 2
    pretrain_samples: int = 2
    ustab_variant: str = "denoised_target"
    clip_norm: float = 10.0


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = ("modl", "smug", "wsmug")
    noise_scale: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    record_timing: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    unroll: UnrollConfig = field(default_factory=UnrollConfig)
    smoothing: SmoothingConfig = field(default_factory=lambda: SmoothingConfig(sigma=0.05, samples=4))
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for m in self.eval.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in [eval] methods")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        # build the derived objects once so that invalid values fail at load time
        self.phantom_spec()
        self.train_config("pretrain")
        self.train_config("finetune")
        self.denoiser_spec()

    # -- derived objects --------------------------------------------------
    def seed_for(self, tag: str) -> int:
        """Component seed derived from the master seed and a fixed tag."""
        digest = hashlib.sha256(f"{self.run.seed}:{tag}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def phantom_spec(self) -> PhantomSpec:
        d = self.data
        return PhantomSpec(d.size, (d.n_ellipses_min, d.n_ellipses_max), texture=d.texture,
                           seed=self.seed_for("phantoms"))

    def smoothing_config(self) -> SmoothingConfig:
        return replace(self.smoothing, seed=self.seed_for(f"smoothing/{self.smoothing.seed}"))

    def attack_config(self) -> AttackConfig:
        return replace(self.attack, seed=self.seed_for(f"attack/{self.attack.seed}"))

    def denoiser_spec(self) -> DenoiserSpec:
        m = self.models
        return DenoiserSpec(tuple(m.denoiser_channels), m.denoiser_kernel, m.denoiser_bound)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(width=self.models.encoder_width)

    def ista_spec(self) -> IstaSpec:
        return IstaSpec(phases=self.unroll.n_steps, width=self.models.ista_width)

    def train_config(self, stage: str, pretrain_sigma: float | None = None) -> TrainConfig:
        t = self.train
        pre = stage.startswith("pretrain")
        return TrainConfig(
            epochs=t.pretrain_epochs if pre else t.epochs, batch_size=t.batch_size,
            lr=t.pretrain_lr if pre else t.lr, adam_betas=(t.beta1, t.beta2), lambda_ell=t.lambda_ell,
            sigma=self.smoothing.sigma, samples=self.smoothing.samples, ustab_samples=t.ustab_samples,
            pretrain_sigma=pretrain_sigma, pretrain_samples=t.pretrain_samples, seed=self.seed_for(stage),
            ustab_variant=t.ustab_variant, clip_norm=t.clip_norm)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for f in fields(getattr(self, sec.name)):
                v = getattr(getattr(self, sec.name), f.name)
                if isinstance(v, (tuple, list)):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                lines.append(f"{f.name} = {v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = {}
        for sec in fields(cls):
            proto = sec.default_factory()
            vals = d.get(sec.name, {})
            known = {f.name: f for f in fields(proto)}
            unknown = set(vals) - set(known)
            if unknown:
                raise ConfigError(f"unknown key(s) in [{sec.name}]: {sorted(unknown)}")
            kw[sec.name] = replace(proto, **{k: _coerce(getattr(proto, k), v, sec.name, k) for k, v in vals.items()})
        unknown = set(d) - {s.name for s in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict({s: dict(cp[s]) for s in cp.sections()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_ini(p.read_text(encoding="utf-8"))


def _coerce(proto, value, section, key):
    """Parse ``value`` to the type of the default ``proto``."""
    if isinstance(value, (list, tuple)):
        value = ", ".join(str(v) for v in value)
    if not isinstance(value, str):
        return value
    s = value.strip()
    try:
        if isinstance(proto, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(proto, int):
            return int(s)
        if isinstance(proto, float):
            v = float(s)
            if not np.isfinite(v):
                raise ValueError(s)
            return v
        if isinstance(proto, tuple):
            items = [x.strip() for x in s.split(",") if x.strip()]
            if proto and isinstance(proto[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return s
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {value!r}") from exc
