"""Run configuration: TOML sections per stage, strict validation, env overrides.

Only ``ECLIP_SEED`` and ``ECLIP_OUT_DIR`` may be set from the environment.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoders import EncoderSpec
from .errors import ConfigError, EClipError
from .synth import SynthSpec
from .training import TrainConfig

ENV_SEED = "ECLIP_SEED"
ENV_OUT = "ECLIP_OUT_DIR"


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"
    workers: int = 1


@dataclass
class SynthSection:
    n_classes: int = 32
    n_catalogs_per_class: int = 8
    n_duplicates_per_catalog: int = 3
    text_dim: int = 64
    image_size: int = 10
    noise_sigma: float = 0.1
    category_depth: int = 2
    latent_dim: int = 8
    catalog_spread: float = 0.2
    image_spread: float = 0.04
    text_nuisance: float = 0.8
    image_nuisance: float = 0.12


@dataclass
class PreprocessSection:
    manifest: str = ""
    min_side: int = 8
    catalog_dedup: bool = False


@dataclass
class TrainSection:
    manifest: str = ""
    text_features: str = ""
    title_hash_dim: int = 64
    image_side: int = 10
    holdout_per_class: int = 1
    text_hidden: list = field(default_factory=lambda: [128])
    image_hidden: list = field(default_factory=lambda: [128])
    embed_dim: int = 32
    activation: str = "relu"
    B0: int = 32
    Bmax: int = 128
    total_steps: int = 2000
    micro_batch: int = 32
    lr: float = 3e-5
    weight_decay: float = 0.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    neg_prob: float = 0.5
    sampling: str = "uniform"
    category_level: int = -1
    label_mode: str = "soft"
    tau_init: float = 0.07
    freeze_text: bool = False
    freeze_image: bool = False
    eval_interval: int = 100
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    checkpoint: str = ""
    prompts: str = ""
    tasks: list = field(default_factory=lambda: ["zero_shot", "matching", "clustering", "attribute", "category", "adult"])
    pca_dim: int = 128
    probe_epochs: int = 300
    probe_lr: float = 0.1
    adult_prefixes: list = field(default_factory=list)


SECTIONS = {
    "run": RunSection,
    "synth": SynthSection,
    "preprocess": PreprocessSection,
    "train": TrainSection,
    "eval": EvalSection,
}
EVAL_TASKS = {"zero_shot", "matching", "clustering", "attribute", "category", "adult"}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(seed=self.run.seed, **asdict(self.synth))

    def encoder_specs(self, text_dim: int, image_dim: int) -> tuple[EncoderSpec, EncoderSpec]:
        t = self.train
        return (
            EncoderSpec(text_dim, tuple(t.text_hidden), t.embed_dim, t.activation),
            EncoderSpec(image_dim, tuple(t.image_hidden), t.embed_dim, t.activation),
        )

    def train_config(self, text_dim: int, image_dim: int) -> TrainConfig:
        t = self.train
        text_spec, image_spec = self.encoder_specs(text_dim, image_dim)
        try:
            return TrainConfig(
                text_spec=text_spec,
                image_spec=image_spec,
                B0=t.B0,
                Bmax=t.Bmax,
                total_steps=t.total_steps,
                micro_batch=t.micro_batch,
                lr=t.lr,
                weight_decay=t.weight_decay,
                betas=tuple(t.betas),
                eps=t.eps,
                warmup_fraction=t.warmup_fraction,
                neg_prob=t.neg_prob,
                sampling=t.sampling,
                category_level=None if t.category_level < 0 else t.category_level,
                label_mode=t.label_mode,
                tau_init=t.tau_init,
                freeze_text=t.freeze_text,
                freeze_image=t.freeze_image,
                eval_interval=t.eval_interval,
                checkpoint_every=t.checkpoint_every,
                workers=1 if self.run.deterministic else self.run.workers,
                seed=self.run.seed,
            )
        except EClipError as exc:
            raise ConfigError("train", str(exc)) from exc


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(where, f"expected a list, got {value!r}")
        return list(value)
    return value


def _validate(cfg: RunConfig) -> None:
    r, t, s, e = cfg.run, cfg.train, cfg.synth, cfg.eval
    checks = [
        ("run.workers", r.workers >= 1, "must be >= 1"),
        ("synth.n_classes", s.n_classes >= 1, "must be >= 1"),
        ("synth.noise_sigma", s.noise_sigma >= 0, "must be >= 0"),
        ("synth.category_depth", 1 <= s.category_depth <= 4, "must lie in [1, 4]"),
        ("synth.image_size", s.image_size >= 5, "must be >= 5"),
        ("preprocess.min_side", cfg.preprocess.min_side >= 1, "must be >= 1"),
        ("train.B0", t.B0 >= 1, "must be >= 1"),
        ("train.Bmax", t.Bmax >= t.B0, "must be >= B0"),
        ("train.total_steps", t.total_steps >= 1, "must be >= 1"),
        ("train.micro_batch", 1 <= t.micro_batch <= t.B0, "must lie in [1, B0]"),
        ("train.lr", t.lr >= 0, "must be >= 0"),
        ("train.weight_decay", t.weight_decay >= 0, "must be >= 0"),
        ("train.betas", len(t.betas) == 2 and all(0 <= b < 1 for b in t.betas), "must be two values in [0, 1)"),
        ("train.eps", t.eps > 0, "must be > 0"),
        ("train.warmup_fraction", 0 <= t.warmup_fraction <= 1, "must lie in [0, 1]"),
        ("train.neg_prob", 0 <= t.neg_prob <= 1, "must lie in [0, 1]"),
        ("train.sampling", t.sampling in ("uniform", "category"), "must be 'uniform' or 'category'"),
        ("train.label_mode", t.label_mode in ("soft", "hard"), "must be 'soft' or 'hard'"),
        ("train.activation", t.activation in ("relu", "tanh"), "must be 'relu' or 'tanh'"),
        ("train.tau_init", 0.01 <= t.tau_init <= 1.0, "must lie in [0.01, 1]"),
        ("train.eval_interval", t.eval_interval >= 1, "must be >= 1"),
        ("train.embed_dim", t.embed_dim >= 1, "must be >= 1"),
        ("train.holdout_per_class", t.holdout_per_class >= 0, "must be >= 0"),
        ("eval.tasks", set(e.tasks) <= EVAL_TASKS, f"unknown task; choose from {sorted(EVAL_TASKS)}"),
        ("eval.pca_dim", e.pca_dim >= 1, "must be >= 1"),
    ]
    for where, ok, msg in checks:
        if not ok:
            raise ConfigError(where, msg)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in doc.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(values, dict):
            raise ConfigError(section, "expected a table")
        target = getattr(cfg, section)
        allowed = {f.name for f in fields(target)}
        for key, value in values.items():
            if key not in allowed:
                raise ConfigError(f"{section}.{key}", "unknown key")
            setattr(target, key, _coerce(section, key, value, getattr(target, key)))
    _validate(cfg)
    return cfg


def load_config(
    path: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    deterministic: bool = False,
    environ: Optional[dict] = None,
) -> RunConfig:
    """Read a TOML file (or defaults), then apply env vars, then CLI flags."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError("--config", f"no such file: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("--config", f"invalid TOML: {exc}") from exc
    cfg = config_from_dict(doc)
    env = os.environ if environ is None else environ
    if ENV_SEED in env:
        try:
            cfg.run.seed = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(ENV_SEED, f"expected an integer, got {env[ENV_SEED]!r}") from exc
    if ENV_OUT in env:
        cfg.run.out_dir = env[ENV_OUT]
    if seed is not None:
        cfg.run.seed = seed
    if out_dir is not None:
        cfg.run.out_dir = out_dir
    if deterministic:
        cfg.run.deterministic = True
    return cfg
