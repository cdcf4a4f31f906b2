"""Flat ``key = value`` run configuration with validation."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # data
    n_traj: int = 500
    data_seed: int = 0
    # skills
    h: int = 10
    K: int = 8
    D: int = 8
    beta: float = 0.25
    prior_depth: int = 4
    hidden: int = 128
    epochs: int = 50
    batch: int = 32
    lr: float = 1e-3
    prior_lr: float = 3e-2
    codebook_lr: float = 1e-2
    holdout: float = 0.1
    skill_seed: int = 0
    # downstream RL
    env_steps: int = 200_000
    gamma: float = 0.99
    tau: float = 0.005
    delta: float = 1.0
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    lr_codebook: float = 3e-5
    init_alpha: float = 0.1
    rl_batch: int = 256
    buffer: int = 100_000
    collect_skills: int = 4
    grad_steps: int = 4
    warmup: int = 256
    log_every: int = 50
    rl_seed: int = 0
    # distillation and evaluation
    distill_traj: int = 1000
    distill_depth: int = 6
    min_leaf: int = 1
    clean_threshold: int = 1
    distill_seed: int = 0
    eval_episodes: int = 100
    eval_seed: int = 12345
    ablation_episodes: int = 100
    explain_seed: int = 0
    # paths
    out_dir: str = "run"
    data: str = "run/data.csv"

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **kw):
        cfg = dataclasses.replace(self, **kw)
        validate(cfg)
        return cfg


FIELDS = {f.name: f for f in dataclasses.fields(Config)}
_TYPES = {"int": int, "float": float, "str": str}


def coerce(key, value):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[FIELDS[key].type] if isinstance(FIELDS[key].type, str) else FIELDS[key].type
    if isinstance(value, kind) and not isinstance(value, bool):
        return value
    try:
        if kind is int:
            f = float(value)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def parse(text):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides``; validated."""
    values = {}
    if path is not None:
        try:
            values.update(parse(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    cfg = Config(**values)
    validate(cfg)
    return cfg


def validate(cfg):
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)

    need(cfg.n_traj >= 1, "n_traj must be at least 1")
    for key in ("h", "D", "prior_depth", "hidden", "batch", "rl_batch", "buffer", "collect_skills",
                "grad_steps", "log_every", "distill_traj", "distill_depth", "min_leaf",
                "eval_episodes", "ablation_episodes"):
        need(getattr(cfg, key) >= 1, f"{key} must be at least 1")
    need(cfg.K >= 2, "K must be at least 2")
    need(cfg.epochs >= 0 and cfg.env_steps >= 0 and cfg.warmup >= 0, "counts must be non-negative")
    need(cfg.beta > 0, "beta must be positive")
    need(0 <= cfg.holdout < 1, "holdout must lie in [0, 1)")
    need(0 < cfg.gamma <= 1, "gamma must lie in (0, 1]")
    need(0 < cfg.tau <= 1, "tau must lie in (0, 1]")
    need(cfg.delta > 0, "delta must be positive")
    need(cfg.init_alpha > 0, "init_alpha must be positive")
    for key in ("lr", "prior_lr", "codebook_lr", "lr_policy", "lr_critic", "lr_alpha"):
        need(getattr(cfg, key) > 0, f"{key} must be positive")
    need(cfg.lr_codebook >= 0, "lr_codebook must be non-negative")
    need(cfg.clean_threshold >= -1, "clean_threshold must be at least -1")
    need(cfg.buffer >= cfg.rl_batch, "buffer must hold at least one batch")
    for key in ("data_seed", "skill_seed", "rl_seed", "distill_seed", "eval_seed", "explain_seed"):
        need(getattr(cfg, key) >= 0, f"{key} must be non-negative")
    return cfg
