"""Run configuration: nested dataclasses loaded from YAML, validated before anything runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .core import ChunkGeometry
from .gauntlet import GauntletConfig, RatingConfig
from .optimizer import AdamWConfig, LrSchedule, OuterConfig
from .timing import PRESETS, TimingModel

BEHAVIORS = ("honest", "noisy", "copier", "dropout")


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    kind: str = "logistic"
    dim: int | None = None
    n_shards: int = 64
    examples_per_shard: int = 512
    shards_per_peer: int = 4
    overlap: float = 0.25
    heterogeneity: float = 0.5
    noise: float = 0.1
    hidden: int = 64
    n_classes: int = 4
    batch_size: int = 32


@dataclass
class CompressionSection:
    chunk: int = 4096
    topk: int = 64
    quant_bits: int = 2  # 2 = sign+bucket codes, 0 = raw float64 values


@dataclass
class LrSection:
    warmup_steps: int = 1500
    peak: float = 1.2e-4
    floor: float = 1.2e-5
    flatten_start: int = 80_000
    flatten_length: int = 13_500
    total_steps: int = 130_000
    anneal_warmup: int = 0
    anneal_decay: int = 0
    anneal_peak: float | None = None


@dataclass
class OptimSection:
    H: int = 30
    alpha: float = 1.0
    late_alpha: float = 0.65
    alpha_drop_step: int | None = None
    ef_beta: float = 0.95
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    lr: LrSection = field(default_factory=LrSection)


@dataclass
class GauntletSection:
    cap: int = 20
    eval_fraction: float = 0.5
    eval_batches: int = 4
    eval_batch_size: int = 512
    norm_factor: float = 10.0
    norm_window: int = 5
    median_normalize: bool = True
    mu0: float = 25.0
    sigma0: float = 25.0 / 3
    beta: float = 25.0 / 6
    sigma_min: float = 0.5
    sigma_max: float = 25.0 / 3
    growth: float = 0.02
    shrink: float = 0.9


@dataclass
class ChurnSection:
    initial_peers: int = 24
    p_leave: float = 0.05
    join_rate: float = 1.22
    # behavior mix for joiners (and for initial peers unless initial_behaviors is given)
    mix: dict[str, float] = field(default_factory=lambda: {"honest": 0.6, "dropout": 0.4})
    initial_behaviors: list[str] | None = None
    noisy_sigma: float = 1.0
    dropout_p: float = 0.5


@dataclass
class TimingSection:
    preset: str | None = None
    t_compute: float = 1200.0
    uplink: float = 110e6
    downlink: float = 500e6
    fixed_overhead: float = 0.0


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    rounds: int = 100
    workers: int = 1
    out: str = "runs/out"
    checkpoint_every: int = 50
    task: TaskSection = field(default_factory=TaskSection)
    compression: CompressionSection = field(default_factory=CompressionSection)
    optim: OptimSection = field(default_factory=OptimSection)
    gauntlet: GauntletSection = field(default_factory=GauntletSection)
    churn: ChurnSection = field(default_factory=ChurnSection)
    timing: TimingSection = field(default_factory=TimingSection)

    # -- derived component configs -----------------------------------------

    def geometry(self) -> ChunkGeometry:
        side = int(round(self.compression.chunk**0.5))
        return ChunkGeometry(chunk_2d=side, chunk_1d=self.compression.chunk, k=self.compression.topk)

    def schedule(self) -> LrSchedule:
        return LrSchedule(**dataclasses.asdict(self.optim.lr))

    def outer(self) -> OuterConfig:
        o = self.optim
        return OuterConfig(
            alpha=o.alpha, H=o.H, r_cap=self.gauntlet.cap, late_alpha=o.late_alpha, alpha_drop_step=o.alpha_drop_step
        )

    def adamw(self) -> AdamWConfig:
        o = self.optim
        return AdamWConfig(weight_decay=o.weight_decay, beta1=o.beta1, beta2=o.beta2, eps=o.eps)

    def gauntlet_config(self) -> GauntletConfig:
        g = self.gauntlet
        rating = RatingConfig(
            mu0=g.mu0, sigma0=g.sigma0, beta=g.beta, sigma_min=g.sigma_min,
            sigma_max=g.sigma_max, growth=g.growth, shrink=g.shrink,
        )
        return GauntletConfig(
            cap=g.cap, eval_fraction=g.eval_fraction, eval_batches=g.eval_batches,
            eval_batch_size=g.eval_batch_size, norm_factor=g.norm_factor,
            norm_window=g.norm_window, rating=rating,
        )

    def timing_model(self) -> TimingModel:
        t = self.timing
        if t.preset is not None:
            return PRESETS[t.preset].model()
        return TimingModel(t_compute=t.t_compute, uplink=t.uplink, downlink=t.downlink, fixed_overhead=t.fixed_overhead)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def validate(self) -> RunConfig:
        _validate(self)
        return self


def _check(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _validate(cfg: RunConfig) -> None:
    _check(cfg.rounds >= 1, "rounds", "must be >= 1")
    _check(cfg.workers >= 1, "workers", "must be >= 1")
    _check(cfg.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
    t = cfg.task
    _check(t.kind in ("quadratic", "logistic", "mlp"), "task.kind", "must be quadratic, logistic or mlp")
    _check(t.dim is None or t.dim >= 1, "task.dim", "must be >= 1")
    _check(t.n_shards >= 1, "task.n_shards", "must be >= 1")
    _check(t.examples_per_shard >= 1, "task.examples_per_shard", "must be >= 1")
    _check(1 <= t.shards_per_peer <= t.n_shards, "task.shards_per_peer", "must lie in [1, n_shards]")
    _check(0 <= t.overlap < 1, "task.overlap", "must lie in [0, 1)")
    _check(t.batch_size >= 1, "task.batch_size", "must be >= 1")
    c = cfg.compression
    side = int(round(c.chunk**0.5))
    _check(c.chunk >= 1 and side * side == c.chunk, "compression.chunk", "must be a perfect square")
    _check(c.chunk <= 4096, "compression.chunk", "must be <= 4096 (12-bit indices)")
    _check(1 <= c.topk, "compression.topk", "must be >= 1")
    _check(c.topk <= c.chunk, "compression.topk", f"must be <= compression.chunk ({c.chunk})")
    _check(c.quant_bits in (0, 2), "compression.quant_bits", "must be 0 (off) or 2")
    o = cfg.optim
    _check(o.H >= 1, "optim.H", "must be >= 1")
    _check(o.alpha > 0, "optim.alpha", "must be > 0")
    _check(o.late_alpha > 0, "optim.late_alpha", "must be > 0")
    _check(0 <= o.ef_beta < 1, "optim.ef_beta", "must lie in [0, 1)")
    _check(0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optim.beta1", "betas must lie in [0, 1)")
    _check(o.eps > 0, "optim.eps", "must be > 0")
    try:
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(f"optim.lr: {exc}") from None
    g = cfg.gauntlet
    _check(g.cap >= 1, "gauntlet.cap", "must be >= 1")
    _check(0 < g.eval_fraction <= 1, "gauntlet.eval_fraction", "must lie in (0, 1]")
    _check(g.eval_batches >= 1, "gauntlet.eval_batches", "must be >= 1")
    _check(g.eval_batch_size >= 1, "gauntlet.eval_batch_size", "must be >= 1")
    _check(g.norm_factor > 0, "gauntlet.norm_factor", "must be > 0")
    _check(0 < g.sigma_min <= g.sigma_max, "gauntlet.sigma_min", "need 0 < sigma_min <= sigma_max")
    _check(0 < g.shrink <= 1, "gauntlet.shrink", "must lie in (0, 1]")
    ch = cfg.churn
    _check(ch.initial_peers >= 0, "churn.initial_peers", "must be >= 0")
    _check(0 <= ch.p_leave <= 1, "churn.p_leave", "must lie in [0, 1]")
    _check(ch.join_rate >= 0, "churn.join_rate", "must be >= 0")
    _check(bool(ch.mix) and all(k in BEHAVIORS for k in ch.mix), "churn.mix", f"keys must be from {BEHAVIORS}")
    _check(all(v >= 0 for v in ch.mix.values()) and sum(ch.mix.values()) > 0, "churn.mix", "weights must be >= 0 with positive sum")
    if ch.initial_behaviors is not None:
        _check(all(b in BEHAVIORS for b in ch.initial_behaviors), "churn.initial_behaviors", f"entries must be from {BEHAVIORS}")
    _check(0 <= ch.dropout_p <= 1, "churn.dropout_p", "must lie in [0, 1]")
    _check(ch.noisy_sigma >= 0, "churn.noisy_sigma", "must be >= 0")
    tm = cfg.timing
    _check(tm.preset is None or tm.preset in PRESETS, "timing.preset", f"must be one of {sorted(PRESETS)}")
    _check(tm.t_compute > 0, "timing.t_compute", "must be > 0")
    _check(tm.uplink > 0, "timing.uplink", "must be > 0")
    _check(tm.downlink > 0, "timing.downlink", "must be > 0")
    _check(tm.fixed_overhead >= 0, "timing.fixed_overhead", "must be >= 0")


def _build(cls, data: Any, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _coerce(hint, value, sub)
    return cls(**kwargs)


def _coerce(hint, value, path):
    text = str(hint)
    if value is None:
        if "None" in text:
            return None
        raise ConfigError(f"{path}: may not be null")
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int or text.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float or text.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str or text.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if text.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return {str(k): float(v) for k, v in value.items()}
    if text.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [str(v) for v in value]
    return value


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


BUNDLED = ("quadratic-smoke", "logistic-default", "mlp-smoke")


def load_config(path_or_name: str | Path) -> RunConfig:
    """Load a YAML config by path, or a bundled config by name (e.g. ``quadratic-smoke``)."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text()
    elif str(path_or_name) in BUNDLED:
        text = resources.files("sparseloco.configs").joinpath(f"{path_or_name}.yaml").read_text()
    else:
        raise ConfigError(f"config: no such file or bundled config {str(path_or_name)!r}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: YAML parse error: {exc}") from None
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
