"""Inner AdamW, error-feedback compression, aggregation, outer step and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import codec
from .codec import CompressedDelta
from .core import ChunkGeometry, InvalidArgument, InvalidData, ParamVector, chunk_layout, layout_digest, layout_size


class StaleSubmission(ValueError):
    pass


@dataclass(frozen=True)
class AdamWConfig:
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass(frozen=True, eq=False)
class InnerOptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    hyper: AdamWConfig = AdamWConfig()

    @classmethod
    def zeros(cls, n: int, hyper: AdamWConfig = AdamWConfig()) -> InnerOptState:
        return cls(np.zeros(n), np.zeros(n), 0, hyper)


def adamw_update(
    x: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, g: np.ndarray, lr: float, h: AdamWConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array-level AdamW step; ``step`` is the 1-based count after this update."""
    m = h.beta1 * m + (1 - h.beta1) * g
    v = h.beta2 * v + (1 - h.beta2) * g * g
    m_hat = m / (1 - h.beta1**step)
    v_hat = v / (1 - h.beta2**step)
    x = x - lr * (m_hat / (np.sqrt(v_hat) + h.eps) + h.weight_decay * x)
    return x, m, v


def inner_step(
    params: ParamVector, state: InnerOptState, grad: ParamVector | np.ndarray, lr: float
) -> tuple[ParamVector, InnerOptState]:
    """One AdamW step with decoupled weight decay; returns new params and state."""
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise InvalidArgument("gradient / state shape mismatch")
    if not np.all(np.isfinite(g)):
        raise InvalidData("non-finite gradient")
    if lr < 0:
        raise InvalidArgument("learning rate must be non-negative")
    t = state.step + 1
    x, m, v = adamw_update(params.values, state.m, state.v, t, g, lr, state.hyper)
    return params.with_values(x), InnerOptState(m, v, t, state.hyper)


def pseudo_gradient(global_params: ParamVector, local: ParamVector) -> ParamVector:
    global_params.same_layout(local)
    return global_params.with_values(global_params.values - local.values)


@dataclass(frozen=True, eq=False)
class ErrorFeedback:
    e: np.ndarray
    beta: float = 0.95

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise InvalidArgument("error-feedback decay must lie in [0, 1)")

    @classmethod
    def zeros(cls, n: int, beta: float = 0.95) -> ErrorFeedback:
        return cls(np.zeros(n), beta)


def compress_with_ef(
    delta: ParamVector,
    ef: ErrorFeedback,
    geometry: ChunkGeometry,
    *,
    base_round: int = 0,
    peer_id: str = "peer",
    quantize: bool = True,
) -> tuple[CompressedDelta, ErrorFeedback]:
    """Compress ``beta * e + delta``; the residual (everything not reproduced) becomes the new e."""
    if ef.e.shape != delta.values.shape:
        raise InvalidArgument("error-feedback buffer length mismatch")
    buf = ef.beta * ef.e + delta.values
    chunks = chunk_layout(delta.layout, geometry)
    compressed, decoded = codec.compress_dense(buf, chunks, geometry, quantize=quantize)
    out = CompressedDelta(base_round, peer_id, tuple(compressed), delta.layout_digest)
    return out, ErrorFeedback(buf - decoded, ef.beta)


def median_normalize(deltas: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Rescale every nonzero delta to the (lower) median L2 norm of the set."""
    if not deltas:
        raise InvalidArgument("nothing to normalize")
    arrs = [np.asarray(d, dtype=np.float64) for d in deltas]
    norms = [float(np.linalg.norm(a)) for a in arrs]
    target = sorted(norms)[(len(norms) - 1) // 2]
    return [a * (target / n) if n > 0 else a.copy() for a, n in zip(arrs, norms)]


def aggregate(
    deltas: Sequence[CompressedDelta],
    layout,
    geometry: ChunkGeometry,
    normalize: bool = False,
) -> ParamVector:
    """Mean of the decoded deltas, summed in ascending peer-id order."""
    if not deltas:
        raise InvalidArgument("cannot aggregate zero deltas")
    rounds = {d.base_round for d in deltas}
    if len(rounds) > 1:
        raise StaleSubmission(f"deltas built on different rounds: {sorted(rounds)}")
    layout = tuple(layout)
    digest = layout_digest(layout)
    if any(d.layout_digest != digest for d in deltas):
        raise InvalidArgument("delta layout digest does not match")
    size = layout_size(layout)
    chunks = chunk_layout(layout, geometry)
    ordered = sorted(deltas, key=lambda d: d.peer_id)
    dense = [codec.decode_dense(d, chunks, size, geometry) for d in ordered]
    if normalize:
        dense = median_normalize(dense)
    total = np.zeros(size)
    for d in dense:
        total = total + d
    return ParamVector(total / len(dense), layout)


def outer_step(global_params: ParamVector, agg: ParamVector, alpha: float) -> ParamVector:
    global_params.same_layout(agg)
    return global_params.with_values(global_params.values - alpha * agg.values)


@dataclass(frozen=True)
class OuterConfig:
    alpha: float = 1.0
    H: int = 30
    r_cap: int = 20
    late_alpha: float = 0.65
    # inner step at which alpha drops to late_alpha; None keeps alpha constant
    alpha_drop_step: int | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.late_alpha <= 0 or self.H < 1 or self.r_cap < 1:
            raise InvalidArgument("need alpha > 0, H >= 1, r_cap >= 1")

    def alpha_at(self, round_idx: int) -> float:
        if self.alpha_drop_step is not None and round_idx * self.H >= self.alpha_drop_step:
            return self.late_alpha
        return self.alpha


@dataclass(frozen=True)
class LrSchedule:
    """Warmup, cosine to ``floor`` with a flat window, and an optional re-warm/decay anneal tail.

    The flat window holds the value reached at ``flatten_start``; afterwards the cosine
    continues where it stopped, so it still lands on ``floor`` at ``total_steps``.
    The anneal tail occupies ``(total_steps, total_steps + anneal_warmup + anneal_decay]``.
    """

    warmup_steps: int = 1500
    peak: float = 1.2e-4
    floor: float = 1.2e-5
    flatten_start: int = 80_000
    flatten_length: int = 13_500
    total_steps: int = 130_000
    anneal_warmup: int = 0
    anneal_decay: int = 0
    anneal_peak: float | None = None

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.flatten_start < self.total_steps:
            raise InvalidArgument("need 0 <= warmup_steps < flatten_start < total_steps")
        if not 0 <= self.floor < self.peak:
            raise InvalidArgument("need 0 <= floor < peak")
        if self.flatten_length < 0 or self.flatten_start + self.flatten_length > self.total_steps:
            raise InvalidArgument("flatten window must end by total_steps")
        if self.decay_length <= 0:
            raise InvalidArgument("no room left for the cosine decay")
        if self.anneal_warmup < 0 or self.anneal_decay < 0:
            raise InvalidArgument("anneal lengths must be non-negative")

    @property
    def decay_length(self) -> int:
        return self.total_steps - self.warmup_steps - self.flatten_length

    @property
    def last_step(self) -> int:
        return self.total_steps + self.anneal_warmup + self.anneal_decay

    def scaled(self, factor: float) -> LrSchedule:
        return replace(self, peak=self.peak * factor, floor=self.floor * factor)


def inner_lr_at(step: int, schedule: LrSchedule) -> float:
    s = schedule
    if not 0 <= step <= s.last_step:
        raise InvalidArgument(f"step {step} outside [0, {s.last_step}]")
    if step < s.warmup_steps:
        return s.peak * step / s.warmup_steps
    if step <= s.total_steps:
        if step < s.flatten_start:
            progress = step - s.warmup_steps
        elif step < s.flatten_start + s.flatten_length:
            progress = s.flatten_start - s.warmup_steps
        else:
            progress = step - s.warmup_steps - s.flatten_length
        cos = 0.5 * (1 + math.cos(math.pi * progress / s.decay_length))
        return s.floor + (s.peak - s.floor) * cos
    peak = s.anneal_peak if s.anneal_peak is not None else s.peak
    into = step - s.total_steps
    if into <= s.anneal_warmup:
        return s.floor + (peak - s.floor) * into / s.anneal_warmup
    into -= s.anneal_warmup
    return peak - (peak - s.floor) * into / s.anneal_decay
