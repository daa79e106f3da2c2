"""Per-round communication time and compute utilization."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TimingModel:
    t_compute: float = 1200.0  # seconds per round
    uplink: float = 110e6  # bits/s
    downlink: float = 500e6  # bits/s
    fixed_overhead: float = 0.0  # seconds: validator latency, aggregation

    def __post_init__(self):
        if self.t_compute <= 0 or self.uplink <= 0 or self.downlink <= 0 or self.fixed_overhead < 0:
            raise ValueError("timing model needs positive compute window and bandwidths")


def simulate_timing(payload_bytes_up: float, payload_bytes_down: float, model: TimingModel, peers: int = 1) -> tuple[float, float]:
    """Return ``(t_comm, utilization)`` for one peer's upload/download volume in a round.

    ``peers`` is accepted for reporting symmetry; the volumes passed in are already per peer.
    """
    if payload_bytes_up < 0 or payload_bytes_down < 0 or peers < 1:
        raise ValueError("payload sizes must be non-negative and peers >= 1")
    t_comm = payload_bytes_up * 8 / model.uplink + payload_bytes_down * 8 / model.downlink + model.fixed_overhead
    return t_comm, model.t_compute / (model.t_compute + t_comm)


@dataclass(frozen=True)
class TimingPreset:
    """A reported deployment: compute window and the average communication time observed for it."""

    name: str
    t_compute: float
    t_comm: float
    description: str

    def model(self) -> TimingModel:
        # the observed communication time enters as a fixed per-round cost with zero payload
        return TimingModel(t_compute=self.t_compute, fixed_overhead=self.t_comm)

    def utilization(self) -> float:
        return simulate_timing(0, 0, self.model())[1]


PRESETS = {
    p.name: p
    for p in (
        TimingPreset("reference-72b", 20 * 60, 70.0, "72B, R=20, H=30, 8xB200 per peer"),
        TimingPreset("intellect-1", 38 * 60, 8.3 * 60, "INTELLECT-1 10B, H=100, ~14 nodes"),
        TimingPreset("sparseloco-8b", 4.5 * 60, 12.0, "SparseLoCo 8B, R=15, H=30, 8xH200 per peer"),
    )
}


def timeline(t_compute: float, t_comm: float, window: float = 7200.0) -> list[tuple[int, str, float, float]]:
    """Alternating compute/communicate segments covering ``window`` seconds: (round, phase, start, end)."""
    rows, t, r = [], 0.0, 0
    while t < window:
        for phase, dur in (("compute", t_compute), ("communicate", t_comm)):
            end = min(t + dur, window)
            if end > t:
                rows.append((r, phase, t, end))
            t = end
            if t >= window:
                break
        r += 1
    return rows
