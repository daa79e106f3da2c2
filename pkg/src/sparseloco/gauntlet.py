"""Validator: LossScore evaluation, fast checks, persistent ratings and contributor selection."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import codec
from .codec import CompressedDelta
from .core import ChunkGeometry, InvalidData, ParamVector, Rng, chunk_layout, layout_digest, layout_size

FLAGS = frozenset({"liveness", "sync", "finite", "norm-sane"})


class InvalidSubmission(ValueError):
    pass


@dataclass(frozen=True)
class Rating:
    mu: float = 25.0
    sigma: float = 25.0 / 3

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("rating sigma must be positive")

    @property
    def conservative(self) -> float:
        return self.mu - 2.0 * self.sigma


@dataclass(frozen=True)
class RatingConfig:
    mu0: float = 25.0
    sigma0: float = 25.0 / 3
    beta: float = 25.0 / 6
    sigma_min: float = 0.5
    sigma_max: float = 25.0 / 3
    growth: float = 0.02
    shrink: float = 0.9

    def initial(self) -> Rating:
        return Rating(self.mu0, self.sigma0)


@dataclass
class ScoreCard:
    peer_id: str
    rating: Rating = field(default_factory=Rating)
    loss_score_assigned: float | None = None
    loss_score_random: float | None = None
    failed_flags: set[str] = field(default_factory=set)
    last_evaluated_round: int = -1

    def reset_round(self) -> None:
        self.loss_score_assigned = None
        self.loss_score_random = None
        self.failed_flags = set()

    @property
    def evaluated(self) -> bool:
        return self.loss_score_assigned is not None and self.loss_score_random is not None


def decode_submission(submission: CompressedDelta, layout, geometry: ChunkGeometry) -> np.ndarray:
    size = layout_size(layout)
    return codec.decode_dense(submission, chunk_layout(layout, geometry), size, geometry)


def loss_score(
    loss_fn: Callable[[ParamVector, tuple], float],
    global_params: ParamVector,
    submission: CompressedDelta | np.ndarray,
    eval_batch: tuple,
    alpha: float,
    geometry: ChunkGeometry | None = None,
) -> float:
    """Loss before minus loss after stepping the global model by this one contribution."""
    if isinstance(submission, CompressedDelta):
        try:
            dense = decode_submission(submission, global_params.layout, geometry or ChunkGeometry())
        except (InvalidData, codec.FormatError) as exc:
            raise InvalidSubmission(str(exc)) from exc
    else:
        dense = np.asarray(submission, dtype=np.float64)
    if not np.any(dense):
        return 0.0
    try:
        stepped = global_params.with_values(global_params.values - alpha * dense)
    except InvalidData as exc:
        raise InvalidSubmission(str(exc)) from exc
    return loss_fn(global_params, eval_batch) - loss_fn(stepped, eval_batch)


def assigned_vs_random_check(card: ScoreCard) -> bool | None:
    """False if the contribution helps unassigned data strictly more than assigned data; None if not evaluated."""
    if not card.evaluated:
        return None
    return not card.loss_score_random > card.loss_score_assigned


def fast_checks(
    submission: CompressedDelta | None,
    current_round: int,
    norm_history: Sequence[float],
    layout=None,
    geometry: ChunkGeometry | None = None,
    norm_factor: float = 10.0,
) -> set[str]:
    if submission is None:
        return {"liveness"}
    layout = tuple(layout) if layout is not None else None
    failed = set()
    if submission.base_round != current_round:
        failed.add("sync")
    if layout is None:
        return failed
    if submission.layout_digest != layout_digest(layout):
        failed.add("sync")
        return failed
    try:
        dense = decode_submission(submission, layout, geometry or ChunkGeometry())
    except InvalidData:
        failed.add("sync")
        return failed
    if not np.all(np.isfinite(dense)):
        failed.add("finite")
        return failed
    if norm_history:
        med = float(np.median(norm_history))
        if float(np.linalg.norm(dense)) > norm_factor * med:
            failed.add("norm-sane")
    return failed


def _pairwise_deltas(ratings: Sequence[Rating], scores: Sequence[float], beta: float) -> list[float]:
    """Mean deltas from every pairwise two-player ordinal comparison, averaged over opponents.

    Each pair is scored win/tie/loss against the win probability implied by the prior
    ratings, so raising one peer's score can only raise its own delta and lower its
    opponents' deltas; third parties are untouched.
    """
    n = len(ratings)
    deltas = []
    for i, ri in enumerate(ratings):
        omega = 0.0
        for j, rj in enumerate(ratings):
            if j == i:
                continue
            c = math.sqrt(ri.sigma**2 + rj.sigma**2 + 2 * beta**2)
            p_win = 1.0 / (1.0 + math.exp((rj.mu - ri.mu) / c))
            outcome = 1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0
            omega += ri.sigma**2 / c * (outcome - p_win)
        deltas.append(omega / (n - 1))
    return deltas


def rating_update(
    ratings: Mapping[str, Rating],
    scores: Mapping[str, float],
    config: RatingConfig = RatingConfig(),
) -> dict[str, Rating]:
    """Update evaluated peers by rank and inflate the uncertainty of everyone else.

    Fewer than two evaluated peers is a no-op.
    """
    out = dict(ratings)
    evaluated = sorted(p for p in scores if p in ratings)
    if len(evaluated) < 2:
        return out
    current = [ratings[p] for p in evaluated]
    deltas = _pairwise_deltas(current, [scores[p] for p in evaluated], config.beta)
    for p, r, d in zip(evaluated, current, deltas):
        out[p] = Rating(r.mu + d, max(config.sigma_min, r.sigma * config.shrink))
    for p, r in ratings.items():
        if p not in scores:
            out[p] = Rating(r.mu, min(config.sigma_max, r.sigma + config.growth))
    return out


def final_score(card: ScoreCard) -> float:
    if card.failed_flags or assigned_vs_random_check(card) is False:
        return -math.inf
    return card.rating.conservative


def select_contributors(cards: Sequence[ScoreCard], cap: int) -> list[str]:
    """Up to ``cap`` best non-vetoed peers by conservative rating; ties by peer id."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    ranked = sorted(((final_score(c), c.peer_id) for c in cards), key=lambda t: (-t[0], t[1]))
    return [pid for s, pid in ranked if s > -math.inf][:cap]


@dataclass(frozen=True)
class GauntletConfig:
    cap: int = 20
    eval_fraction: float = 0.5
    eval_batches: int = 4
    eval_batch_size: int = 512
    norm_factor: float = 10.0
    norm_window: int = 5
    rating: RatingConfig = RatingConfig()


@dataclass
class ValidatorRecord:
    round: int
    evaluated: list[str]
    scores: dict[str, list[float | None]]
    failed: dict[str, list[str]]
    selected: list[str]

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "evaluated": self.evaluated,
            "scores": self.scores,
            "failed": self.failed,
            "selected": self.selected,
        }


class Validator:
    """Scores one round of submissions and keeps per-peer ratings between rounds.

    ``assigned_shards`` / ``unassigned_shards`` map a peer id to shard ids;
    ``sample_batch(shard_ids, batch_size, rng)`` and ``loss_fn(params, batch)`` come from the task.
    """

    def __init__(self, config: GauntletConfig, geometry: ChunkGeometry, seed: int):
        self.config = config
        self.geometry = geometry
        self.rng = Rng.for_purpose(seed, "validator")
        self.cards: dict[str, ScoreCard] = {}
        self.norm_history: deque[list[float]] = deque(maxlen=config.norm_window)

    def card(self, peer_id: str) -> ScoreCard:
        if peer_id not in self.cards:
            self.cards[peer_id] = ScoreCard(peer_id, self.config.rating.initial())
        return self.cards[peer_id]

    def forget(self, peer_id: str) -> None:
        self.cards.pop(peer_id, None)

    def evaluate_round(
        self,
        round_idx: int,
        submissions: Mapping[str, CompressedDelta | None],
        global_params: ParamVector,
        alpha: float,
        loss_fn: Callable,
        sample_batch: Callable,
        assigned_shards: Callable[[str], frozenset],
        unassigned_shards: Callable[[str], frozenset],
    ) -> ValidatorRecord:
        cfg = self.config
        layout = global_params.layout
        active = sorted(submissions)
        cards = [self.card(p) for p in active]
        for c in cards:
            c.reset_round()

        dense: dict[str, np.ndarray] = {}
        norms_now = []
        for pid in active:
            sub = submissions[pid]
            if sub is not None and sub.peer_id != pid:
                self.cards[pid].failed_flags.add("sync")
                continue
            if sub is not None:
                try:
                    d = decode_submission(sub, layout, self.geometry)
                    if np.all(np.isfinite(d)):
                        dense[pid] = d
                        norms_now.append(float(np.linalg.norm(d)))
                except InvalidData:
                    pass
        # past rounds only hold norms of peers that passed every check, so a failing
        # submission cannot move another peer's threshold; round 0 falls back to the current set
        history = [n for past in self.norm_history for n in past] or norms_now
        for pid in active:
            self.cards[pid].failed_flags |= fast_checks(
                submissions[pid], round_idx, history, layout, self.geometry, cfg.norm_factor
            )

        eligible = [p for p in active if not self.cards[p].failed_flags and p in dense]
        g = self.rng.generator("evaluate", round_idx)
        n_eval = min(len(eligible), max(1, int(round(cfg.eval_fraction * len(eligible))))) if eligible else 0
        chosen = sorted(g.choice(eligible, size=n_eval, replace=False).tolist()) if n_eval else []

        scores: dict[str, list[float | None]] = {}
        for pid in chosen:
            bg = self.rng.generator("batches", round_idx, pid)
            assigned, unassigned = assigned_shards(pid), unassigned_shards(pid)
            a_scores, r_scores = [], []
            for _ in range(cfg.eval_batches):
                a_batch = sample_batch(assigned, cfg.eval_batch_size, bg)
                a_scores.append(loss_score(loss_fn, global_params, dense[pid], a_batch, alpha))
                # a peer holding every shard has no unassigned data to compare against
                if unassigned:
                    r_batch = sample_batch(unassigned, cfg.eval_batch_size, bg)
                    r_scores.append(loss_score(loss_fn, global_params, dense[pid], r_batch, alpha))
            card = self.cards[pid]
            card.loss_score_assigned = float(np.mean(a_scores))
            card.loss_score_random = float(np.mean(r_scores)) if r_scores else None
            card.last_evaluated_round = round_idx
            scores[pid] = [card.loss_score_assigned, card.loss_score_random]

        # peers whose random-data gain beats their assigned-data gain rank below every passing peer
        passing = [s[0] for p, s in scores.items() if assigned_vs_random_check(self.cards[p]) is not False]
        floor = min([0.0, *passing])
        rank_scores = {}
        for pid, (a, r) in scores.items():
            rank_scores[pid] = a if r is None or r <= a else floor - (r - a)
        updated = rating_update({p: self.cards[p].rating for p in active}, rank_scores, cfg.rating)
        for pid, rating in updated.items():
            self.cards[pid].rating = rating

        self.norm_history.append([float(np.linalg.norm(dense[p])) for p in eligible])
        selected = select_contributors(cards, cfg.cap)
        failed = {p: sorted(self.cards[p].failed_flags) for p in active if self.cards[p].failed_flags}
        for pid in active:
            if assigned_vs_random_check(self.cards[pid]) is False:
                failed.setdefault(pid, []).append("assigned-vs-random")
        return ValidatorRecord(round_idx, chosen, scores, failed, selected)
