"""Desk-scale differentiable tasks with analytic gradients and sharded synthetic data.

Shards are drawn around a shared planted model, each with its own perturbation
(``heterogeneity``) so an update fit to one peer's shards helps those shards more
than arbitrary others.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import InvalidArgument, InvalidData, ParamVector, Rng

TASK_KINDS = ("quadratic", "logistic", "mlp")

Batch = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class Shard:
    shard_id: int
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Shard):
            return NotImplemented
        return (
            self.shard_id == other.shard_id
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


@dataclass(frozen=True)
class ShardAssigner:
    """Maps a peer's join index to its shard ids.

    Every peer holds ``round(overlap * per_peer)`` shards from one common pool plus a
    private block cut from a seeded permutation of the remaining shards, so any two
    peers whose private blocks differ overlap in exactly the common part.
    """

    n_shards: int
    per_peer: int
    overlap: float
    seed: int

    @property
    def n_common(self) -> int:
        return min(int(round(self.overlap * self.per_peer)), self.per_peer)

    def _pools(self) -> tuple[np.ndarray, np.ndarray]:
        perm = Rng.for_purpose(self.seed, "shard-assign").generator().permutation(self.n_shards)
        return perm[: self.n_common], perm[self.n_common :]

    def assign(self, peer_index: int) -> frozenset[int]:
        common, rest = self._pools()
        n_private = self.per_peer - self.n_common
        if n_private == 0 or rest.size == 0:
            return frozenset(int(s) for s in common) or frozenset({int(rest[0])})
        n_blocks = max(1, rest.size // n_private)
        block = peer_index % n_blocks
        private = rest[block * n_private : (block + 1) * n_private]
        return frozenset(int(s) for s in np.concatenate([common, private]))

    def unassigned(self, peer_index: int) -> frozenset[int]:
        return frozenset(range(self.n_shards)) - self.assign(peer_index)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True, eq=False)
class Task:
    kind: str
    layout: tuple
    shards: dict[int, Shard]
    planted: ParamVector
    n_classes: int = 2
    hidden: int = 0
    init_value: float = 0.0
    _pool: Batch | None = field(default=None, repr=False)
    _index: tuple | None = field(default=None, repr=False)

    # -- evaluators ---------------------------------------------------------

    def loss(self, params: ParamVector, batch: Batch) -> float:
        return self._loss_grad(params, batch, want_grad=False)[0]

    def gradient(self, params: ParamVector, batch: Batch) -> ParamVector:
        return params.with_values(self._loss_grad(params, batch, want_grad=True)[1])

    def loss_and_gradient(self, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
        f, g = self._loss_grad(params, batch, want_grad=True)
        return f, params.with_values(g)

    def grad_values(self, vals: np.ndarray, batch: Batch) -> np.ndarray:
        """Unchecked array-level gradient for hot loops; callers guarantee finite inputs."""
        return self._eval(vals, batch, want_loss=False, want_grad=True)[1]

    def _loss_grad(self, params: ParamVector, batch: Batch, want_grad: bool):
        vals = params.values
        if not np.all(np.isfinite(vals)):
            raise InvalidData("non-finite parameters")
        return self._eval(vals, batch, want_loss=True, want_grad=want_grad)

    def _eval(self, vals: np.ndarray, batch: Batch, want_loss: bool, want_grad: bool):
        X, y = batch
        n = y.shape[0]
        if n == 0:
            raise InvalidArgument("empty batch")
        if self.kind == "quadratic":
            r = X @ vals - y
            f = 0.5 * float(r @ r) / n if want_loss else None
            return f, (X.T @ r / n if want_grad else None)
        if self.kind == "logistic":
            w, b = vals[:-1], vals[-1]
            z = X @ w + b
            f = float(np.mean(np.logaddexp(0.0, z) - y * z)) if want_loss else None
            if not want_grad:
                return f, None
            d = (_sigmoid(z) - y) / n
            return f, np.concatenate([X.T @ d, [d.sum()]])
        if self.kind == "mlp":
            W1, b1, W2, b2 = self._unflatten(vals)
            h = np.tanh(X @ W1.T + b1)
            logits = h @ W2.T + b2
            shift = logits - logits.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shift).sum(axis=1))
            yi = y.astype(np.int64)
            f = float(np.mean(logz - shift[np.arange(n), yi])) if want_loss else None
            if not want_grad:
                return f, None
            p = np.exp(shift - logz[:, None])
            p[np.arange(n), yi] -= 1.0
            p /= n
            gW2 = p.T @ h
            gb2 = p.sum(axis=0)
            dh = (p @ W2) * (1.0 - h * h)
            gW1 = dh.T @ X
            gb1 = dh.sum(axis=0)
            return f, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
        raise InvalidArgument(f"unknown task kind {self.kind!r}")

    def _unflatten(self, vals: np.ndarray):
        out, pos = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(vals[pos : pos + n].reshape(shape))
            pos += n
        return out

    # -- data access --------------------------------------------------------

    def init_params(self, seed: int = 0) -> ParamVector:
        n = self.planted.values.size
        if self.kind == "mlp":
            g = Rng.for_purpose(seed, "init").generator()
            t = self.planted.tensors()
            parts = []
            for name in ("w1", "b1", "w2", "b2"):
                shape = t[name].shape
                scale = 1.0 / np.sqrt(shape[-1]) if name.startswith("w") else 0.0
                parts.append((g.standard_normal(shape) * scale).ravel())
            return ParamVector(np.concatenate(parts), self.layout)
        return ParamVector(np.full(n, self.init_value), self.layout)

    def sample_batch(self, shard_ids: Iterable[int], batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform shard per example, then a uniform row inside that shard."""
        ids = shard_ids if isinstance(shard_ids, np.ndarray) else np.array(sorted(shard_ids), dtype=np.int64)
        if ids.size == 0:
            raise InvalidArgument("no shards to sample from")
        X, y = self.full_batch()
        starts, lens = self._offsets()
        picks = ids[rng.integers(0, ids.size, size=batch_size)]
        rows = starts[picks] + rng.integers(0, lens[picks])
        return X[rows], y[rows]

    def _offsets(self) -> tuple[np.ndarray, np.ndarray]:
        if self._index is None:
            n = max(self.shards) + 1
            lens = np.zeros(n, dtype=np.int64)
            for sid, shard in self.shards.items():
                lens[sid] = len(shard)
            starts = np.zeros(n, dtype=np.int64)
            starts[sorted(self.shards)] = np.cumsum([0] + [lens[i] for i in sorted(self.shards)][:-1])
            object.__setattr__(self, "_index", (starts, lens))
        return self._index

    def full_batch(self, shard_ids: Iterable[int] | None = None) -> Batch:
        if shard_ids is None:
            if self._pool is None:
                ids = sorted(self.shards)
                pool = (
                    np.concatenate([self.shards[i].features for i in ids]),
                    np.concatenate([self.shards[i].labels for i in ids]),
                )
                object.__setattr__(self, "_pool", pool)
            return self._pool
        ids = sorted(shard_ids)
        return (
            np.concatenate([self.shards[i].features for i in ids]),
            np.concatenate([self.shards[i].labels for i in ids]),
        )

    def train_loss(self, params: ParamVector) -> float:
        return self.loss(params, self.full_batch())


def _layout_for(kind: str, dim: int, hidden: int, n_classes: int) -> tuple:
    if kind == "quadratic":
        return (("x", (dim,)),)
    if kind == "logistic":
        return (("w", (dim,)), ("b", (1,)))
    if kind == "mlp":
        return (("w1", (hidden, dim)), ("b1", (hidden,)), ("w2", (n_classes, hidden)), ("b2", (n_classes,)))
    raise InvalidArgument(f"unknown task kind {kind!r}")


DEFAULT_DIMS = {"quadratic": 64, "logistic": 256, "mlp": 16}


def make_shards(
    kind: str,
    n_shards: int = 64,
    overlap: float = 0.25,
    seed: int = 0,
    *,
    examples_per_shard: int = 512,
    dim: int | None = None,
    per_peer: int = 4,
    heterogeneity: float = 0.5,
    noise: float = 0.1,
    hidden: int = 64,
    n_classes: int = 4,
) -> tuple[Task, ShardAssigner]:
    """Build a task with ``n_shards`` deterministic synthetic shards and its peer assigner."""
    if kind not in TASK_KINDS:
        raise InvalidArgument(f"task kind must be one of {TASK_KINDS}, got {kind!r}")
    if n_shards < 1:
        raise InvalidArgument("need at least one shard")
    if not 0 <= overlap < 1:
        raise InvalidArgument("overlap must lie in [0, 1)")
    dim = DEFAULT_DIMS[kind] if dim is None else dim
    if kind != "mlp":
        n_classes = 2
        hidden = 0
    layout = _layout_for(kind, dim, hidden, n_classes)
    root = Rng.for_purpose(seed, f"task-{kind}")
    g = root.generator("planted")
    init_value = 0.0
    if kind == "quadratic":
        # planted solution stays well away from zero (and from the init at 2.0)
        planted = g.uniform(0.5, 1.5, size=dim)
        init_value = 2.0
    elif kind == "logistic":
        planted = np.concatenate([g.standard_normal(dim) * 2.0 / np.sqrt(dim), [0.0]])
    else:
        planted = np.concatenate(
            [
                (g.standard_normal((hidden, dim)) * 2.0 / np.sqrt(dim)).ravel(),
                np.zeros(hidden),
                (g.standard_normal((n_classes, hidden)) * 3.0 / np.sqrt(hidden)).ravel(),
                np.zeros(n_classes),
            ]
        )
    planted_pv = ParamVector(planted, layout)

    shards = {}
    for sid in range(n_shards):
        sg = root.generator("shard", sid)
        X = sg.standard_normal((examples_per_shard, dim))
        local = planted * (1.0 + heterogeneity * sg.standard_normal(planted.size))
        if kind == "quadratic":
            y = X @ local + noise * sg.standard_normal(examples_per_shard)
        elif kind == "logistic":
            p = _sigmoid(X @ local[:-1] + local[-1])
            y = (sg.uniform(size=examples_per_shard) < p).astype(np.float64)
        else:
            pv = ParamVector(local, layout).tensors()
            h = np.tanh(X @ pv["w1"].T + pv["b1"])
            logits = h @ pv["w2"].T + pv["b2"]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            u = sg.uniform(size=(examples_per_shard, 1))
            y = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), n_classes - 1).astype(np.float64)
        shards[sid] = Shard(sid, X, y)
    task = Task(kind, layout, shards, planted_pv, n_classes=n_classes, hidden=hidden, init_value=init_value)
    return task, ShardAssigner(n_shards, min(per_peer, n_shards), overlap, seed)


# ---------------------------------------------------------------------------
# shard records: u32 record length | payload
# payload: b"SHRD" | shard_id u32 | n u32 | d u32 | features f64[n*d] | labels f64[n]   (big-endian)

_SHARD_HEAD = struct.Struct(">4sIII")


def encode_shard(shard: Shard) -> bytes:
    n, d = shard.features.shape
    payload = (
        _SHARD_HEAD.pack(b"SHRD", shard.shard_id, n, d)
        + np.asarray(shard.features, dtype=">f8").tobytes()
        + np.asarray(shard.labels, dtype=">f8").tobytes()
    )
    return struct.pack(">I", len(payload)) + payload


def decode_shards(data: bytes) -> list[Shard]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise InvalidData("truncated shard record length")
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        payload = data[pos : pos + length]
        if len(payload) != length or length < _SHARD_HEAD.size:
            raise InvalidData("truncated shard record")
        magic, sid, n, d = _SHARD_HEAD.unpack_from(payload, 0)
        if magic != b"SHRD" or length != _SHARD_HEAD.size + 8 * (n * d + n):
            raise InvalidData("malformed shard record")
        off = _SHARD_HEAD.size
        X = np.frombuffer(payload, dtype=">f8", count=n * d, offset=off).astype(np.float64).reshape(n, d)
        y = np.frombuffer(payload, dtype=">f8", count=n, offset=off + 8 * n * d).astype(np.float64)
        out.append(Shard(sid, X, y))
        pos += length
    return out
