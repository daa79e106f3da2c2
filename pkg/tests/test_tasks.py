import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseloco.core import InvalidArgument, InvalidData, ParamVector
from sparseloco.tasks import ShardAssigner, Task, decode_shards, encode_shard, make_shards


def fd_gradient(task, params, batch, h=1e-6):
    x = params.values
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (task.loss(params.with_values(x + e), batch) - task.loss(params.with_values(x - e), batch)) / (2 * h)
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


SMALL = {
    "quadratic": dict(dim=12),
    "logistic": dict(dim=10),
    "mlp": dict(dim=5, hidden=6, n_classes=3),
}


@pytest.mark.parametrize("kind", ["quadratic", "logistic", "mlp"])
def test_gradient_matches_finite_differences(kind):
    task, assigner = make_shards(kind, 4, 0.0, seed=3, examples_per_shard=40, **SMALL[kind])
    rng = np.random.default_rng(11)
    n = task.planted.values.size
    for _ in range(20):
        params = ParamVector(rng.standard_normal(n), task.layout)
        batch = task.sample_batch([0, 1], 16, rng)
        assert rel_err(task.gradient(params, batch).values, fd_gradient(task, params, batch)) < 1e-5


def test_quadratic_identity_case():
    layout = (("x", (3,)),)
    task = Task("quadratic", layout, {}, ParamVector.zeros(layout))
    batch = (np.eye(3), np.zeros(3))
    x = ParamVector.zeros(layout)
    f, g = task.loss_and_gradient(x, batch)
    assert f == 0.0 and np.all(g.values == 0)


def test_quadratic_known_value():
    layout = (("x", (2,)),)
    task = Task("quadratic", layout, {}, ParamVector.zeros(layout))
    batch = (np.eye(2), np.array([1.0, 3.0]))
    # mean over 2 rows of 0.5 * r^2 with r = (-1, -3)
    assert task.loss(ParamVector.zeros(layout), batch) == pytest.approx(0.5 * (1 + 9) / 2)


def test_logistic_at_zero_is_ln2():
    task, _ = make_shards("logistic", 2, 0.0, seed=0, examples_per_shard=50, dim=8)
    w = ParamVector.zeros(task.layout)
    assert task.loss(w, task.full_batch()) == pytest.approx(math.log(2), rel=1e-12)


def test_mlp_uniform_logits_is_ln_classes():
    task, _ = make_shards("mlp", 2, 0.0, seed=0, examples_per_shard=50, dim=4, hidden=5, n_classes=4)
    assert task.loss(ParamVector.zeros(task.layout), task.full_batch()) == pytest.approx(math.log(4))


def test_rejects_nonfinite_params():
    task, _ = make_shards("logistic", 2, 0.0, seed=0, examples_per_shard=10, dim=3)
    bad = ParamVector.zeros(task.layout)
    object.__setattr__(bad, "values", np.array([np.nan, 0, 0, 0]))
    with pytest.raises(InvalidData):
        task.loss(bad, task.full_batch())


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_full_batch_gradient_descent_is_monotone(kind):
    task, _ = make_shards(kind, 4, 0.0, seed=2, examples_per_shard=64, **SMALL[kind])
    batch = task.full_batch()
    x = task.init_params(0)
    losses = [task.loss(x, batch)]
    for _ in range(50):
        x = x.with_values(x.values - 0.05 * task.gradient(x, batch).values)
        losses.append(task.loss(x, batch))
    assert all(b < a for a, b in zip(losses, losses[1:]))


class TestShards:
    def test_deterministic(self):
        a, _ = make_shards("logistic", 4, 0.25, seed=9, examples_per_shard=16, dim=6)
        b, _ = make_shards("logistic", 4, 0.25, seed=9, examples_per_shard=16, dim=6)
        assert all(a.shards[i] == b.shards[i] for i in range(4))
        c, _ = make_shards("logistic", 4, 0.25, seed=10, examples_per_shard=16, dim=6)
        assert not a.shards[0] == c.shards[0]

    def test_default_sizes(self):
        task, _ = make_shards("logistic")
        assert len(task.shards) == 64 and len(task.shards[0]) == 512
        assert task.planted.values.size == 257
        mlp, _ = make_shards("mlp")
        assert [s for _, s in mlp.layout] == [(64, 16), (64,), (4, 64), (4,)]

    def test_zero_overlap_disjoint(self):
        a = ShardAssigner(64, 4, 0.0, seed=1)
        sets = [a.assign(i) for i in range(16)]
        for i in range(16):
            assert len(sets[i]) == 4
            for j in range(i):
                assert not sets[i] & sets[j]
        assert set().union(*sets) == set(range(64))

    @given(st.integers(0, 1000), st.integers(0, 31), st.integers(0, 31))
    def test_half_overlap(self, seed, i, j):
        a = ShardAssigner(64, 4, 0.5, seed=seed)
        A, B = a.assign(i), a.assign(j)
        ratio = len(A & B) / len(A)
        if A != B:
            assert 0.4 <= ratio <= 0.6

    def test_unassigned_is_complement(self):
        a = ShardAssigner(10, 3, 0.0, seed=0)
        assert a.assign(2) | a.unassigned(2) == set(range(10))
        assert not a.assign(2) & a.unassigned(2)

    def test_sample_batch_stays_in_assignment(self):
        task, _ = make_shards("quadratic", 8, 0.0, seed=0, examples_per_shard=20, dim=4)
        allowed = {tuple(r) for s in (3, 5) for r in task.shards[s].features}
        X, y = task.sample_batch([3, 5], 200, np.random.default_rng(0))
        assert X.shape == (200, 4) and all(tuple(r) in allowed for r in X)
        with pytest.raises(InvalidArgument):
            task.sample_batch([], 4, np.random.default_rng(0))

    def test_record_round_trip(self):
        task, _ = make_shards("mlp", 3, 0.0, seed=4, examples_per_shard=7, dim=3, hidden=2, n_classes=2)
        blob = b"".join(encode_shard(task.shards[i]) for i in range(3))
        back = decode_shards(blob)
        assert [s.shard_id for s in back] == [0, 1, 2]
        assert all(b == task.shards[b.shard_id] for b in back)
        with pytest.raises(InvalidData):
            decode_shards(blob[:-1])

    def test_bad_arguments(self):
        with pytest.raises(InvalidArgument):
            make_shards("cnn")
        with pytest.raises(InvalidArgument):
            make_shards("logistic", overlap=1.0)
