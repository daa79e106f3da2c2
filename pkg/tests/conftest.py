import pytest

from sparseloco.config import from_dict


def small_config(**over):
    """A fast quadratic swarm; keyword sections are merged into the defaults below."""
    base = {
        "seed": 0,
        "task": {"kind": "quadratic", "dim": 32, "n_shards": 8, "examples_per_shard": 64, "shards_per_peer": 2},
        "compression": {"chunk": 64, "topk": 8},
        "optim": {
            "H": 5,
            "lr": {"warmup_steps": 5, "peak": 0.05, "floor": 0.005, "flatten_start": 100, "flatten_length": 10, "total_steps": 200},
        },
        "gauntlet": {"cap": 4, "eval_batch_size": 32},
        "churn": {"initial_peers": 6, "p_leave": 0.0, "join_rate": 0.0, "mix": {"honest": 1.0}},
    }
    for key, value in over.items():
        if isinstance(value, dict):
            merged = dict(base.get(key, {}))
            for k, v in value.items():
                if isinstance(v, dict) and isinstance(merged.get(k), dict):
                    merged[k] = {**merged[k], **v}
                else:
                    merged[k] = v
            base[key] = merged
        else:
            base[key] = value
    return from_dict(base)


@pytest.fixture
def make_config():
    return small_config
