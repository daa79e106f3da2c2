"""Deterministic multi-peer round simulator.

One round: every active peer runs H inner steps from the shared parameters,
compresses its pseudo-gradient with error feedback and uploads the bytes to the
gradient store; the validator scores and selects; every peer then downloads the
selected submissions, aggregates them itself and applies the outer step. The
validator publishes a checkpoint object per round, which is what joiners load.
"""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import codec
from .blobstore import BlobStore, checkpoint_key, gradient_key
from .config import RunConfig
from .core import InvalidData, ParamVector, Rng
from .gauntlet import Validator, ValidatorRecord
from .optimizer import (
    ErrorFeedback,
    InnerOptState,
    adamw_update,
    aggregate,
    compress_with_ef,
    inner_lr_at,
    outer_step,
    pseudo_gradient,
)
from .tasks import ShardAssigner, Task, make_shards
from .timing import simulate_timing


class ConsensusError(RuntimeError):
    pass


@dataclass
class Peer:
    peer_id: str
    index: int
    params: ParamVector
    inner: InnerOptState
    ef: ErrorFeedback
    assignment: frozenset[int]
    behavior: str = "honest"
    status: str = "active"
    uploaded_bytes: int = 0


@dataclass
class RoundLog:
    round: int
    active_peers: int
    contributing_peers: int
    selected_ids: list[str]
    payload_bytes_up: int
    payload_bytes_down: int
    mean_payload_bytes: float
    t_comm: float
    utilization: float
    train_loss: float
    global_param_digest: str
    stalled: bool
    joined: list[str] = field(default_factory=list)
    departed: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)


# checkpoint object: b"SLCK" | version u8 | round u64 | config digest 32B | layout json length u32 | layout json
#                    | n u64 | float64 values (big-endian) | crc32 u32
_CKPT_HEAD = struct.Struct(">4sBQ32sI")


def encode_checkpoint(params: ParamVector, round_idx: int, config_digest: bytes) -> bytes:
    layout = json.dumps([[t, list(s)] for t, s in params.layout]).encode()
    body = (
        _CKPT_HEAD.pack(b"SLCK", 1, round_idx, config_digest.ljust(32, b"\x00")[:32], len(layout))
        + layout
        + struct.pack(">Q", params.values.size)
        + params.values.astype(">f8").tobytes()
    )
    return body + struct.pack(">I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[ParamVector, int, bytes]:
    if len(data) < _CKPT_HEAD.size + 12 or zlib.crc32(data[:-4]) != struct.unpack(">I", data[-4:])[0]:
        raise codec.FormatError("checkpoint truncated or corrupt")
    magic, version, round_idx, digest, n_layout = _CKPT_HEAD.unpack_from(data, 0)
    if magic != b"SLCK" or version != 1:
        raise codec.FormatError("not a checkpoint object")
    pos = _CKPT_HEAD.size
    layout = tuple((t, tuple(s)) for t, s in json.loads(data[pos : pos + n_layout]))
    pos += n_layout
    (n,) = struct.unpack_from(">Q", data, pos)
    pos += 8
    if pos + 8 * n + 4 != len(data):
        raise codec.FormatError("checkpoint value block has the wrong length")
    values = np.frombuffer(data, dtype=">f8", count=n, offset=pos).astype(np.float64)
    return ParamVector(values, layout), int(round_idx), bytes(digest)


class Swarm:
    def __init__(
        self,
        config: RunConfig,
        task: Task | None = None,
        assigner: ShardAssigner | None = None,
        gradient_store: BlobStore | None = None,
        checkpoint_store: BlobStore | None = None,
    ):
        self.config = config.validate()
        c = config
        if task is None:
            t = c.task
            task, assigner = make_shards(
                t.kind, t.n_shards, t.overlap, c.seed,
                examples_per_shard=t.examples_per_shard, dim=t.dim, per_peer=t.shards_per_peer,
                heterogeneity=t.heterogeneity, noise=t.noise, hidden=t.hidden, n_classes=t.n_classes,
            )
        self.task = task
        task.full_batch()
        task._offsets()
        self.assigner = assigner or ShardAssigner(len(task.shards), c.task.shards_per_peer, c.task.overlap, c.seed)
        self.geometry = c.geometry()
        self.schedule = c.schedule()
        self.outer = c.outer()
        self.adamw = c.adamw()
        self.timing = c.timing_model()
        self.quantize = c.compression.quant_bits != 0
        self.validator = Validator(c.gauntlet_config(), self.geometry, c.seed)
        self.store = gradient_store if gradient_store is not None else BlobStore()
        self.checkpoints = checkpoint_store if checkpoint_store is not None else BlobStore()
        self.config_digest = c.digest()
        self.rng = Rng(c.seed)

        self.round = 0
        self.params = task.init_params(c.seed)
        self.peers: dict[str, Peer] = {}
        self.departed: dict[str, Peer] = {}
        self.next_index = 0
        self.logs: list[RoundLog] = []
        self.validator_log: list[ValidatorRecord] = []
        self._publish_checkpoint()

        ch = c.churn
        behaviors = ch.initial_behaviors
        if behaviors is None:
            g = self.rng.generator("initial-behaviors")
            behaviors = [self._draw_behavior(g) for _ in range(ch.initial_peers)]
        for b in behaviors:
            self.add_peer(b)

    # -- peers ----------------------------------------------------------------

    def _draw_behavior(self, g: np.random.Generator) -> str:
        mix = self.config.churn.mix
        names = sorted(mix)
        w = np.array([mix[n] for n in names], dtype=np.float64)
        return names[int(g.choice(len(names), p=w / w.sum()))]

    def add_peer(self, behavior: str = "honest") -> Peer:
        """Join a peer: it loads the latest published checkpoint and starts with empty optimizer state."""
        idx = self.next_index
        self.next_index += 1
        pid = f"p{idx:06d}"
        params, _, _ = decode_checkpoint(self.checkpoints.get(checkpoint_key(self.round)))
        n = params.values.size
        peer = Peer(
            peer_id=pid,
            index=idx,
            params=params,
            inner=InnerOptState.zeros(n, self.adamw),
            ef=ErrorFeedback.zeros(n, self.config.optim.ef_beta),
            assignment=self.assigner.assign(idx),
            behavior=behavior,
        )
        self.peers[pid] = peer
        return peer

    def remove_peer(self, peer_id: str) -> None:
        peer = self.peers.pop(peer_id)
        peer.status = "departed"
        self.departed[peer_id] = peer
        self.validator.forget(peer_id)

    def active_ids(self) -> list[str]:
        return sorted(self.peers)

    def churn_step(self, rng: Rng | None = None) -> tuple[list[str], list[str]]:
        """Random departures and Poisson arrivals for the upcoming round; returns (departed, joined)."""
        rng = rng or self.rng
        ch = self.config.churn
        if ch.p_leave == 0 and ch.join_rate == 0:
            return [], []
        g = rng.generator("churn", self.round)
        leaving = [pid for pid in self.active_ids() if g.uniform() < ch.p_leave]
        for pid in leaving:
            self.remove_peer(pid)
        n_join = int(g.poisson(ch.join_rate)) if ch.join_rate > 0 else 0
        joined = [self.add_peer(self._draw_behavior(g)).peer_id for _ in range(n_join)]
        return leaving, joined

    # -- compute phase ----------------------------------------------------------

    def batch_stream(self, peer: Peer, round_idx: int) -> np.random.Generator:
        """The generator a peer draws its H inner-step batches from, in order."""
        return self.rng.generator("batch", round_idx, peer.peer_id)

    def lr_at(self, round_idx: int, h: int) -> float:
        step = min(round_idx * self.outer.H + h, self.schedule.last_step)
        return inner_lr_at(step, self.schedule)

    def local_train(self, peer: Peer, round_idx: int) -> tuple[ParamVector, InnerOptState]:
        """H AdamW steps from the shared parameters; equivalent to repeated ``inner_step`` calls."""
        g = self.batch_stream(peer, round_idx)
        x, st = self.params.values, peer.inner
        m, v, t = st.m, st.v, st.step
        shard_ids = np.array(sorted(peer.assignment), dtype=np.int64)
        for h in range(self.outer.H):
            batch = self.task.sample_batch(shard_ids, self.config.task.batch_size, g)
            t += 1
            x, m, v = adamw_update(x, m, v, t, self.task.grad_values(x, batch), self.lr_at(round_idx, h), st.hyper)
        if not np.all(np.isfinite(x)):
            raise InvalidData(f"{peer.peer_id}: local training diverged")
        return self.params.with_values(x), InnerOptState(m, v, t, st.hyper)

    def _compute(self, peer: Peer, round_idx: int):
        """Returns (payload or None, new inner state, new error feedback)."""
        if peer.behavior == "copier":
            return None, peer.inner, peer.ef
        local, inner = self.local_train(peer, round_idx)
        delta = pseudo_gradient(self.params, local)
        if peer.behavior == "noisy":
            g = self.rng.generator("noise", round_idx, peer.peer_id)
            sigma = self.config.churn.noisy_sigma
            delta = delta.with_values(delta.values + sigma * g.standard_normal(delta.values.size))
        try:
            compressed, ef = compress_with_ef(
                delta, peer.ef, self.geometry, base_round=round_idx, peer_id=peer.peer_id, quantize=self.quantize
            )
        except InvalidData:
            # not encodable (e.g. a scale beyond half precision): the peer uploads nothing
            return None, inner, peer.ef
        payload = codec.serialize(compressed)
        if peer.behavior == "dropout":
            g = self.rng.generator("dropout", round_idx, peer.peer_id)
            if g.uniform() < self.config.churn.dropout_p:
                payload = None
        return payload, inner, ef

    # -- round --------------------------------------------------------------

    def run_round(self) -> RoundLog:
        r = self.round
        active = self.active_ids()
        alpha = self.outer.alpha_at(r)
        if not active:
            return self._finish_round(r, [], [], {}, {}, stalled=True)

        peers = [self.peers[p] for p in active]
        workers = self.config.workers
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda p: self._compute(p, r), peers))
        else:
            results = [self._compute(p, r) for p in peers]
        outcome = dict(zip(active, results))

        payloads: dict[str, bytes] = {}
        for pid in active:
            data = outcome[pid][0]
            if data is not None:
                self.store.put(gradient_key(r, pid), data)
                self.peers[pid].uploaded_bytes += len(data)
                payloads[pid] = data
        victims = [p for p in active if p in payloads and self.peers[p].behavior != "copier"]
        for pid in active:
            if self.peers[pid].behavior == "copier" and victims:
                g = self.rng.generator("copy", r, pid)
                victim = victims[int(g.integers(len(victims)))]
                stolen = codec.deserialize(self.store.get(gradient_key(r, victim)))
                data = codec.serialize(stolen.with_peer_id(pid))
                self.store.put(gradient_key(r, pid), data)
                self.peers[pid].uploaded_bytes += len(data)
                payloads[pid] = data

        submissions = {}
        for pid in active:
            key = gradient_key(r, pid)
            if not self.store.exists(key):
                submissions[pid] = None
                continue
            try:
                submissions[pid] = codec.deserialize(self.store.get(key))
            except (codec.FormatError, InvalidData):
                submissions[pid] = None
        record = self.validator.evaluate_round(
            r,
            submissions,
            self.params,
            alpha,
            self.task.loss,
            self.task.sample_batch,
            lambda pid: self.peers[pid].assignment,
            lambda pid: self.assigner.unassigned(self.peers[pid].index),
        )
        self.validator_log.append(record)
        selected = record.selected
        if not selected:
            return self._finish_round(r, active, [], payloads, {}, stalled=True)

        for pid in active:
            _, inner, ef = outcome[pid]
            self.peers[pid].inner = inner
            self.peers[pid].ef = ef

        downloads: dict[str, int] = {}
        new_params = {}
        parsed: dict[bytes, codec.CompressedDelta] = {}
        for pid in active:
            # own submission first, then the others in download order
            blobs, down = [payloads[pid]] if pid in selected else [], 0
            for sid in selected:
                if sid != pid:
                    data = self.store.get(gradient_key(r, sid))
                    down += len(data)
                    blobs.append(data)
            downloads[pid] = down
            deltas = []
            for b in blobs:
                if b not in parsed:
                    parsed[b] = codec.deserialize(b)
                deltas.append(parsed[b])
            agg = aggregate(deltas, self.params.layout, self.geometry, normalize=self.config.gauntlet.median_normalize)
            new_params[pid] = outer_step(self.params, agg, alpha)
        digests = {new_params[p].digest() for p in active}
        if len(digests) != 1:
            raise ConsensusError(f"round {r}: replicas disagree ({len(digests)} distinct states)")
        self.params = new_params[active[0]]
        for pid in active:
            self.peers[pid].params = new_params[pid]
        return self._finish_round(r, active, selected, payloads, downloads, stalled=False)

    def _finish_round(self, r, active, selected, payloads, downloads, stalled) -> RoundLog:
        self.round = r + 1
        self._publish_checkpoint()
        up = sum(len(b) for b in payloads.values())
        down = sum(downloads.values())
        worst = (0.0, 1.0)
        for pid in active:
            t = simulate_timing(len(payloads.get(pid, b"")), downloads.get(pid, 0), self.timing)
            worst = max(worst, t)
        if not active:
            worst = simulate_timing(0, 0, self.timing)
        log = RoundLog(
            round=r,
            active_peers=len(active),
            contributing_peers=len(selected),
            selected_ids=list(selected),
            payload_bytes_up=up,
            payload_bytes_down=down,
            mean_payload_bytes=up / len(payloads) if payloads else 0.0,
            t_comm=worst[0],
            utilization=worst[1],
            train_loss=self.task.train_loss(self.params),
            global_param_digest=self.params.digest(),
            stalled=stalled,
        )
        self.logs.append(log)
        return log

    def _publish_checkpoint(self) -> None:
        self.checkpoints.put(checkpoint_key(self.round), encode_checkpoint(self.params, self.round, self.config_digest))

    def step(self) -> RoundLog:
        """Churn, then one round; the log records who left and joined before the round ran."""
        departed, joined = self.churn_step()
        log = self.run_round()
        log.departed, log.joined = departed, joined
        return log

    def run(self, rounds: int, callback: Callable[[RoundLog], None] | None = None) -> list[RoundLog]:
        out = []
        for _ in range(rounds):
            log = self.step()
            if callback is not None:
                callback(log)
            out.append(log)
        return out
