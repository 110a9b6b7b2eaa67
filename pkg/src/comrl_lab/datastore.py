"""Offline dataset container, the CMRLDS01 file format, and context/RL samplers."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envgen
from .envgen import PolicyCheckpoint, TaskSpec

MAGIC = b"CMRLDS01"


class DatasetFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class TaskBuffer:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    episodes: list            # [(checkpoint id, length), ...] in storage order
    _starts: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.rew)

    @property
    def episode_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.episodes)), [ln for _, ln in self.episodes]).astype(np.int64)

    def valid_starts(self, n: int) -> np.ndarray:
        """Start offsets of every length-n window lying inside one episode."""
        if n not in self._starts:
            out, pos = [], 0
            for _, ln in self.episodes:
                if ln >= n:
                    out.append(np.arange(pos, pos + ln - n + 1))
                pos += ln
            self._starts[n] = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        return self._starts[n]


@dataclass
class OfflineDataset:
    family: str
    state_dim: int
    action_dim: int
    tasks: list
    checkpoints: list
    buffers: dict             # task_id -> TaskBuffer
    seed: int = 0
    _flat: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_rollouts(cls, family, tasks, ckpts, rows, obs, act, rew, nxt, seed):
        buffers = {}
        for ti, task in enumerate(tasks):
            idx = [k for k, (t, _) in enumerate(rows) if t == ti]
            h = obs.shape[1]
            buffers[task.task_id] = TaskBuffer(
                obs[idx].reshape(-1, obs.shape[2]), act[idx].reshape(-1, act.shape[2]),
                rew[idx].reshape(-1), nxt[idx].reshape(-1, nxt.shape[2]),
                [(rows[k][1], h) for k in idx])
        return cls(family, envgen.STATE_DIM[family], envgen.ACTION_DIM, list(tasks), list(ckpts), buffers, seed)

    @property
    def task_ids(self) -> list:
        return [t.task_id for t in self.tasks]

    def task(self, task_id) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"task {task_id} not in dataset")

    def n_transitions(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    @property
    def feature_dim(self) -> int:
        return 2 * self.state_dim + self.action_dim + 1

    def subset(self, task_ids) -> "OfflineDataset":
        keep = set(task_ids)
        return OfflineDataset(self.family, self.state_dim, self.action_dim,
                              [t for t in self.tasks if t.task_id in keep], list(self.checkpoints),
                              {k: v for k, v in self.buffers.items() if k in keep}, self.seed)

    def merged(self, other: "OfflineDataset") -> "OfflineDataset":
        """Union of two datasets over disjoint task ids; checkpoint ids of ``other`` are shifted."""
        if other.family != self.family:
            raise ValueError("cannot merge datasets of different families")
        if set(self.buffers) & set(other.buffers):
            raise ValueError("datasets share task ids")
        off = len(self.checkpoints)
        shifted = {k: TaskBuffer(b.obs, b.act, b.rew, b.next_obs, [(c + off, ln) for c, ln in b.episodes])
                   for k, b in other.buffers.items()}
        return OfflineDataset(self.family, self.state_dim, self.action_dim, self.tasks + other.tasks,
                              self.checkpoints + other.checkpoints, {**self.buffers, **shifted}, self.seed)

    def flat(self, n=None):
        """Cached row-stacked feature table for fast sampling.

        Returns (features, row of each task id, row offsets, buffer lengths) and, when
        ``n`` is given, also (window starts, first start per task, start counts).
        """
        if "table" not in self._flat:
            ids = list(self.buffers)
            bufs = [self.buffers[t] for t in ids]
            table = np.concatenate([features(b.obs, b.act, b.rew, b.next_obs) for b in bufs])
            lens = np.array([len(b) for b in bufs], dtype=np.int64)
            offs = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.int64)
            self._flat["table"] = (table, {t: i for i, t in enumerate(ids)}, offs, lens)
        base = self._flat["table"]
        if n is None:
            return base
        if n not in self._flat:
            _, _, offs, _ = base
            starts = [offs[i] + self.buffers[t].valid_starts(n) for i, t in enumerate(self.buffers)]
            counts = np.array([len(x) for x in starts], dtype=np.int64)
            first = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
            self._flat[n] = (np.concatenate(starts).astype(np.int64), first, counts)
        return base + self._flat[n]

    def transitions(self, task_id) -> list:
        b = self.buffers[task_id]
        return [envgen.Transition(b.obs[i], b.act[i], float(b.rew[i]), b.next_obs[i], task_id)
                for i in range(len(b))]


# ---------------------------------------------------------------- file format

def _header(ds: OfflineDataset) -> dict:
    return {
        "family": ds.family,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "seed": ds.seed,
        "tasks": [{"task_id": t.task_id, "params": list(t.params), "horizon": t.horizon, "gamma": t.gamma}
                  for t in ds.tasks],
        "checkpoints": [{"task_id": c.task_id, "tier": c.tier, "noise_scale": c.noise_scale, "seed": c.seed,
                         "params": list(c.params)} for c in ds.checkpoints],
        "episodes": [[list(e) for e in ds.buffers[t.task_id].episodes] for t in ds.tasks],
    }


def save(ds: OfflineDataset, path) -> None:
    head = json.dumps(_header(ds), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(head)), head]
    for t in ds.tasks:
        b = ds.buffers[t.task_id]
        rows = np.concatenate([b.obs, b.act, b.rew[:, None], b.next_obs], axis=1) if len(b) else \
            np.zeros((0, ds.feature_dim))
        chunks.append(struct.pack("<Q", len(b)))
        chunks.append(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> OfflineDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise DatasetFormatError("bad magic", 0)
    if len(buf) < 12:
        raise DatasetFormatError("truncated header length", 8)
    (hlen,) = struct.unpack("<I", buf[8:12])
    if 12 + hlen > len(buf):
        raise DatasetFormatError("truncated JSON header", 12)
    try:
        head = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"malformed JSON header: {exc}", 12) from exc
    family, ds_, da = head["family"], head["state_dim"], head["action_dim"]
    width = 2 * ds_ + da + 1
    tasks = [TaskSpec(family, t["task_id"], tuple(t["params"]), t["horizon"], t["gamma"]) for t in head["tasks"]]
    ckpts = [PolicyCheckpoint(c["task_id"], c["tier"], c["noise_scale"], c["seed"], tuple(c["params"]), family)
             for c in head["checkpoints"]]
    pos = 12 + hlen
    buffers = {}
    for t, eps in zip(tasks, head["episodes"]):
        if pos + 8 > len(buf):
            raise DatasetFormatError(f"truncated count for task {t.task_id}", pos)
        (count,) = struct.unpack("<Q", buf[pos:pos + 8])
        pos += 8
        episodes = [(int(c), int(n)) for c, n in eps]
        if sum(n for _, n in episodes) != count:
            raise DatasetFormatError(f"task {t.task_id}: header episode lengths disagree with payload count {count}",
                                     pos - 8)
        nbytes = count * width * 8
        if pos + nbytes > len(buf):
            raise DatasetFormatError(f"truncated payload for task {t.task_id}", pos)
        rows = np.frombuffer(buf[pos:pos + nbytes], dtype="<f8").reshape(count, width).astype(np.float64)
        pos += nbytes
        buffers[t.task_id] = TaskBuffer(rows[:, :ds_].copy(), rows[:, ds_:ds_ + da].copy(),
                                        rows[:, ds_ + da].copy(), rows[:, ds_ + da + 1:].copy(), episodes)
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after last task payload", pos)
    return OfflineDataset(family, ds_, da, tasks, ckpts, buffers, head["seed"])


# ---------------------------------------------------------------- sampling

@dataclass
class ContextBatch:
    """Context segments stacked as features (B, n, 2*ds+da+1) in (s, a, r, s') order."""

    task_ids: np.ndarray
    features: np.ndarray
    origins: list

    @property
    def n(self) -> int:
        return self.features.shape[1]


def features(obs, act, rew, nxt) -> np.ndarray:
    return np.concatenate([obs, act, rew[..., None], nxt], axis=-1)


def split_features(feat: np.ndarray, state_dim: int, action_dim: int):
    s = feat[..., :state_dim]
    a = feat[..., state_dim:state_dim + action_dim]
    r = feat[..., state_dim + action_dim]
    s2 = feat[..., state_dim + action_dim + 1:]
    return s, a, r, s2


def sample_context(ds: OfflineDataset, task_id, n, mode="IID", ckpt=None, rng=None) -> ContextBatch:
    """One length-n context for ``task_id``; OOD contexts are rolled out fresh by ``ckpt``."""
    rng = rng if rng is not None else np.random.default_rng()
    if mode == "IID":
        return sample_contexts(ds, [task_id], n, rng)
    if mode != "OOD":
        raise ValueError(f"unknown context mode {mode!r}")
    if ckpt is None:
        raise ValueError("OOD context requires a behavior-policy checkpoint")
    ckpt_id = ckpt if isinstance(ckpt, (int, np.integer)) else ds.checkpoints.index(ckpt)
    return ood_contexts(ds, [task_id], [ckpt_id], n, rng)


def sample_contexts(ds: OfflineDataset, task_ids, n, rng) -> ContextBatch:
    """IID contexts: one contiguous within-episode window per requested task."""
    table, row, _, lens, starts, first, counts = ds.flat(n)
    k = np.array([row[t] for t in task_ids], dtype=np.int64)
    for tid, i in zip(task_ids, k):
        if lens[i] < n:
            raise ValueError(f"task {tid}: buffer has {lens[i]} transitions, context needs {n}")
        if counts[i] == 0:
            raise ValueError(f"task {tid}: no episode is at least {n} steps long")
    pick = (rng.random(len(k)) * counts[k]).astype(np.int64)
    s0 = starts[first[k] + pick]
    feats = table[s0[:, None] + np.arange(n)[None, :]]
    return ContextBatch(np.asarray(task_ids), feats, ["IID"] * len(task_ids))


def ood_contexts(ds: OfflineDataset, task_ids, ckpt_ids, n, rng, checkpoints=None) -> ContextBatch:
    """Roll each checkpoint in its paired task and keep a contiguous length-n window.

    ``checkpoints`` overrides the table the ids index into (default: the dataset's own).
    """
    table = ds.checkpoints if checkpoints is None else checkpoints
    tasks = [ds.task(t) for t in task_ids]
    ckpts = [table[c] for c in ckpt_ids]
    horizon = tasks[0].horizon
    if n > horizon:
        raise ValueError(f"context length {n} exceeds horizon {horizon}")
    policy = envgen.behavior_policy(ds.family, ckpts, rng)
    obs, act, rew, nxt = envgen.rollout_batch(ds.family, envgen.param_matrix(tasks), policy, horizon)
    off = rng.integers(0, horizon - n + 1, size=len(tasks))
    sel = off[:, None] + np.arange(n)[None, :]
    rows = np.arange(len(tasks))[:, None]
    feat = features(obs[rows, sel], act[rows, sel], rew[rows, sel], nxt[rows, sel])
    return ContextBatch(np.asarray(task_ids), feat, [f"OOD({c})" for c in ckpt_ids])


def coverage_pairs(task_ids, n_checkpoints) -> list:
    """Every (task, checkpoint id) pair exactly once, task-major."""
    return [(t, c) for t in task_ids for c in range(n_checkpoints)]


def sample_rl_batch(ds: OfflineDataset, task_id, batch_size=256, rng=None) -> dict:
    """Uniform with-replacement transitions from one task buffer."""
    rng = rng if rng is not None else np.random.default_rng()
    b = ds.buffers[task_id]
    if len(b) == 0:
        raise ValueError(f"task {task_id}: empty buffer")
    idx = rng.integers(0, len(b), size=batch_size)
    return {"obs": b.obs[idx], "act": b.act[idx], "rew": b.rew[idx], "next_obs": b.next_obs[idx],
            "done": np.zeros(batch_size)}


def sample_rl_batches(ds: OfflineDataset, task_ids, per_task, rng) -> dict:
    """``per_task`` transitions from each listed task, stacked; ``slot`` names the source position."""
    table, row, offs, lens = ds.flat()
    k = np.array([row[t] for t in task_ids], dtype=np.int64)
    if np.any(lens[k] == 0):
        raise ValueError("empty task buffer in RL batch")
    slot = np.repeat(np.arange(len(task_ids)), per_task)
    idx = offs[k][slot] + (rng.random(len(slot)) * lens[k][slot]).astype(np.int64)
    s, a, r, s2 = split_features(table[idx], ds.state_dim, ds.action_dim)
    return {"obs": s, "act": a, "rew": r, "next_obs": s2, "done": np.zeros(len(idx)), "slot": slot}
