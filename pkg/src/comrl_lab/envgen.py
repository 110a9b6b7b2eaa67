"""Synthetic multi-task MDP families, tiered behavior policies and data collection.

All four families share a 2-D action box. Dynamics are pure functions of
(task params, state, action), implemented once in batched form; the
single-step helpers below wrap the batched kernels so logged transitions and
relabeled transitions go through identical arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("PointDir", "PointVel", "PointMassParam", "GridGoal")
TIERS = ("random", "medium", "expert")
NOISE_SCALES = {"random": math.inf, "medium": 0.5, "expert": 0.05}

STATE_DIM = {"PointDir": 2, "PointVel": 2, "PointMassParam": 4, "GridGoal": 2}
ACTION_DIM = 2
ARENA = 5.0
DT = 0.1
GRID = 5
MASS_GOAL = np.array([1.0, 1.0])
# GridGoal moves, indexed 0..3
MOVES = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class TaskSpec:
    family: str
    task_id: int
    params: tuple
    horizon: int = 50
    gamma: float = 0.99

    def __post_init__(self):
        check_params(self.family, self.params)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class PolicyCheckpoint:
    """A logged behavior policy: the expert of ``task_id`` plus tier noise."""

    task_id: int
    tier: str
    noise_scale: float
    seed: int
    params: tuple = ()
    family: str = "PointDir"

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


@dataclass
class EnvState:
    obs: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    task_id: int = -1

    @property
    def behavior_x(self):
        return (self.s, self.a)

    @property
    def task_x(self):
        return (self.r, self.s_next)

    def __eq__(self, other):
        return (isinstance(other, Transition) and self.task_id == other.task_id
                and self.r == other.r and np.array_equal(self.s, other.s)
                and np.array_equal(self.a, other.a) and np.array_equal(self.s_next, other.s_next))


@dataclass
class ClipCounter:
    """Counts action components that fell outside the box and were clipped."""

    clipped: int = 0
    calls: int = field(default=0)


CLIP_COUNTER = ClipCounter()


def check_params(family: str, params) -> None:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    p = tuple(params)
    if family == "PointDir":
        ok = len(p) == 1 and 0.0 <= p[0] < 2 * math.pi
    elif family == "PointVel":
        ok = len(p) == 1 and 0.1 <= p[0] <= 1.0
    elif family == "PointMassParam":
        ok = len(p) == 2 and 0.5 <= p[0] <= 2.0 and 0.0 <= p[1] <= 0.5
    else:
        ok = len(p) == 1 and float(p[0]).is_integer() and 0 <= p[0] < GRID * GRID
    if not ok:
        raise ValueError(f"{family}: parameters {p} outside the family range")


def make_tasks(family: str, n: int, seed: int, start_id=0, horizon=50, gamma=0.99) -> list:
    """Draw ``n`` tasks of one family with consecutive ids."""
    rng = np.random.default_rng(seed)
    if family == "PointDir":
        params = [(float(t),) for t in rng.uniform(0.0, 2 * math.pi, n)]
    elif family == "PointVel":
        params = [(float(v),) for v in rng.uniform(0.1, 1.0, n)]
    elif family == "PointMassParam":
        params = [(float(m), float(d)) for m, d in zip(rng.uniform(0.5, 2.0, n), rng.uniform(0.0, 0.5, n))]
    elif family == "GridGoal":
        if n > GRID * GRID - 1:
            raise ValueError("GridGoal supports at most 24 distinct goal cells")
        params = [(float(g),) for g in rng.choice(np.arange(1, GRID * GRID), size=n, replace=False)]
    else:
        raise ValueError(f"unknown family {family!r}")
    return [TaskSpec(family, start_id + i, p, horizon, gamma) for i, p in enumerate(params)]


def param_matrix(tasks) -> np.ndarray:
    return np.array([t.params for t in tasks], dtype=np.float64)


# ---------------------------------------------------------------- batched kernels

def reset_batch(family: str, n: int) -> np.ndarray:
    return np.zeros((n, STATE_DIM[family]))


def clip_actions(family: str, actions: np.ndarray, counter: ClipCounter | None = CLIP_COUNTER) -> np.ndarray:
    """Map raw actions to executed ones: box clip, then unit-disk projection
    (point families) or the nearest grid move (GridGoal)."""
    a = np.asarray(actions, dtype=np.float64)
    a = a.reshape(-1, ACTION_DIM)
    if counter is not None:
        counter.clipped += int(np.count_nonzero(np.abs(a) > 1.0))
        counter.calls += 1
    a = np.clip(a, -1.0, 1.0)
    if family == "GridGoal":
        return MOVES[_move_index(a)]
    norm = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
    # tolerance keeps already-projected actions fixed under re-clipping
    return np.where(norm > 1.0 + 1e-12, a / np.maximum(norm, 1e-300), a)


def _move_index(a: np.ndarray) -> np.ndarray:
    horiz = np.abs(a[:, 0]) >= np.abs(a[:, 1])
    return np.where(horiz, np.where(a[:, 0] >= 0, 0, 1), np.where(a[:, 1] >= 0, 2, 3))


def step_batch(family: str, params: np.ndarray, states: np.ndarray, actions: np.ndarray):
    """Advance a batch of environments one step with already-executed actions."""
    s = np.asarray(states, dtype=np.float64)
    a = clip_actions(family, actions, counter=None)
    params = np.asarray(params, dtype=np.float64).reshape(len(s), -1)
    if family == "PointDir":
        nxt = np.clip(s + DT * a, -ARENA, ARENA)
        u = np.stack([np.cos(params[:, 0]), np.sin(params[:, 0])], axis=1)
        r = np.sum((nxt - s) * u, axis=1) / DT
    elif family == "PointVel":
        nxt = np.clip(s + DT * a, -ARENA, ARENA)
        d = nxt - s
        r = -np.abs(np.sqrt(np.sum(d * d, axis=1)) / DT - params[:, 0])
    elif family == "PointMassParam":
        pos, vel = s[:, :2], s[:, 2:]
        m, drag = params[:, :1], params[:, 1:2]
        vel2 = vel + (a - drag * vel) / m * DT
        pos2 = np.clip(pos + vel2 * DT, -ARENA, ARENA)
        nxt = np.concatenate([pos2, vel2], axis=1)
        diff = pos2 - MASS_GOAL
        r = -np.sqrt(np.sum(diff * diff, axis=1))
    elif family == "GridGoal":
        nxt = np.clip(s + a, 0, GRID - 1)
        cell = nxt[:, 1] * GRID + nxt[:, 0]
        r = (cell == params[:, 0]).astype(np.float64)
    else:
        raise ValueError(f"unknown family {family!r}")
    return nxt, r


def expert_batch(family: str, params: np.ndarray, states: np.ndarray) -> np.ndarray:
    s = np.asarray(states, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64).reshape(len(s), -1)
    if family == "PointDir":
        return np.stack([np.cos(params[:, 0]), np.sin(params[:, 0])], axis=1)
    if family == "PointVel":
        return np.stack([params[:, 0], np.zeros(len(s))], axis=1)
    if family == "PointMassParam":
        pos, vel = s[:, :2], s[:, 2:]
        m, drag = params[:, :1], params[:, 1:2]
        accel = 4.0 * (MASS_GOAL - pos) - 4.0 * vel
        return np.clip(m * accel + drag * vel, -1.0, 1.0)
    if family == "GridGoal":
        goal = params[:, 0].astype(np.int64)
        gx, gy = goal % GRID, goal // GRID
        dx, dy = gx - s[:, 0], gy - s[:, 1]
        out = np.zeros((len(s), 2))
        along_x = dx != 0
        out[along_x, 0] = np.sign(dx[along_x])
        along_y = ~along_x & (dy != 0)
        out[along_y, 1] = np.sign(dy[along_y])
        # at the goal: push into an adjacent wall so the agent stays put
        at_goal = ~along_x & ~along_y
        if np.any(at_goal):
            x, y = s[at_goal, 0], s[at_goal, 1]
            stay = np.zeros((int(at_goal.sum()), 2))
            stay[:, 0] = np.where(x == GRID - 1, 1.0, np.where(x == 0, -1.0, 0.0))
            no_x = stay[:, 0] == 0
            stay[no_x, 1] = np.where(y[no_x] == 0, -1.0, 1.0)
            out[at_goal] = stay
        return out
    raise ValueError(f"unknown family {family!r}")


def behavior_batch(family: str, ckpt_params: np.ndarray, noise: np.ndarray, states: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Expert-of-own-task action plus Gaussian noise; infinite noise means uniform."""
    n = len(states)
    noise = np.asarray(noise, dtype=np.float64).reshape(n)
    uniform = rng.uniform(-1.0, 1.0, size=(n, ACTION_DIM))
    gauss = rng.standard_normal((n, ACTION_DIM))
    is_random = np.isinf(noise)
    finite = np.where(is_random, 0.0, noise)[:, None]
    act = expert_batch(family, ckpt_params, states) + finite * gauss
    act = np.where(is_random[:, None], uniform, act)
    return np.clip(act, -1.0, 1.0)


def rollout_batch(family: str, env_params: np.ndarray, policy, horizon: int):
    """Roll ``policy(states, t) -> actions`` in a batch of environments from reset.

    Returns arrays obs (B,H,ds), act (B,H,da), rew (B,H), next_obs (B,H,ds)
    where ``act`` holds executed actions.
    """
    env_params = np.asarray(env_params, dtype=np.float64)
    n = len(env_params)
    s = reset_batch(family, n)
    ds = STATE_DIM[family]
    obs = np.zeros((n, horizon, ds))
    act = np.zeros((n, horizon, ACTION_DIM))
    rew = np.zeros((n, horizon))
    nxt = np.zeros((n, horizon, ds))
    for t in range(horizon):
        a = clip_actions(family, policy(s, t))
        s2, r = step_batch(family, env_params, s, a)
        obs[:, t], act[:, t], rew[:, t], nxt[:, t] = s, a, r, s2
        s = s2
    return obs, act, rew, nxt


def behavior_policy(family: str, ckpts, rng: np.random.Generator):
    cp = np.array([c.params for c in ckpts], dtype=np.float64)
    noise = np.array([c.noise_scale for c in ckpts], dtype=np.float64)
    return lambda states, t: behavior_batch(family, cp, noise, states, rng)


# ---------------------------------------------------------------- single-step API

def reset(task: TaskSpec, seed: int = 0) -> EnvState:
    return EnvState(reset_batch(task.family, 1)[0], 0)


def step(task: TaskSpec, state: EnvState, action) -> tuple:
    if state.t >= task.horizon:
        raise ValueError(f"episode finished: step counter {state.t} reached horizon {task.horizon}")
    a = clip_actions(task.family, np.asarray(action, dtype=np.float64)[None])
    nxt, r = step_batch(task.family, np.array([task.params]), state.obs[None], a)
    return EnvState(nxt[0], state.t + 1), float(r[0])


def expert_action(task: TaskSpec, state: EnvState) -> np.ndarray:
    return expert_batch(task.family, np.array([task.params]), state.obs[None])[0]


def behavior_action(ckpt: PolicyCheckpoint, task: TaskSpec, state: EnvState, rng) -> np.ndarray:
    if ckpt.family != task.family:
        raise ValueError("checkpoint and task belong to different families")
    return behavior_batch(task.family, np.array([ckpt.params]), np.array([ckpt.noise_scale]),
                          state.obs[None], rng)[0]


def relabel(x: Transition, source_task: TaskSpec, target_task: TaskSpec) -> Transition:
    """Keep (s, a) and regenerate (r, s') under the target task's dynamics and reward."""
    if source_task.family != target_task.family:
        raise ValueError(f"cannot relabel across families ({source_task.family} -> {target_task.family})")
    nxt, r = step_batch(target_task.family, np.array([target_task.params]), x.s[None], x.a[None])
    return Transition(x.s, x.a, float(r[0]), nxt[0], target_task.task_id)


def relabel_batch(family: str, target_params: np.ndarray, s: np.ndarray, a: np.ndarray):
    return step_batch(family, target_params, s, a)


def make_checkpoints(tasks, tiers, seed: int) -> list:
    out = []
    for t in tasks:
        for k, tier in enumerate(tiers):
            out.append(PolicyCheckpoint(t.task_id, tier, NOISE_SCALES[tier],
                                        int(seed * 1000003 + t.task_id * 31 + k), t.params, t.family))
    return out


def collect_dataset(tasks, tiers=TIERS, episodes_per_tier=5, seed=0):
    """Roll every task's own checkpoints at each tier and log all transitions."""
    from .datastore import OfflineDataset

    tasks = list(tasks)
    if not tasks:
        raise ValueError("collect_dataset needs at least one task")
    if episodes_per_tier < 1:
        raise ValueError("episodes_per_tier must be >= 1")
    family = tasks[0].family
    if any(t.family != family for t in tasks):
        raise ValueError("all tasks in a dataset must share a family")
    horizon = tasks[0].horizon
    ckpts = make_checkpoints(tasks, tiers, seed)
    # one row per episode: (task index, checkpoint index)
    rows = [(ti, ci) for ti, t in enumerate(tasks) for ci, c in enumerate(ckpts)
            if c.task_id == t.task_id for _ in range(episodes_per_tier)]
    rng = np.random.default_rng(seed)
    env_params = param_matrix([tasks[ti] for ti, _ in rows])
    policy = behavior_policy(family, [ckpts[ci] for _, ci in rows], rng)
    obs, act, rew, nxt = rollout_batch(family, env_params, policy, horizon)
    return OfflineDataset.from_rollouts(family, tasks, ckpts, rows, obs, act, rew, nxt, seed)
