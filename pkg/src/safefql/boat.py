"""Safe boat navigation: a point mass in a river whose drift depends on the lateral coordinate.

All state functions are vectorised over a leading batch axis: a state is ``(..., 2)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

X_LOW = np.array([-3.0, -2.0])
X_HIGH = np.array([2.0, 2.0])
GOAL = np.array([0.5, 0.0])
REWARD_SCALE = 0.1
OBSTACLES = ((np.array([-0.5, 0.5]), 0.4), (np.array([-1.0, -1.2]), 0.5))

DT = 0.005
HORIZON = 400
N_TRAJ = 2500

DATASET_MAGIC = b"SFQD"
DATASET_VERSION = 1

Policy = Callable[[np.ndarray], np.ndarray]


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in boat dynamics input")


def dynamics_step(state, action, dt: float = DT) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    _check_finite(state, action, dt)
    x1, x2 = state[..., 0], state[..., 1]
    drift = 2.0 - 0.5 * x2 * x2
    return np.stack([x1 + (action[..., 0] + drift) * dt, x2 + action[..., 1] * dt], axis=-1)


def reward(state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    return -REWARD_SCALE * np.linalg.norm(state - GOAL, axis=-1)


def safety_margin(state) -> np.ndarray:
    """Positive inside an obstacle, negative outside (radius minus distance to centre)."""
    state = np.asarray(state, dtype=np.float64)
    margins = [r - np.linalg.norm(state - c, axis=-1) for c, r in OBSTACLES]
    return np.maximum(*margins)


def in_bounds(state) -> np.ndarray:
    state = np.asarray(state)
    return np.all((state >= X_LOW) & (state <= X_HIGH), axis=-1)


def project_to_disk(action) -> np.ndarray:
    """Radial projection onto the closed unit disk."""
    action = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(action, axis=-1, keepdims=True)
    return action / np.maximum(norm, 1.0)


def sample_disk_action(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform samples from the unit disk by rejection from the enclosing square."""
    count = 1 if n is None else n
    out = np.empty((0, 2))
    while len(out) < count:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (count - len(out)) + 8, 2))
        cand = cand[np.einsum("ij,ij->i", cand, cand) <= 1.0]
        out = np.concatenate([out, cand])
    out = out[:count]
    return out[0] if n is None else out


def sample_states(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(X_LOW, X_HIGH, size=(n, 2))


@dataclass
class TrajectoryDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    safety: np.ndarray
    next_states: np.ndarray
    n_traj: int
    horizon: int
    dt: float
    seed: int

    def __len__(self):
        return len(self.states)

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.n_traj + 1) * self.horizon

    @property
    def next_actions(self) -> np.ndarray:
        """Action taken at the following step of the same trajectory.

        The last step of each trajectory has no successor and reuses its own action.
        """
        nxt = np.empty_like(self.actions)
        nxt[:-1] = self.actions[1:]
        ends = self.offsets[1:] - 1
        nxt[ends] = self.actions[ends]
        return nxt

    def records(self) -> np.ndarray:
        return np.column_stack([self.states, self.actions, self.rewards, self.safety,
                                self.next_states]).astype(np.float32)

    def subset(self, n_traj: int) -> TrajectoryDataset:
        k = n_traj * self.horizon
        return TrajectoryDataset(self.states[:k], self.actions[:k], self.rewards[:k],
                                 self.safety[:k], self.next_states[:k], n_traj,
                                 self.horizon, self.dt, self.seed)

    def metadata(self) -> dict:
        return {"format": "SFQD", "version": DATASET_VERSION, "n_traj": self.n_traj,
                "horizon": self.horizon, "dt": self.dt, "seed": self.seed,
                "n_transitions": len(self),
                "columns": ["x1", "x2", "a1", "a2", "r", "l", "x1_next", "x2_next"]}


def generate_dataset(n_traj: int = N_TRAJ, horizon: int = HORIZON, dt: float = DT,
                     seed: int = 0) -> TrajectoryDataset:
    """Random-policy trajectories from uniform initial states, one rng stream per trajectory."""
    if n_traj < 1 or horizon < 1:
        raise ValueError("n_traj and horizon must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_traj)
    x0 = np.empty((n_traj, 2))
    acts = np.empty((n_traj, horizon, 2))
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        x0[i] = rng.uniform(X_LOW, X_HIGH)
        acts[i] = sample_disk_action(rng, horizon)
    # float32 storage: simulate in float32-rounded states so chaining holds bit-exactly
    states = np.empty((n_traj, horizon + 1, 2), dtype=np.float32)
    states[:, 0] = x0
    for t in range(horizon):
        states[:, t + 1] = dynamics_step(states[:, t], acts[:, t], dt)
    s = states[:, :-1].reshape(-1, 2)
    return TrajectoryDataset(
        states=s,
        actions=acts.reshape(-1, 2).astype(np.float32),
        rewards=reward(s).astype(np.float32),
        safety=safety_margin(s).astype(np.float32),
        next_states=states[:, 1:].reshape(-1, 2),
        n_traj=n_traj, horizon=horizon, dt=dt, seed=seed)


def save_dataset(ds: TrajectoryDataset, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HQQdQ", DATASET_VERSION, ds.n_traj, ds.horizon, ds.dt, ds.seed))
        f.write(ds.records().astype("<f4").tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps(ds.metadata(), indent=2) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an SFQD dataset")
    version, n_traj, horizon, dt, seed = struct.unpack_from("<HQQdQ", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 4 + struct.calcsize("<HQQdQ")
    rec = np.frombuffer(data, dtype="<f4", offset=off).reshape(-1, 8).astype(np.float32)
    if len(rec) != n_traj * horizon:
        raise ValueError(f"{path}: expected {n_traj * horizon} records, found {len(rec)}")
    return TrajectoryDataset(rec[:, 0:2].copy(), rec[:, 2:4].copy(), rec[:, 4].copy(),
                             rec[:, 5].copy(), rec[:, 6:8].copy(), n_traj, horizon, dt, seed)


@dataclass
class Trajectory:
    states: np.ndarray  # (horizon + 1, 2) or (n, horizon + 1, 2)
    actions: np.ndarray
    rewards: np.ndarray
    safety: np.ndarray

    @property
    def cumulative_reward(self):
        return self.rewards.sum(axis=-1)

    @property
    def violations(self):
        return (self.safety > 0).sum(axis=-1)

    @property
    def max_safety(self):
        return self.safety.max(axis=-1)

    @property
    def out_of_bounds(self):
        return (~in_bounds(self.states)).any(axis=-1)


def rollout(policy: Policy, x0, horizon: int = HORIZON, dt: float = DT) -> Trajectory:
    """Simulate a batch-in/batch-out policy from one or many initial states.

    Reward and margin are recorded for every visited state including ``x0`` and the
    final state, so the arrays have ``horizon + 1`` entries per episode.
    """
    x = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    states = np.empty((len(x), horizon + 1, 2))
    actions = np.empty((len(x), horizon, 2))
    states[:, 0] = x
    for t in range(horizon):
        a = project_to_disk(policy(x))
        actions[:, t] = a
        x = dynamics_step(x, a, dt)
        states[:, t + 1] = x
    traj = Trajectory(states, actions, reward(states), safety_margin(states))
    if single:
        traj = Trajectory(states[0], actions[0], traj.rewards[0], traj.safety[0])
    return traj


def zero_policy(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.atleast_2d(x))


def random_policy(rng: np.random.Generator) -> Policy:
    def act(x):
        return sample_disk_action(rng, len(np.atleast_2d(x)))
    return act
