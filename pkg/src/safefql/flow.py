"""Conditional flow-matching behaviour teacher and its Euler samplers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .boat import TrajectoryDataset, project_to_disk
from .critics import ACTION_DIM, STATE_DIM, DivergenceError

log = logging.getLogger(__name__)


@dataclass
class FlowTeacher:
    net: nn.ParamSet
    k_steps: int = 10

    def __post_init__(self):
        if self.k_steps < 1:
            raise nn.ConfigError("k_steps must be >= 1")
        if self.state_dim < 1:
            raise nn.InvalidSpecError("teacher input must hold state, action and time")

    @property
    def state_dim(self) -> int:
        return self.net.spec.input_dim - self.action_dim - 1

    @property
    def action_dim(self) -> int:
        return self.net.spec.output_dim

    def velocity(self, x, y, t) -> np.ndarray:
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(y),))[:, None]
        return nn.mlp_forward(self.net, np.concatenate([x, y, t], axis=1))


@dataclass
class FlowConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    k_steps: int = 10
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 100_000
    log_every: int = 1000
    seed: int = 1


def init_teacher(config: FlowConfig, state_dim: int = STATE_DIM,
                 action_dim: int = ACTION_DIM) -> FlowTeacher:
    spec = nn.LayerSpec(state_dim + action_dim + 1, config.hidden, action_dim)
    return FlowTeacher(nn.mlp_init(spec, config.seed, name="teacher"), config.k_steps)


def interpolate(z, a, t):
    """Straight-line path from noise ``z`` (t=0) to action ``a`` (t=1)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * np.asarray(z) + t * np.asarray(a)


def flow_matching_loss(states, actions, teacher: FlowTeacher, rng: np.random.Generator | None = None,
                       *, z=None, t=None, need_grads: bool = False):
    """Mean squared error between predicted velocity and ``a - z``.

    ``z`` and ``t`` are drawn from ``rng`` unless given explicitly.
    """
    states, actions = np.atleast_2d(states), np.atleast_2d(actions)
    n = len(states)
    if n == 0:
        raise ValueError("flow matching loss needs a non-empty batch")
    if z is None:
        z = rng.standard_normal(actions.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n)
    z = np.atleast_2d(z)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    inp = np.concatenate([states, interpolate(z, actions, t), t[:, None]], axis=1)
    out, cache = nn.forward_cached(teacher.net, inp)
    err = out.astype(np.float64) - (actions - z)
    loss = float(np.mean(np.sum(err * err, axis=1)))
    if not need_grads:
        return loss
    up = (2.0 / n * err).astype(teacher.net.dtype)
    grads, _ = nn.backward_cached(teacher.net, cache, up, need_input_grad=False)
    return loss, grads


def integrate_flow(teacher: FlowTeacher, x, z, *, k_steps: int | None = None,
                   project: bool = True) -> np.ndarray:
    """Explicit Euler from t=0 to 1 with left-endpoint time evaluation."""
    k = teacher.k_steps if k_steps is None else k_steps
    single = np.ndim(z) == 1
    x, y = np.atleast_2d(x), np.atleast_2d(np.asarray(z, dtype=np.float64))
    h = 1.0 / k
    for i in range(k):
        y = y + h * teacher.velocity(x, y, i * h)
        if not np.all(np.isfinite(y)):
            raise nn.NumericError(f"non-finite flow state at Euler step {i}")
    if project:
        y = project_to_disk(y)
    return y[0] if single else y


def one_step_teacher(teacher: FlowTeacher, x, z, *, project: bool = True) -> np.ndarray:
    """A single Euler step over the whole unit interval: ``z + v(x, z, 0)``."""
    return integrate_flow(teacher, x, z, k_steps=1, project=project)


def sample_actions(teacher: FlowTeacher, x, rng: np.random.Generator) -> np.ndarray:
    x = np.atleast_2d(x)
    return integrate_flow(teacher, x, rng.standard_normal((len(x), teacher.action_dim)))


@dataclass
class FlowHistory:
    rows: list[tuple] = field(default_factory=list)
    columns = ("step", "L_flow")


def train_flow_teacher(dataset: TrajectoryDataset, config: FlowConfig,
                       teacher: FlowTeacher | None = None, start_step: int = 0):
    """Phase 2: behavioural cloning only. Returns ``(teacher, history)``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    teacher = teacher or init_teacher(config, dataset.states.shape[1], dataset.actions.shape[1])
    history = FlowHistory()
    acc, count = 0.0, 0
    for step in range(start_step, config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        loss, grads = flow_matching_loss(dataset.states[idx], dataset.actions[idx], teacher, rng,
                                         need_grads=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite flow loss at step {step}")
        nn.adam_step(teacher.net, grads, config.lr)
        acc += loss
        count += 1
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            history.rows.append((step + 1, acc / count))
            log.info("flow step %d  L_flow %.4g", step + 1, acc / count)
            acc, count = 0.0, 0
    return teacher, history
