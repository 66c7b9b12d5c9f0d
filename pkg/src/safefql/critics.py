"""Reward critics (expectile IQL) and reachability-style safety critics (max-backup)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .boat import TrajectoryDataset

log = logging.getLogger(__name__)

STATE_DIM = 2
ACTION_DIM = 2


class DivergenceError(RuntimeError):
    pass


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, 1.0 - tau, tau) * u * u


def reward_q_target(r, v_bar_next, gamma: float):
    return np.asarray(r) + gamma * np.asarray(v_bar_next)


def safety_q_target(ell, v_bar_c_next, gamma: float):
    return np.maximum(ell, gamma * np.asarray(v_bar_c_next))


def discounted_safety_q_target(ell, v_bar_c_next, gamma: float):
    """``(1 - gamma) * l + gamma * max(l, v')``: keeps safe values at the scale of ``l``."""
    ell = np.asarray(ell)
    return (1.0 - gamma) * ell + gamma * np.maximum(ell, v_bar_c_next)


BACKUPS = {"max": safety_q_target, "discounted": discounted_safety_q_target}
NEXT_VALUES = ("v_target", "twin_q")


def pessimistic_safety_next_value(q1, q2):
    return np.maximum(q1, q2)


def optimistic_reward_next_value(q1, q2):
    # Named for symmetry with the safety side; clipped double-Q takes the smaller estimate.
    return np.minimum(q1, q2)


@dataclass
class CriticConfig:
    hidden: tuple[int, ...] = (256, 256)
    gamma: float = 0.99
    tau: float = 0.9
    ema_rate: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 100_000
    twin_reward: bool = True
    backup: str = "discounted"
    next_value: str = "v_target"
    log_every: int = 1000
    seed: int = 0

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise nn.ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.5 < self.tau < 1.0:
            raise nn.ConfigError(f"tau must lie in (0.5, 1), got {self.tau}")
        if not 0.0 < self.ema_rate <= 1.0:
            raise nn.ConfigError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")
        if self.backup not in BACKUPS:
            raise nn.ConfigError(f"backup must be one of {sorted(BACKUPS)}")
        if self.next_value not in NEXT_VALUES:
            raise nn.ConfigError(f"next_value must be one of {NEXT_VALUES}")
        if self.batch_size < 1 or self.steps < 0:
            raise nn.ConfigError("batch_size must be >= 1 and steps >= 0")


@dataclass
class CriticBundle:
    q_r: list[nn.ParamSet]
    v_r: nn.ParamSet
    q_c: list[nn.ParamSet]
    v_c: nn.ParamSet
    gamma: float = 0.99
    tau: float = 0.9
    ema_rate: float = 0.005
    backup: str = "discounted"
    next_value: str = "v_target"

    @property
    def networks(self) -> dict[str, nn.ParamSet]:
        nets = {f"q_r{i + 1}": p for i, p in enumerate(self.q_r)}
        nets["v_r"] = self.v_r
        nets.update({f"q_c{i + 1}": p for i, p in enumerate(self.q_c)})
        nets["v_c"] = self.v_c
        return nets

    # Aggregated critic readouts. ``target`` selects the EMA copies.

    def reward_q(self, x, a, *, target=False):
        xa = np.concatenate([np.atleast_2d(x), np.atleast_2d(a)], axis=-1)
        qs = [nn.mlp_forward(p, xa, target=target)[:, 0] for p in self.q_r]
        return qs[0] if len(qs) == 1 else optimistic_reward_next_value(*qs)

    def safety_q(self, x, a, *, target=False):
        xa = np.concatenate([np.atleast_2d(x), np.atleast_2d(a)], axis=-1)
        q1, q2 = (nn.mlp_forward(p, xa, target=target)[:, 0] for p in self.q_c)
        return pessimistic_safety_next_value(q1, q2)

    def safety_v(self, x, *, target=False):
        return nn.mlp_forward(self.v_c, np.atleast_2d(x), target=target)[:, 0]

    def reward_v(self, x, *, target=False):
        return nn.mlp_forward(self.v_r, np.atleast_2d(x), target=target)[:, 0]


def init_critics(config: CriticConfig, seed: int | None = None) -> CriticBundle:
    config.validate()
    seed = config.seed if seed is None else seed
    ss = np.random.SeedSequence(seed).generate_state(6)
    q_spec = nn.LayerSpec(STATE_DIM + ACTION_DIM, config.hidden, 1)
    v_spec = nn.LayerSpec(STATE_DIM, config.hidden, 1)
    n_r = 2 if config.twin_reward else 1
    q_r = [nn.mlp_init(q_spec, int(ss[i]), name=f"q_r{i + 1}") for i in range(n_r)]
    return CriticBundle(
        q_r=q_r,
        v_r=nn.mlp_init(v_spec, int(ss[2]), name="v_r"),
        q_c=[nn.mlp_init(q_spec, int(ss[3 + i]), name=f"q_c{i + 1}") for i in range(2)],
        v_c=nn.mlp_init(v_spec, int(ss[5]), name="v_c"),
        gamma=config.gamma, tau=config.tau, ema_rate=config.ema_rate, backup=config.backup,
        next_value=config.next_value)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    safety: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray

    def __len__(self):
        return len(self.states)

    @classmethod
    def from_arrays(cls, states, actions, rewards, safety, next_states, next_actions=None):
        f32 = lambda a: np.atleast_1d(np.asarray(a, dtype=np.float32))  # noqa: E731
        states, actions, next_states = (np.atleast_2d(f32(a)) for a in (states, actions, next_states))
        next_actions = actions if next_actions is None else np.atleast_2d(f32(next_actions))
        return cls(states, actions, f32(rewards), f32(safety), next_states, next_actions)


class DatasetSampler:
    """Uniform minibatches; the rng for step ``k`` is derived from ``(seed, k)`` so runs resume exactly."""

    def __init__(self, dataset: TrajectoryDataset, seed: int):
        self.ds = dataset
        self.next_actions = dataset.next_actions
        self.seed = seed

    def rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, step])

    def sample(self, step: int, batch_size: int) -> Batch:
        idx = self.rng(step).integers(0, len(self.ds), size=batch_size)
        ds = self.ds
        return Batch(ds.states[idx], ds.actions[idx], ds.rewards[idx], ds.safety[idx],
                     ds.next_states[idx], self.next_actions[idx])


@dataclass
class CriticLosses:
    v_r: float
    q_r: float
    q_c: float
    v_c: float

    def as_tuple(self):
        return self.v_r, self.q_r, self.q_c, self.v_c


def _targets(batch: Batch, bundle: CriticBundle):
    """Bellman targets and value-regression anchors, all read from EMA copies."""
    g = bundle.gamma
    xa = np.concatenate([batch.states, batch.actions], axis=1)
    xa_next = np.concatenate([batch.next_states, batch.next_actions], axis=1)
    y_r = reward_q_target(batch.rewards, bundle.reward_v(batch.next_states, target=True), g)
    if bundle.next_value == "twin_q":
        qc_next = [nn.mlp_forward(p, xa_next, target=True)[:, 0] for p in bundle.q_c]
        v_c_next = pessimistic_safety_next_value(*qc_next)
    else:
        v_c_next = bundle.safety_v(batch.next_states, target=True)
    y_c = BACKUPS[bundle.backup](batch.safety, v_c_next, g)
    q_r_bar = [nn.mlp_forward(p, xa, target=True)[:, 0] for p in bundle.q_r]
    q_r_anchor = q_r_bar[0] if len(q_r_bar) == 1 else optimistic_reward_next_value(*q_r_bar)
    q_c_bar = [nn.mlp_forward(p, xa, target=True)[:, 0] for p in bundle.q_c]
    q_c_anchor = pessimistic_safety_next_value(*q_c_bar)
    return xa, y_r, y_c, q_r_anchor, q_c_anchor


def _losses_and_grads(batch: Batch, bundle: CriticBundle, *, need_grads: bool):
    if len(batch) == 0:
        raise ValueError("critic losses need a non-empty batch")
    n = len(batch)
    tau = bundle.tau
    xa, y_r, y_c, q_r_anchor, q_c_anchor = _targets(batch, bundle)
    grads = {}

    def regress(params, inp, target):
        out, cache = nn.forward_cached(params, inp)
        err = out[:, 0].astype(np.float64) - target
        if need_grads:
            up = (2.0 / n * err).astype(params.dtype)[:, None]
            grads[params.name] = nn.backward_cached(params, cache, up, need_input_grad=False)[0]
        return np.mean(err * err)

    def expectile(params, anchor, mirrored):
        out, cache = nn.forward_cached(params, batch.states)
        u = anchor.astype(np.float64) - out[:, 0]
        if mirrored:
            u = -u
        loss = np.mean(expectile_loss(u, tau))
        if need_grads:
            w = np.where(u < 0, 1.0 - tau, tau)
            # d/dV of w*u^2 with u = anchor - V (or V - anchor when mirrored)
            dv = 2.0 * w * u * (1.0 if mirrored else -1.0) / n
            grads[params.name] = nn.backward_cached(
                params, cache, dv.astype(params.dtype)[:, None], need_input_grad=False)[0]
        return loss

    l_vr = expectile(bundle.v_r, q_r_anchor, mirrored=False)
    l_qr = np.mean([regress(p, xa, y_r) for p in bundle.q_r])
    l_qc = np.mean([regress(p, xa, y_c) for p in bundle.q_c])
    l_vc = expectile(bundle.v_c, q_c_anchor, mirrored=True)
    return CriticLosses(float(l_vr), float(l_qr), float(l_qc), float(l_vc)), grads


def critic_losses(batch: Batch, bundle: CriticBundle) -> CriticLosses:
    return _losses_and_grads(batch, bundle, need_grads=False)[0]


def critic_update(batch: Batch, bundle: CriticBundle, lr: float) -> CriticLosses:
    """One gradient step on all critics followed by EMA target updates."""
    losses, grads = _losses_and_grads(batch, bundle, need_grads=True)
    if not np.all(np.isfinite(losses.as_tuple())):
        raise DivergenceError(f"non-finite critic loss {losses}")
    for name, params in bundle.networks.items():
        nn.adam_step(params, grads[name], lr)
        nn.ema_update(params, bundle.ema_rate)
    return losses


@dataclass
class CriticHistory:
    rows: list[tuple] = field(default_factory=list)

    columns = ("step", "L_Vr", "L_Qr", "L_Qc", "L_Vc")


def train_critics(dataset: TrajectoryDataset, config: CriticConfig,
                  bundle: CriticBundle | None = None, start_step: int = 0,
                  on_log: Callable[[int, CriticLosses], None] | None = None):
    """Phase 1. Returns ``(bundle, history)``; passing a bundle and ``start_step`` resumes."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    bundle = bundle or init_critics(config)
    sampler = DatasetSampler(dataset, config.seed)
    history = CriticHistory()
    acc = np.zeros(4)
    count = 0
    for step in range(start_step, config.steps):
        losses = critic_update(sampler.sample(step, config.batch_size), bundle, config.lr)
        acc += losses.as_tuple()
        count += 1
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            row = (step + 1, *(acc / count))
            history.rows.append(row)
            log.info("critics step %d  L_Vr %.4g  L_Qr %.4g  L_Qc %.4g  L_Vc %.4g", *row)
            if on_log:
                on_log(step + 1, CriticLosses(*row[1:]))
            acc[:] = 0
            count = 0
    return bundle, history
