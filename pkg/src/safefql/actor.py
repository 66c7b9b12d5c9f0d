"""One-step student actor: feasibility-gated training, deployment and the rejection-sampling baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .boat import project_to_disk
from .critics import (ACTION_DIM, STATE_DIM, CriticBundle, DivergenceError,
                      pessimistic_safety_next_value)
from .flow import FlowTeacher, integrate_flow, one_step_teacher

log = logging.getLogger(__name__)

OBJECTIVES = ("gated", "naive")
DISTILL_TARGETS = ("one_step", "full")


@dataclass
class OneStepActor:
    net: nn.ParamSet
    lam: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise nn.ConfigError("distillation weight must be >= 0")

    @property
    def action_dim(self) -> int:
        return self.net.spec.output_dim


@dataclass
class ActorConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    lam: float = 1.0
    eta: float = 5.0
    objective: str = "gated"
    distill_target: str = "one_step"
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 100_000
    log_every: int = 1000
    seed: int = 2

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise nn.ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.distill_target not in DISTILL_TARGETS:
            raise nn.ConfigError(f"distill_target must be one of {DISTILL_TARGETS}")
        if self.lam < 0:
            raise nn.ConfigError("lam must be >= 0")
        if self.objective == "naive" and self.eta <= 0:
            raise nn.ConfigError("naive objective needs eta > 0")


def init_actor(config: ActorConfig, state_dim: int = STATE_DIM,
               action_dim: int = ACTION_DIM) -> OneStepActor:
    spec = nn.LayerSpec(state_dim + action_dim, config.hidden, action_dim)
    return OneStepActor(nn.mlp_init(spec, config.seed, name="actor"), config.lam, config.eta)


def student_action(actor: OneStepActor, x, z, *, project: bool = True) -> np.ndarray:
    single = np.ndim(z) == 1
    out = nn.mlp_forward(actor.net, np.concatenate([np.atleast_2d(x), np.atleast_2d(z)], axis=1))
    if project:
        out = project_to_disk(out)
    return out[0] if single else out


def feasibility_gate(q_c_value):
    """1 where the action is predicted feasible (strictly negative safety value)."""
    return (np.asarray(q_c_value) < 0).astype(np.int8)


def gated_objective(distill, q_r, q_c, lam: float):
    """Per-sample gated actor loss from precomputed pieces."""
    zeta = feasibility_gate(q_c)
    return lam * np.asarray(distill) + zeta * -np.asarray(q_r) + (1 - zeta) * np.maximum(0.0, q_c)


def naive_objective(distill, q_r, q_c, lam: float, eta: float):
    return -np.asarray(q_r) + eta * np.maximum(0.0, q_c) + lam * np.asarray(distill)


def _project_vjp(raw: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the radial disk projection at ``raw``."""
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    outside = norm[:, 0] > 1.0
    if not outside.any():
        return g
    out = g.copy()
    r = raw[outside] / norm[outside]
    gi = g[outside]
    out[outside] = (gi - r * np.sum(r * gi, axis=1, keepdims=True)) / norm[outside]
    return out


def _twin_readout(nets, xa, pick):
    """Aggregate twin critics and return a closure for d(aggregate)/d(action)."""
    pairs = [nn.forward_cached(p, xa) for p in nets]
    qs = np.stack([out[:, 0] for out, _ in pairs]).astype(np.float64)
    which = pick(qs, axis=0) if len(nets) > 1 else np.zeros(qs.shape[1], dtype=int)
    q = qs[which, np.arange(qs.shape[1])]

    def action_grad(upstream):
        g = np.zeros(xa.shape)
        for j, (params, (_, cache)) in enumerate(zip(nets, pairs)):
            up = np.where(which == j, upstream, 0.0)
            if np.any(up):
                _, dx = nn.backward_cached(params, cache, up[:, None].astype(params.dtype))
                g += dx
        return g[:, STATE_DIM:]

    return q, action_grad


def distill_target(teacher: FlowTeacher, x, z, mode: str = "one_step") -> np.ndarray:
    if mode == "one_step":
        return one_step_teacher(teacher, x, z)
    return integrate_flow(teacher, x, z)


@dataclass
class ActorStepInfo:
    loss: float
    distill: float
    reward_term: float
    safety_term: float
    gate_open_fraction: float
    reward_coef: np.ndarray
    safety_coef: np.ndarray


def actor_loss(states, z, actor: OneStepActor, critics: CriticBundle, teacher: FlowTeacher, *,
               objective: str = "gated", target_mode: str = "one_step", need_grads: bool = False):
    """Gated (or naive Lagrangian) actor objective on a batch with given latents.

    Distillation compares the raw network output to the teacher; the critics see the
    action after disk projection, which is what gets deployed.
    """
    states, z = np.atleast_2d(states), np.atleast_2d(z)
    n = len(states)
    raw, cache = nn.forward_cached(actor.net, np.concatenate([states, z], axis=1))
    raw64 = raw.astype(np.float64)
    a = project_to_disk(raw64)
    target = distill_target(teacher, states, z, target_mode)
    diff = raw64 - target
    distill = np.sum(diff * diff, axis=1)
    xa = np.concatenate([states, a], axis=1)
    q_r, grad_r = _twin_readout(critics.q_r, xa, np.argmin)
    q_c, grad_c = _twin_readout(critics.q_c, xa, np.argmax)
    if objective == "gated":
        zeta = feasibility_gate(q_c).astype(np.float64)
        reward_coef, safety_coef = zeta, 1.0 - zeta
    elif objective == "naive":
        reward_coef, safety_coef = np.ones(n), np.full(n, actor.eta)
    else:
        raise nn.ConfigError(f"unknown objective {objective!r}")
    hinge = np.maximum(0.0, q_c)
    reward_term = float(np.mean(reward_coef * -q_r))
    safety_term = float(np.mean(safety_coef * hinge))
    distill_mean = float(np.mean(distill))
    info = ActorStepInfo(actor.lam * distill_mean + reward_term + safety_term, distill_mean,
                         reward_term, safety_term, float(np.mean(q_c < 0)),
                         reward_coef, safety_coef)
    if not need_grads:
        return info
    # The gate is piecewise constant and treated as a constant here.
    d_a = grad_r(-reward_coef / n) + grad_c(safety_coef * (q_c > 0) / n)
    d_raw = 2.0 * actor.lam * diff / n + _project_vjp(raw64, d_a)
    grads, _ = nn.backward_cached(actor.net, cache, d_raw.astype(actor.net.dtype),
                                  need_input_grad=False)
    return info, grads


def gated_actor_loss(states, z, actor, critics, teacher, *, target_mode="one_step") -> float:
    return actor_loss(states, z, actor, critics, teacher, target_mode=target_mode).loss


def naive_lagrangian_loss(states, z, actor, critics, teacher, eta: float | None = None, *,
                          target_mode="one_step") -> float:
    if eta is not None:
        actor = OneStepActor(actor.net, actor.lam, eta)
    if actor.eta < 0:
        raise nn.ConfigError("eta must be >= 0")
    return actor_loss(states, z, actor, critics, teacher, objective="naive",
                      target_mode=target_mode).loss


@dataclass
class ActorHistory:
    rows: list[tuple] = field(default_factory=list)
    columns = ("step", "gate_open_fraction", "distill_loss", "reward_term", "safety_term")
    exclusivity_checked: int = 0
    exclusivity_violations: int = 0


def train_actor(states: np.ndarray, critics: CriticBundle, teacher: FlowTeacher,
                config: ActorConfig, actor: OneStepActor | None = None, start_step: int = 0,
                check_exclusivity: bool = False):
    """Phase 3: Adam on the actor objective with fresh latents every step.

    ``states`` is the pool of dataset states minibatches are drawn from.
    """
    config.validate()
    actor = actor or init_actor(config, states.shape[1], teacher.action_dim)
    history = ActorHistory()
    acc = np.zeros(4)
    count = 0
    for step in range(start_step, config.steps):
        rng = np.random.default_rng([config.seed, step])
        x = states[rng.integers(0, len(states), size=config.batch_size)]
        z = rng.standard_normal((config.batch_size, actor.action_dim))
        info, grads = actor_loss(x, z, actor, critics, teacher, objective=config.objective,
                                 target_mode=config.distill_target, need_grads=True)
        if not np.isfinite(info.loss):
            raise DivergenceError(f"non-finite actor loss at step {step}")
        if check_exclusivity and config.objective == "gated":
            active = (info.reward_coef != 0).astype(int) + (info.safety_coef != 0).astype(int)
            history.exclusivity_checked += len(active)
            history.exclusivity_violations += int(np.sum(active != 1))
        nn.adam_step(actor.net, grads, config.lr)
        acc += (info.gate_open_fraction, info.distill, info.reward_term, info.safety_term)
        count += 1
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            row = (step + 1, *(acc / count))
            history.rows.append(row)
            log.info("actor step %d  open %.3f  distill %.4g  reward %.4g  safety %.4g", *row)
            acc[:] = 0
            count = 0
    return actor, history


def deploy_action(actor: OneStepActor, x, rng: np.random.Generator) -> np.ndarray:
    """Fresh latent, one forward pass, projection. No critic or teacher is touched."""
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(x)
    a = student_action(actor, x2, rng.standard_normal((len(x2), actor.action_dim)))
    return a[0] if single else a


def actor_policy(actor: OneStepActor, rng: np.random.Generator):
    return lambda x: deploy_action(actor, x, rng)


def _choose(q_r: np.ndarray, q_c: np.ndarray, delta: float) -> int:
    feasible = q_c < delta
    if feasible.any():
        return int(np.flatnonzero(feasible)[np.argmax(q_r[feasible])])
    return int(np.argmin(q_c))


def rejection_sampling_action(teacher: FlowTeacher, critics: CriticBundle, x, n: int,
                              delta: float = 0.0, rng: np.random.Generator | None = None,
                              *, z=None) -> np.ndarray:
    """Best-of-``n`` flow samples for one state, evaluated candidate by candidate.

    Each candidate costs ``K`` velocity forwards plus both safety twins and the first
    reward critic. Among candidates with safety value below ``delta`` the highest
    reward estimate wins; with none feasible the safest candidate is returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if z is None:
        z = rng.standard_normal((n, teacher.action_dim))
    cands, q_r, q_c = [], np.empty(n), np.empty(n)
    for j in range(n):
        a = integrate_flow(teacher, x, z[j][None, :])
        xa = np.concatenate([x, a], axis=1)
        q_c[j] = pessimistic_safety_next_value(
            *(nn.mlp_forward(p, xa)[0, 0] for p in critics.q_c))
        q_r[j] = nn.mlp_forward(critics.q_r[0], xa)[0, 0]
        cands.append(a[0])
    return cands[_choose(q_r, q_c, delta)]


def rejection_policy(teacher: FlowTeacher, critics: CriticBundle, n: int, delta: float,
                     rng: np.random.Generator):
    """Batched equivalent of :func:`rejection_sampling_action` for evaluation rollouts."""

    def act(x):
        x = np.atleast_2d(x)
        m, d = len(x), teacher.action_dim
        z = rng.standard_normal((m, n, d))
        xs = np.repeat(x, n, axis=0)
        a = integrate_flow(teacher, xs, z.reshape(m * n, d))
        xa = np.concatenate([xs, a], axis=1)
        q_c = pessimistic_safety_next_value(*(nn.mlp_forward(p, xa)[:, 0] for p in critics.q_c))
        q_r = nn.mlp_forward(critics.q_r[0], xa)[:, 0]
        a, q_c, q_r = a.reshape(m, n, d), q_c.reshape(m, n), q_r.reshape(m, n)
        return np.stack([a[i, _choose(q_r[i], q_c[i], delta)] for i in range(m)])

    return act

