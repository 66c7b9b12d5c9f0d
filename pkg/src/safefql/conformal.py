"""Conformal calibration of the safety-value threshold delta from policy rollouts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special, stats

from . import boat, nn

PROPOSAL_CAP = 1_000_000
COUNT_MODES = ("level", "total")


class CalibrationInfeasible(RuntimeError):
    def __init__(self, message: str, min_epsilon: float | None = None):
        super().__init__(message)
        self.min_epsilon = min_epsilon


def policy_safety_scores(policy: boat.Policy, states, horizon: int = boat.HORIZON,
                         dt: float = boat.DT, repeats: int = 1) -> np.ndarray:
    """Max of l over a rollout from each state (x itself included), averaged over ``repeats``."""
    states = np.atleast_2d(states)
    total = np.zeros(len(states))
    for _ in range(repeats):
        total += boat.rollout(policy, states, horizon, dt).max_safety
    return total / repeats


def policy_safety_score(policy: boat.Policy, x, horizon: int = boat.HORIZON,
                        dt: float = boat.DT) -> float:
    return float(policy_safety_scores(policy, np.asarray(x)[None], horizon, dt)[0])


def binomial_tail(n: int, l: int, eps: float) -> float:
    """``sum_{i<l} C(n, i) eps^i (1 - eps)^(n - i)``: the binomial CDF at ``l - 1``."""
    if not 0 <= l <= n:
        raise ValueError(f"need 0 <= l <= n, got l={l}, n={n}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if l == 0:
        return 0.0
    return float(stats.binom.cdf(l - 1, n, eps))


def min_epsilon(n: int, l: int, beta: float) -> float:
    """Smallest eps with ``binomial_tail(n, l, eps) <= beta``.

    The tail equals the Beta(l, n - l + 1) survival function at eps, so the answer is
    that distribution's ``1 - beta`` quantile.
    """
    if not 1 <= l <= n:
        raise ValueError(f"need 1 <= l <= n, got l={l}, n={n}")
    return float(special.betaincinv(l, n - l + 1, 1.0 - beta))


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n + 1)(1 - alpha))-th order statistic, clamped to [1, n]."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("conformal quantile of an empty score set")
    n = s.size
    # the small offset keeps exact integers like (n+1)(1 - 1/(n+1)) from rounding up
    idx = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    return float(s[min(max(idx, 1), n) - 1])


@dataclass
class CalibrationConfig:
    epsilon_s: float = 0.05
    beta_s: float = 0.05
    n_samples: int = 200
    n_levels: int = 50
    rollout_horizon: int = boat.HORIZON
    repeats: int = 1
    count_mode: str = "level"
    seed: int = 3

    def validate(self):
        for name in ("epsilon_s", "beta_s"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise nn.ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.n_samples < 1:
            raise nn.ConfigError("n_samples must be >= 1")
        if self.n_levels < 2:
            raise nn.ConfigError("n_levels must be >= 2")
        if self.repeats < 1 or self.rollout_horizon < 0:
            raise nn.ConfigError("repeats must be >= 1 and rollout_horizon >= 0")
        if self.count_mode not in COUNT_MODES:
            raise nn.ConfigError(f"count_mode must be one of {COUNT_MODES}")


@dataclass
class LevelRow:
    delta: float
    n_inside: int
    violations: int
    alpha: float
    epsilon: float
    passed: bool


@dataclass
class CalibrationReport:
    delta_star: float
    delta_0: float
    epsilon_s: float
    beta_s: float
    n_samples: int
    quantile: float
    scores: list[float]
    values: list[float]
    levels: list[LevelRow] = field(default_factory=list)
    proposals: int = 0
    count_mode: str = "level"

    @property
    def selected(self) -> LevelRow:
        return next(r for r in self.levels if r.delta == self.delta_star)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> CalibrationReport:
        d = json.loads(Path(path).read_text())
        d["levels"] = [LevelRow(**r) for r in d["levels"]]
        return cls(**d)


def sample_sublevel(value_fn: Callable[[np.ndarray], np.ndarray], delta: float, n: int,
                    rng: np.random.Generator,
                    propose: Callable[[np.random.Generator, int], np.ndarray] | None = None,
                    cap: int = PROPOSAL_CAP):
    """Rejection-sample ``n`` states with ``value_fn(x) < delta``; returns ``(states, proposals)``."""
    propose = propose or boat.sample_states
    found, used = [], 0
    count = 0
    while count < n and used < cap:
        m = min(max(4 * n, 1024), cap - used)
        cand = propose(rng, m)
        used += m
        keep = cand[np.asarray(value_fn(cand)) < delta]
        found.append(keep)
        count += len(keep)
    if count < n:
        raise CalibrationInfeasible(
            f"only {count} of {n} states with V_c < {delta} in {used} proposals")
    return np.concatenate(found)[:n], used


def calibrate_from_scores(values, scores, config: CalibrationConfig) -> CalibrationReport:
    """Level sweep over [delta_0, 0] given V_c and rollout scores of the calibration states."""
    config.validate()
    values = np.asarray(values, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_total = len(values)
    violating = scores >= 0
    delta_0 = float(values[violating].min()) if violating.any() else 0.0
    rows = []
    for delta in np.linspace(delta_0, 0.0, config.n_levels):
        # S_delta is the strict sublevel set, so the violator defining delta_0 sits outside it
        inside = values < delta if delta < 0 else np.ones(n_total, dtype=bool)
        n_in = int(inside.sum()) if config.count_mode == "level" else n_total
        k = int(np.sum(inside & violating))
        if n_in == 0 or k + 1 > n_in:
            rows.append(LevelRow(float(delta), n_in, k, 1.0, 1.0, False))
            continue
        alpha = (k + 1) / (n_in + 1)
        l_count = math.floor((n_in + 1) * alpha + 1e-9)
        eps = min_epsilon(n_in, l_count, config.beta_s)
        rows.append(LevelRow(float(delta), n_in, k, alpha, eps, eps <= config.epsilon_s))
    passing = [r for r in rows if r.passed]
    if not passing:
        raise CalibrationInfeasible(
            f"no delta level reaches epsilon <= {config.epsilon_s}",
            min_epsilon=min(r.epsilon for r in rows))
    best = passing[-1]
    inside = values < best.delta if best.delta < 0 else np.ones(n_total, dtype=bool)
    q_hat = conformal_quantile(scores[inside], best.alpha) if inside.any() else float("nan")
    return CalibrationReport(
        delta_star=best.delta, delta_0=delta_0, epsilon_s=config.epsilon_s,
        beta_s=config.beta_s, n_samples=n_total, quantile=q_hat,
        scores=[float(s) for s in scores], values=[float(v) for v in values], levels=rows,
        count_mode=config.count_mode)


def calibrate_delta(policy: boat.Policy, v_c: Callable[[np.ndarray], np.ndarray],
                    config: CalibrationConfig, *, dt: float = boat.DT,
                    propose=None, score_fn=None) -> CalibrationReport:
    """Sample calibration states from {V_c < 0}, score them by rollout and sweep delta.

    ``score_fn(states)`` overrides the rollout scores, which lets synthetic environments
    reuse the same sweep.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    states, used = sample_sublevel(v_c, 0.0, config.n_samples, rng, propose)
    if score_fn is None:
        scores = policy_safety_scores(policy, states, config.rollout_horizon, dt, config.repeats)
    else:
        scores = score_fn(states)
    report = calibrate_from_scores(v_c(states), scores, config)
    report.proposals = used
    return report
