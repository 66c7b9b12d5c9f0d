"""Grid value iteration for the max-backup safety value of the boat, used as ground truth."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import boat

GRID_MAGIC = b"SFQG"
FEASIBLE = -1
EXCLUDED = 0
INFEASIBLE = 1


class ConvergenceError(RuntimeError):
    pass


@dataclass
class GridValue:
    x1: np.ndarray
    x2: np.ndarray
    values: np.ndarray  # (len(x1), len(x2)), indexed [i1, i2]
    actions: np.ndarray
    gamma: float
    dt: float
    tol: float
    iterations: int
    residuals: np.ndarray
    backup: str = "discounted"

    def interpolate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx, w = _bilinear(self.x1, self.x2, x)
        return np.sum(self.values.ravel()[idx] * w, axis=-1)

    def feasible_fraction(self) -> float:
        return float(np.mean(self.values < 0))


def disk_actions(n_directions: int = 16) -> np.ndarray:
    """``n_directions`` unit vectors on the disk boundary plus the zero action."""
    ang = 2 * np.pi * np.arange(n_directions) / n_directions
    return np.vstack([np.column_stack([np.cos(ang), np.sin(ang)]), [[0.0, 0.0]]])


def _bilinear(x1: np.ndarray, x2: np.ndarray, pts: np.ndarray):
    """Flat corner indices and weights for bilinear interpolation, clamping to the grid."""
    p1 = np.clip(pts[..., 0], x1[0], x1[-1])
    p2 = np.clip(pts[..., 1], x2[0], x2[-1])
    h1, h2 = x1[1] - x1[0], x2[1] - x2[0]
    f1 = (p1 - x1[0]) / h1
    f2 = (p2 - x2[0]) / h2
    i1 = np.clip(np.floor(f1).astype(int), 0, len(x1) - 2)
    i2 = np.clip(np.floor(f2).astype(int), 0, len(x2) - 2)
    t1, t2 = f1 - i1, f2 - i2
    n2 = len(x2)
    idx = np.stack([i1 * n2 + i2, i1 * n2 + i2 + 1, (i1 + 1) * n2 + i2, (i1 + 1) * n2 + i2 + 1],
                   axis=-1)
    w = np.stack([(1 - t1) * (1 - t2), (1 - t1) * t2, t1 * (1 - t2), t1 * t2], axis=-1)
    return idx, w


def value_iteration(resolution=(100, 100), n_directions: int = 16, gamma: float = 0.99,
                    dt: float = boat.DT, tol: float = 1e-6, max_iter: int = 20_000,
                    backup: str = "discounted") -> GridValue:
    """Iterate the safety backup with ``min_a V(step(x, a))`` as continuation to a fixed point.

    ``backup="max"`` is ``V <- max(l, gamma * next)``; ``"discounted"`` is
    ``V <- (1 - gamma) * l + gamma * max(l, next)``.
    """
    if backup not in ("max", "discounted"):
        raise ValueError(f"unknown backup {backup!r}")
    n1, n2 = resolution
    if n1 < 2 or n2 < 2:
        raise ValueError("grid needs at least 2 nodes per axis")
    x1 = np.linspace(boat.X_LOW[0], boat.X_HIGH[0], n1)
    x2 = np.linspace(boat.X_LOW[1], boat.X_HIGH[1], n2)
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    nodes = np.column_stack([g1.ravel(), g2.ravel()])
    ell = boat.safety_margin(nodes)
    actions = disk_actions(n_directions)
    nxt = boat.dynamics_step(nodes[None, :, :], actions[:, None, :], dt)
    idx, w = _bilinear(x1, x2, nxt)
    v = ell.copy()
    residuals = []
    for it in range(1, max_iter + 1):
        cont = np.min(np.sum(v[idx] * w, axis=-1), axis=0)
        if backup == "max":
            new = np.maximum(ell, gamma * cont)
        else:
            new = (1.0 - gamma) * ell + gamma * np.maximum(ell, cont)
        res = float(np.max(np.abs(new - v)))
        residuals.append(res)
        v = new
        if res < tol:
            break
    else:
        raise ConvergenceError(f"value iteration residual {res:.3g} after {max_iter} iterations")
    return GridValue(x1, x2, v.reshape(n1, n2), actions, gamma, dt, tol, it, np.array(residuals),
                     backup)


def oracle_q(grid: GridValue, x, a) -> np.ndarray:
    """One backup through the grid value: the oracle's safety value of taking ``a`` at ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ell = boat.safety_margin(x)
    nxt = grid.interpolate(boat.dynamics_step(x, np.atleast_2d(a), grid.dt))
    if grid.backup == "max":
        return np.maximum(ell, grid.gamma * nxt)
    return (1.0 - grid.gamma) * ell + grid.gamma * np.maximum(ell, nxt)


def _sign_with_band(v, band):
    return np.where(v > band, INFEASIBLE, np.where(v < -band, FEASIBLE, EXCLUDED))


def oracle_sign(grid: GridValue, x, band: float = 0.1, actions=None) -> np.ndarray:
    """INFEASIBLE (+1) for value > band, FEASIBLE (-1) below -band, EXCLUDED (0) in between.

    With ``actions`` the state-action value from :func:`oracle_q` is classified instead.
    """
    v = grid.interpolate(x) if actions is None else oracle_q(grid, x, actions)
    out = _sign_with_band(v, band)
    return out[0] if np.ndim(x) == 1 else out


def sign_agreement(grid: GridValue, states: np.ndarray, learned: np.ndarray, band: float = 0.1,
                   actions=None):
    """Fraction of non-excluded probes where ``learned >= 0`` matches oracle infeasibility."""
    ref = oracle_sign(grid, states, band, actions)
    keep = ref != EXCLUDED
    learned_sign = np.where(np.asarray(learned) >= 0, INFEASIBLE, FEASIBLE)
    n = int(keep.sum())
    agree = int(np.sum(learned_sign[keep] == ref[keep]))
    return {"compared": n, "excluded": int(len(ref) - n), "agree": agree,
            "agreement": agree / n if n else float("nan"),
            "oracle_feasible": int(np.sum(ref == FEASIBLE)),
            "oracle_infeasible": int(np.sum(ref == INFEASIBLE))}


def save_grid(grid: GridValue, path) -> None:
    path = Path(path)
    n1, n2 = grid.values.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<HII", 1, n1, n2))
        f.write(struct.pack("<4d", grid.x1[0], grid.x1[-1], grid.x2[0], grid.x2[-1]))
        f.write(struct.pack("<ddI", grid.gamma, grid.dt, grid.iterations))
        f.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
    with open(path.with_suffix(".csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["x1", "x2", "value", "l"])
        for i, a in enumerate(grid.x1):
            for j, b in enumerate(grid.x2):
                wr.writerow([f"{a:.6g}", f"{b:.6g}", f"{grid.values[i, j]:.6g}",
                             f"{boat.safety_margin(np.array([a, b])):.6g}"])


def load_grid_values(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not an SFQG grid dump")
    _, n1, n2 = struct.unpack_from("<HII", data, 4)
    lo1, hi1, lo2, hi2 = struct.unpack_from("<4d", data, 14)
    off = 14 + 32 + struct.calcsize("<ddI")
    vals = np.frombuffer(data, dtype="<f4", offset=off).reshape(n1, n2)
    return np.linspace(lo1, hi1, n1), np.linspace(lo2, hi2, n2), vals
