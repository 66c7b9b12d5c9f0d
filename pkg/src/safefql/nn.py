"""Small ReLU multilayer perceptrons with hand-written backprop, Adam and EMA targets.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of shape
``(n, input_dim)`` maps to ``x @ W + b``. Every function accepts either a single
vector or a batch; a single vector in gives a single vector out.
"""

from __future__ import annotations

import contextlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"SFQL"
FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# He fan-in gain for ReLU layers; the linear output layer uses gain 1.
HE_GAIN = 2.0
OUTPUT_GAIN = 1.0


class InvalidSpecError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


# Forward-pass tallies keyed by ParamSet.name, one per open counting_forwards() block.
_active_counters: list[Counter] = []


@contextlib.contextmanager
def counting_forwards():
    """Count forward passes per network name; the yielded Counter stays readable after exit."""
    counts: Counter = Counter()
    _active_counters.append(counts)
    try:
        yield counts
    finally:
        _active_counters.remove(counts)


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise InvalidSpecError("hidden layer list must be non-empty")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden) < 1:
            raise InvalidSpecError(f"all layer dimensions must be >= 1: {self}")
        if self.activation != "relu":
            raise InvalidSpecError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(a * b + b for a, b in zip(d[:-1], d[1:]))


@dataclass
class ParamSet:
    spec: LayerSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    ema_weights: list[np.ndarray]
    ema_biases: list[np.ndarray]
    step: int = 0
    name: str = field(default="net", compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> ParamSet:
        def c(xs):
            return [x.copy() for x in xs]

        return ParamSet(self.spec, c(self.weights), c(self.biases), c(self.m_w), c(self.m_b),
                        c(self.v_w), c(self.v_b), c(self.ema_weights), c(self.ema_biases),
                        self.step, self.name)

    def arrays(self) -> list[np.ndarray]:
        """All stored arrays in checkpoint order."""
        return [*self.weights, *self.biases, *self.ema_weights, *self.ema_biases,
                *self.m_w, *self.m_b, *self.v_w, *self.v_b]

    def equals(self, other: ParamSet) -> bool:
        """Bit-exact comparison of every array and the step count."""
        if self.spec != other.spec or self.step != other.step:
            return False
        return all(a.dtype == b.dtype and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))


class Grads(NamedTuple):
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def mlp_init(spec: LayerSpec, seed: int, *, zero: bool = False, dtype=np.float32,
             name: str = "net") -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)) on hidden layers, zero biases."""
    if not isinstance(spec, LayerSpec):
        raise InvalidSpecError("spec must be a LayerSpec")
    rng = np.random.default_rng(seed)
    dims = spec.dims
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = OUTPUT_GAIN if i == len(dims) - 2 else HE_GAIN
        if zero:
            w = np.zeros((fan_in, fan_out), dtype=dtype)
        else:
            w = (rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)).astype(dtype)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=dtype))
    zeros = lambda xs: [np.zeros_like(x) for x in xs]  # noqa: E731
    return ParamSet(spec, weights, biases, zeros(weights), zeros(biases), zeros(weights),
                    zeros(biases), [w.copy() for w in weights], [b.copy() for b in biases],
                    0, name)


def _as_batch(params: ParamSet, x, dim: int, what: str):
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{params.name}: {what} has shape {x.shape}, expected (*, {dim})")
    return x, single


def forward_cached(params: ParamSet, x, *, target: bool = False):
    """Forward pass returning ``(output, cache)``; the cache feeds :func:`backward_cached`."""
    x, single = _as_batch(params, x, params.spec.input_dim, "input")
    for counts in _active_counters:
        counts[params.name] += 1
    ws = params.ema_weights if target else params.weights
    bs = params.ema_biases if target else params.biases
    acts = [x]
    h = x
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w
        h += b
        if i < last:
            np.maximum(h, 0, out=h)
        acts.append(h)
    out = acts[-1]
    return (out[0] if single else out), (acts, single)


def mlp_forward(params: ParamSet, x, *, target: bool = False) -> np.ndarray:
    """ReLU-MLP output; ``target=True`` evaluates the EMA copy."""
    return forward_cached(params, x, target=target)[0]


def backward_cached(params: ParamSet, cache, upstream, *, need_input_grad: bool = True):
    """Reverse pass of ``sum(upstream * output)`` using activations from ``forward_cached``."""
    acts, single = cache
    g = np.asarray(upstream, dtype=params.dtype)
    if single:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ShapeError(f"{params.name}: upstream shape {g.shape} != output {acts[-1].shape}")
    n = len(params.weights)
    dws: list = [None] * n
    dbs: list = [None] * n
    for i in range(n - 1, -1, -1):
        dws[i] = acts[i].T @ g
        dbs[i] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params.weights[i].T
            if i > 0:
                # acts[i] is a post-ReLU activation; the subgradient at 0 is 0.
                g *= acts[i] > 0
    dx = None
    if need_input_grad:
        dx = g[0] if single else g
    return Grads(dws, dbs), dx


def mlp_backward(params: ParamSet, x, upstream):
    """Gradients of ``upstream . output`` w.r.t. all parameters and the input."""
    _, cache = forward_cached(params, x)
    return backward_cached(params, cache, upstream)


def adam_step(params: ParamSet, grads: Grads, lr: float) -> ParamSet:
    """Bias-corrected Adam update, applied in place."""
    if len(grads.weights) != params.n_layers or len(grads.biases) != params.n_layers:
        raise ShapeError(f"{params.name}: gradient layer count mismatch")
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != params.weights[i].shape or gb.shape != params.biases[i].shape:
            raise ShapeError(f"{params.name}: gradient shape mismatch at layer {i}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"{params.name}: non-finite gradient at layer {i}")
    params.step += 1
    t = params.step
    lr_t = lr * np.sqrt(1.0 - ADAM_BETA2 ** t) / (1.0 - ADAM_BETA1 ** t)
    # eps is scaled so the update equals lr * m_hat / (sqrt(v_hat) + eps) exactly.
    eps_t = ADAM_EPS * np.sqrt(1.0 - ADAM_BETA2 ** t)
    for p, m, v, g in _zip_slots(params, grads):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)
    return params


def _zip_slots(params: ParamSet, grads: Grads):
    yield from zip(params.weights, params.m_w, params.v_w, grads.weights)
    yield from zip(params.biases, params.m_b, params.v_b, grads.biases)


def ema_update(params: ParamSet, rate: float) -> ParamSet:
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"EMA rate must lie in (0, 1], got {rate}")
    for e, p in zip(params.ema_weights + params.ema_biases, params.weights + params.biases):
        if rate == 1.0:
            e[...] = p
        else:
            e += rate * (p - e)
    return params


def sync_target(params: ParamSet) -> ParamSet:
    return ema_update(params, 1.0)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: ParamSet, path) -> None:
    """Write the SFQL binary checkpoint (little-endian, float32 payload)."""
    dims = params.spec.dims
    header = bytearray(MAGIC)
    header += struct.pack("<HI", FORMAT_VERSION, params.n_layers)
    for a, b in zip(dims[:-1], dims[1:]):
        header += struct.pack("<II", a, b)
    with open(path, "wb") as f:
        f.write(header)
        for arr in params.arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(struct.pack("<Q", params.step))


def load_params(path, name: str | None = None) -> ParamSet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SFQL checkpoint")
    version, n_layers = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", data, off))
        off += 8
    dims = [shapes[0][0]] + [s[1] for s in shapes]
    spec = LayerSpec(dims[0], tuple(dims[1:-1]), dims[-1])

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        return arr.astype(np.float32)

    groups = []
    for kind in range(8):
        if kind % 2 == 0:
            groups.append([take(s) for s in shapes])
        else:
            groups.append([take((s[1],)) for s in shapes])
    (step,) = struct.unpack_from("<Q", data, off)
    w, b, ew, eb, mw, mb, vw, vb = groups
    return ParamSet(spec, w, b, mw, mb, vw, vb, ew, eb, step,
                    name or Path(path).stem)
