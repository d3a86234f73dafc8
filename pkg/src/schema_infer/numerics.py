"""Shared numerical kernels: seeded randomness, normalization, optimizer, schedule,
and finite-difference gradient verification.

All math runs in float64; file formats quantize to float32 on disk. Every random
draw in the repository flows through :class:`SeededRng` (Philox streams), so a
fixed seed reproduces results byte-for-byte at a fixed thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Matrix = np.ndarray

LAYER_NORM_EPS = 1e-5


class SeededRng:
    """Deterministic random stream backed by a counter-based Philox generator.

    State is single-owner: never share an instance across threads. Parallel
    callers take independent child streams via :meth:`split`.
    """

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._ss))

    def split(self, n: int) -> list["SeededRng"]:
        """n independent child streams, deterministic in the parent seed."""
        return [SeededRng(self.seed, _ss=child) for child in self._ss.spawn(n)]

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice_weighted(self, n: int, weights: np.ndarray) -> int:
        """Index in [0, n) drawn with probability proportional to weights."""
        total = float(weights.sum())
        if total <= 0:
            return int(self.gen.integers(0, n))
        return int(self.gen.choice(n, p=weights / total))


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> Matrix:
    """rows x cols matrix of i.i.d. standard normal entries from the seeded stream."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs positive shape, got ({rows}, {cols})")
    return rng.normal((rows, cols))


def softmax_row(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts a vector or a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Matrix, gain: np.ndarray, bias: np.ndarray) -> Matrix:
    """Row-wise layer normalization followed by the elementwise affine map.

    Each row is centered and scaled by 1/sqrt(var + 1e-5); constant rows map to
    zero pre-affine instead of dividing by zero.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ValueError("gain/bias length must equal the column count")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + LAYER_NORM_EPS)
    return normed * gain + bias


@dataclass
class CosineSchedule:
    """lr(t) = minimum + (base - minimum) * (1 + cos(pi * t / total)) / 2."""

    base: float
    minimum: float
    total: int

    def lr(self, step: int) -> float:
        t = min(max(step, 0), self.total)
        if self.total == 0:
            return self.minimum
        return self.minimum + 0.5 * (self.base - self.minimum) * (1.0 + math.cos(math.pi * t / self.total))


@dataclass
class AdamWState:
    """Per-tensor first/second moment accumulators plus the shared step counter."""

    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def drop(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)

    def filter(self, name: str, keep: np.ndarray) -> None:
        """Shrink the moments of `name` to the kept entries (edge pruning)."""
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]


def adamw_step(
    state: AdamWState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place, over named tensors.

    Decay multiplies parameters by (1 - lr * wd) directly, outside the moment
    estimates; moments are bias-corrected. Tensors without a gradient entry are
    left untouched.
    """
    if lr is None:
        lr = state.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay != 0.0:
            p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    per_param: dict[str, float]
    passed: bool
    tol: float


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic_grads: dict[str, np.ndarray],
    step: float = 1e-6,
    tol: float = 1e-4,
) -> FiniteDiffReport:
    """Central-difference check of analytic gradients, coordinate by coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8); the report
    carries the per-tensor and global maxima.
    """
    per_param: dict[str, float] = {}
    worst = 0.0
    worst_param = ""
    worst_index: tuple = ()
    for name, p in params.items():
        a = analytic_grads[name]
        flat = p.reshape(-1)
        err_max = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = a.reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = abs(analytic - numeric) / denom
            if err > err_max:
                err_max = err
            if err > worst:
                worst = err
                worst_param = name
                worst_index = np.unravel_index(i, p.shape)
        per_param[name] = err_max
    return FiniteDiffReport(
        max_rel_err=worst,
        worst_param=worst_param,
        worst_index=worst_index,
        per_param=per_param,
        passed=worst < tol,
        tol=tol,
    )


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map; with threads > 1 runs on a thread pool.

    Results are collected in input order, so output is identical for any
    thread count as long as fn is pure per item.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
