"""Exponential scaling fits of MAE against model size, and an inference benchmark."""
from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .errors import InsufficientDataError
from .models import Model, count_params

MIN_POINTS = 4
B_RANGE = (0.01, 5.0)
B_GRID_POINTS = 400


@dataclass(frozen=True)
class ScalingFit:
    """``MAE(n) = a·exp(-b·n) + c``."""

    a: float
    b: float
    c: float
    rmse: float
    r2: float
    n_points: int
    size_axis: str = "blocks"

    def predict(self, size):
        return predict_mae(self, size)

    @property
    def decreasing(self) -> bool:
        return self.a > 0 and self.b > 0

    def to_dict(self) -> dict:
        return asdict(self)


def _profile(b: float, x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Best (a, c >= 0) for a fixed rate ``b``; returns (rss, a, c)."""
    e = np.exp(-b * x)
    A = np.column_stack([e, np.ones_like(x)])
    (a, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    if c < 0:
        c = 0.0
        a = float(e @ y / (e @ e))
    r = a * e + c - y
    return float(r @ r), float(a), float(c)


def _polish(a, b, c, rss, x, y):
    """Joint Gauss-Newton pass on (a, b, c).

    The scalar search only pins ``b`` to about sqrt(machine eps) because the
    residual sum is flat at its minimum; working on the residuals directly
    restores full precision. Kept only if it lowers the residual sum.
    """
    def resid(p):
        return p[0] * np.exp(-p[1] * x) + p[2] - y

    def jac(p):
        e = np.exp(-p[1] * x)
        return np.column_stack([e, -p[0] * x * e, np.ones_like(x)])

    lo, hi = [-np.inf, 0.0, 0.0], [np.inf, np.inf, np.inf]
    start = np.clip([a, b, c], np.array(lo) + 0.0, hi)
    try:
        res = least_squares(resid, start, jac=jac, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    except ValueError:
        return a, b, c, rss
    new = float(res.fun @ res.fun)
    if np.all(np.isfinite(res.x)) and new < rss:
        return float(res.x[0]), float(res.x[1]), float(res.x[2]), new
    return a, b, c, rss


def fit_exponential(sizes, maes, size_axis: str = "blocks") -> ScalingFit:
    """Least-squares fit of ``a·exp(-b·n) + c`` with ``b >= 0`` and ``c >= 0``.

    A log-spaced grid over the rate ``b`` (each point solving ``a, c``
    linearly) picks the basin; a bounded scalar search then refines ``b``.
    Large size axes (parameter counts) are rescaled so that the grid range
    stays meaningful; the returned ``b`` is in the caller's units.
    """
    x = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(maes, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("sizes and maes must be 1-D and of equal length")
    if x.size < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} points to fit, got {x.size}")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    if np.any(np.diff(x) <= 0):
        raise ValueError("sizes must be distinct")
    scale = 1.0 if x.max() <= 100 else x.max() / 10.0
    xs = x / scale

    grid = np.geomspace(*B_RANGE, B_GRID_POINTS)
    rss = np.array([_profile(b, xs, y)[0] for b in grid])
    i = int(np.argmin(rss))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best_b = grid[i]
    if hi > lo:
        res = minimize_scalar(lambda b: _profile(b, xs, y)[0], bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-13, "maxiter": 500})
        if res.fun <= rss[i]:
            best_b = float(res.x)
    r, a, c = _profile(best_b, xs, y)
    a, best_b, c, r = _polish(a, best_b, c, r, xs, y)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - r / ss_tot if ss_tot > 0 else (1.0 if r < 1e-20 else 0.0)
    return ScalingFit(a, best_b / scale, c, float(np.sqrt(r / y.size)), r2, int(y.size), size_axis)


def predict_mae(fit: ScalingFit, size):
    out = fit.a * np.exp(-fit.b * np.asarray(size, dtype=np.float64)) + fit.c
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchResult:
    label: str
    num_params: int
    batch_size: int
    repetitions: int
    warmup: int
    mean_s: float
    std_s: float
    transient_bytes: int
    param_bytes: int

    @property
    def memory_bytes(self) -> int:
        return self.transient_bytes + self.param_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory_bytes"] = self.memory_bytes
        return d


def benchmark(model: Model, batch_size: int = 32, repetitions: int = 10, warmup: int = 3, seed: int = 0) -> BenchResult:
    """Time evaluation-mode forward passes and measure their peak allocation.

    Memory is the tracemalloc peak over one forward pass (numpy reports its
    buffers to tracemalloc) plus the bytes held by the parameters.
    """
    if repetitions < 10:
        raise ValueError("repetitions must be >= 10")
    if warmup < 3:
        raise ValueError("warmup must be >= 3")
    s = model.spec
    x = np.random.default_rng(seed).normal(size=(batch_size, s.input_channels, s.input_length))
    for _ in range(warmup):
        model.forward(x, training=False)
    times = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            model.forward(x, training=False)
            times.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        model.forward(x, training=False)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    param_bytes = sum(t.data.nbytes for _, t in model.named_params())
    t = np.array(times)
    return BenchResult(s.label, count_params(model), batch_size, repetitions, warmup,
                       float(t.mean()), float(t.std(ddof=1)), int(peak - base), int(param_bytes))
