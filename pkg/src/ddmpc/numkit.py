"""Numerical substrate: vectors, seeded randomness, L-BFGS and finite differences.

Everything here works on plain float64 numpy arrays.  The optimizer is a
limited-memory BFGS with a strong-Wolfe line search (cubic-interpolation zoom);
it is deterministic for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ValueAndGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class NonFiniteError(FloatingPointError):
    """Raised when an objective, gradient or vector holds NaN/Inf.

    ``x`` carries the offending iterate (or None) and ``index`` the offending
    coordinate when known.
    """

    def __init__(self, message: str, x: np.ndarray | None = None, index: int | None = None):
        super().__init__(message)
        self.x = None if x is None else np.array(x, copy=True)
        self.index = index


def vec(values, dim: int | None = None) -> np.ndarray:
    """Return ``values`` as a finite 1-D float64 array, checking ``dim`` if given."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected vector of length {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector contains non-finite values", v)
    return v


def mat(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``values`` as a finite 2-D float64 array with optional shape check."""
    a = np.array(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ValueError(f"expected matrix {rows}x{cols}, got {a.shape[0]}x{a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains non-finite values")
    return a


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded, counter-based random source (Philox).

    ``split(k)`` derives an independent child stream keyed on the parent seed
    path plus ``k``; the parent's own stream is not advanced by splitting.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, stream: int) -> "Rng":
        return Rng(self.seed, self.path + (int(stream),))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    """One uniform draw from ``[lo, hi)``."""
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    The step for coordinate i is ``h * max(1, |x_i|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    g = np.empty_like(x)
    for i in range(x.size):
        hi = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}", x, index=i)
        g[i] = (fp - fm) / (xp[i] - xm[i])
    return g


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerOptions:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    memory_pairs: int = 20
    sufficient_decrease: float = 1e-4
    curvature: float = 0.9
    max_line_search_steps: int = 25
    # relative change in f below which the run counts as stalled
    f_tolerance: float = 0.0

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.memory_pairs < 1:
            raise ValueError("memory_pairs must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0.0 < self.sufficient_decrease < self.curvature < 1.0:
            raise ValueError("need 0 < sufficient_decrease < curvature < 1")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    line_search_failed: bool = False
    message: str = ""
    history: list = field(default_factory=list)

    def __iter__(self):
        # allows ``x, f, it = lbfgs_minimize(...)``
        return iter((self.x, self.fun, self.iterations))


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through (a, fa, ga), (b, fb, gb), clipped to [a, b]."""
    lo, hi = (a, b) if a <= b else (b, a)
    if a == b:
        return a
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc >= 0.0:
        d2 = math.copysign(math.sqrt(disc), b - a)
        denom = gb - ga + 2.0 * d2
        if denom != 0.0:
            t = b - (b - a) * (gb + d2 - d1) / denom
            if math.isfinite(t):
                return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


class _Evaluator:
    def __init__(self, fun: ValueAndGrad, n: int):
        self.fun = fun
        self.n = n
        self.count = 0

    def __call__(self, x):
        f, g = self.fun(x)
        self.count += 1
        f = float(f)
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        if g.shape[0] != self.n:
            raise ValueError(f"gradient has length {g.shape[0]}, expected {self.n}")
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise NonFiniteError("objective or gradient is non-finite", x)
        return f, g


def _strong_wolfe(ev, x, f0, g0, d, alpha, opts: OptimizerOptions):
    """Line search along ``d``; returns (alpha, f, g, ok) for the best point seen."""
    c1, c2 = opts.sufficient_decrease, opts.curvature
    dphi0 = float(g0 @ d)
    best = (0.0, f0, g0)

    prev_a, prev_f, prev_dphi = 0.0, f0, dphi0
    a = alpha
    lo = hi = None
    for i in range(opts.max_line_search_steps):
        f, g = ev(x + a * d)
        dphi = float(g @ d)
        if f < best[1]:
            best = (a, f, g)
        if f > f0 + c1 * a * dphi0 or (i > 0 and f >= prev_f):
            lo, hi = (prev_a, prev_f, prev_dphi), (a, f, dphi)
            break
        if abs(dphi) <= -c2 * dphi0:
            return a, f, g, True
        if dphi >= 0:
            lo, hi = (a, f, dphi), (prev_a, prev_f, prev_dphi)
            break
        prev_a, prev_f, prev_dphi = a, f, dphi
        a = min(4.0 * a, 1e10)
    else:
        return best[0], best[1], best[2], False

    # zoom between lo (satisfies sufficient decrease, lowest f) and hi
    for _ in range(opts.max_line_search_steps):
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi, d_hi = hi
        width = abs(a_hi - a_lo)
        a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        # keep the trial away from the bracket ends
        margin = 0.01 * width
        a = min(max(a, min(a_lo, a_hi) + margin), max(a_lo, a_hi) - margin)
        if width <= 1e-16 * max(1.0, abs(a_lo)):
            break
        f, g = ev(x + a * d)
        dphi = float(g @ d)
        if f < best[1]:
            best = (a, f, g)
        if f > f0 + c1 * a * dphi0 or f >= f_lo:
            hi = (a, f, dphi)
        else:
            if abs(dphi) <= -c2 * dphi0:
                return a, f, g, True
            if dphi * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a, f, dphi)
    return best[0], best[1], best[2], False


def lbfgs_minimize(fun: ValueAndGrad, x0, opts: OptimizerOptions | None = None) -> OptimizeResult:
    """Minimize ``fun`` (returning value and gradient) starting from ``x0``.

    Stops when the gradient 2-norm drops to ``opts.gradient_tolerance`` or
    after ``opts.max_iterations`` accepted steps.  A line search that lowers f
    without meeting the strong Wolfe conditions is accepted once (the curvature
    memory is reset); two in a row, or one that cannot lower f at all, end the
    run with ``line_search_failed`` set and the best point seen.
    The returned objective never exceeds the value at ``x0``.
    """
    opts = opts or OptimizerOptions()
    x = np.array(x0, dtype=np.float64).reshape(-1)
    ev = _Evaluator(fun, x.size)
    f, g = ev(x)
    history = [f]
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []

    def done(it, converged, failed=False, msg=""):
        return OptimizeResult(x, f, g, it, ev.count, converged, failed, msg, history)

    if float(np.linalg.norm(g)) <= opts.gradient_tolerance:
        return done(0, True, msg="gradient tolerance met at start")

    weak_steps = 0  # consecutive line searches that reduced f without meeting Wolfe
    for it in range(1, opts.max_iterations + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if s_list:
            gamma = float(s_list[-1] @ y_list[-1]) / float(y_list[-1] @ y_list[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        d = -q
        if float(g @ d) >= 0:
            # lost descent; restart from steepest descent
            s_list.clear(), y_list.clear(), rho_list.clear()
            d = -g
        step0 = 1.0 if s_list else min(1.0, 1.0 / max(float(np.abs(g).sum()), 1e-300))

        a, f_new, g_new, ok = _strong_wolfe(ev, x, f, g, d, step0, opts)
        if a == 0.0 or f_new > f:
            return done(it - 1, False, True, "line search failed to reduce the objective")
        s = a * d
        y = g_new - g
        x_new = x + s
        f_old = f
        x, f, g = x_new, f_new, g_new
        history.append(f)
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > opts.memory_pairs:
                s_list.pop(0), y_list.pop(0), rho_list.pop(0)
        if float(np.linalg.norm(g)) <= opts.gradient_tolerance:
            return done(it, True, msg="gradient tolerance met")
        if ok:
            weak_steps = 0
        else:
            weak_steps += 1
            if weak_steps >= 2:
                return done(it, False, True, "line search did not satisfy the strong Wolfe conditions")
            # the step still lowered f; restart the curvature memory and go on
            s_list.clear(), y_list.clear(), rho_list.clear()
        if opts.f_tolerance > 0 and f_old - f <= opts.f_tolerance * max(abs(f_old), abs(f), 1.0):
            return done(it, False, msg="relative objective change below f_tolerance")
    return done(opts.max_iterations, False, msg="iteration limit reached")


def rel_close(a: Sequence[float], b: Sequence[float], rtol: float = 1e-5, floor: float = 1e-8) -> bool:
    """Elementwise ``|a-b| <= rtol * max(|a|, |b|, floor/rtol)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor / rtol)
    return bool(np.all(np.abs(a - b) <= rtol * scale))
