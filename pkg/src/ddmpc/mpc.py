"""Receding-horizon control in the learned feature space.

The planner minimizes ``sum_k ||z_hat_k - z_ref||^2 + lam * ||u_k||^2`` over K
controls, where ``z_hat_k`` is the open-loop prediction after applying
``u_0 .. u_k``.  Controls are kept inside their box through the smooth map
``u = centre + radius * tanh(v)`` so the optimizer itself stays unconstrained.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DdmParams, HistoryState, activate, activation_slope, encode, make_history, rollout_features
from .numkit import NonFiniteError, OptimizerOptions, Rng, lbfgs_minimize

# keeps warm starts away from the flat tails of tanh
_WARM_START_CLIP = 0.995


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 15
    control_penalty: float = 0.01
    u_min: tuple = (-5.0,)
    u_max: tuple = (5.0,)
    epsilon: float = 0.2
    # constant sequences (in tanh space) tried alongside the warm start
    extra_starts: tuple = (2.0, -2.0)
    planner: OptimizerOptions = field(
        default_factory=lambda: OptimizerOptions(max_iterations=100, gradient_tolerance=1e-6)
    )

    def __post_init__(self):
        object.__setattr__(self, "u_min", tuple(float(v) for v in np.atleast_1d(self.u_min)))
        object.__setattr__(self, "u_max", tuple(float(v) for v in np.atleast_1d(self.u_max)))
        object.__setattr__(self, "extra_starts", tuple(float(v) for v in self.extra_starts))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.control_penalty < 0:
            raise ValueError("control penalty must be non-negative")
        if len(self.u_min) != len(self.u_max) or any(a > b for a, b in zip(self.u_min, self.u_max)):
            raise ValueError("need u_min <= u_max elementwise")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def control_dim(self) -> int:
        return len(self.u_min)


@dataclass
class Plan:
    controls: np.ndarray  # (K, F)
    features: np.ndarray  # (K, m)
    cost: float
    ok: bool = True
    iterations: int = 0

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def shifted(self) -> np.ndarray:
        """Controls advanced one step with the last one repeated."""
        return np.concatenate([self.controls[1:], self.controls[-1:]], axis=0)


def make_state(params: DdmParams, recent_observations: Sequence, recent_controls: Sequence) -> HistoryState:
    """Encode the n most recent observations (newest first) into an MPC state."""
    if len(recent_observations) != params.n or len(recent_controls) != params.n - 1:
        raise ValueError(
            f"need {params.n} observations and {params.n - 1} controls, "
            f"got {len(recent_observations)} and {len(recent_controls)}"
        )
    feats = encode(params, np.stack([np.asarray(y, dtype=np.float64) for y in recent_observations]))
    ctrls = [np.atleast_1d(np.asarray(u, dtype=np.float64)) for u in recent_controls]
    for u in ctrls:
        if u.shape != (params.control_dim,):
            raise ValueError(f"control has dimension {u.size}, expected {params.control_dim}")
    return make_history(list(feats), ctrls)


def encode_reference(params: DdmParams, y_ref) -> np.ndarray:
    return encode(params, np.asarray(y_ref, dtype=np.float64))


def mpc_cost(params: DdmParams, state0: HistoryState, z_ref, controls, lam: float):
    """Cost and exact gradient with respect to every control.

    Returns ``(cost, grad)`` with ``grad`` shaped like ``controls`` (K, F).
    """
    U = np.asarray(controls, dtype=np.float64).reshape(len(controls), -1)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    n, m, F = params.n, params.feature_dim, params.control_dim
    K = U.shape[0]
    if U.shape[1] != F:
        raise ValueError(f"controls have dimension {U.shape[1]}, model expects {F}")
    if z_ref.shape != (m,):
        raise ValueError(f"reference feature has shape {z_ref.shape}, expected ({m},)")
    if state0.order != n:
        raise ValueError(f"history holds {state0.order} features, model order is {n}")
    layers = params.predictor.layers

    # S[i + n - 1] holds feature index i (i <= 0 from the state, i >= 1 predicted)
    S = np.empty((K + n, m))
    for j, z in enumerate(state0.features):
        S[n - 1 - j] = z
    # Uall[i + n - 1] holds control index i (negative ones from the state)
    Uall = np.empty((K + n - 1, F))
    for j, u in enumerate(state0.controls):
        Uall[n - 2 - j] = u
    Uall[n - 1 :] = U

    w = m + F
    caches = []
    x = np.empty(n * w)
    for k in range(K):
        for j in range(n):
            x[j * w : j * w + m] = S[k - j + n - 1]
            x[j * w + m : (j + 1) * w] = Uall[k - j + n - 1]
        h = x.copy()
        layer_cache = []
        for l in layers:
            pre = l.weight @ h + l.bias
            layer_cache.append((h, pre))
            h = activate(l.activation, pre)
        caches.append(layer_cache)
        S[k + n] = h
    if not np.all(np.isfinite(S)):
        bad = int(np.argmax(~np.all(np.isfinite(S[n:]), axis=1)))
        raise NonFiniteError(f"rollout became non-finite at step {bad}", U, index=bad)

    D = S[n:] - z_ref
    cost = float(np.sum(D * D) + lam * np.sum(U * U))

    dS = np.zeros((K + n, m))
    dS[n:] = 2.0 * D
    dU = 2.0 * lam * U
    for k in range(K - 1, -1, -1):
        d = dS[k + n]
        for l, (h, pre) in zip(reversed(layers), reversed(caches[k])):
            if l.activation != "affine":
                d = d * activation_slope(l.activation, pre)
            d = l.weight.T @ d
        for j in range(n):
            i = k - j
            if i >= 1:
                dS[i + n - 1] += d[j * w : j * w + m]
            if i >= 0:
                dU[i] += d[j * w + m : (j + 1) * w]
    return cost, dU


class _BoxMap:
    """u = centre + radius * tanh(v) on bounded coordinates, identity elsewhere."""

    def __init__(self, u_min, u_max):
        lo = np.asarray(u_min, dtype=np.float64)
        hi = np.asarray(u_max, dtype=np.float64)
        self.bounded = np.isfinite(lo) & np.isfinite(hi)
        self.centre = np.where(self.bounded, 0.5 * (lo + hi), 0.0)
        self.radius = np.where(self.bounded, 0.5 * (hi - lo), 1.0)
        self.lo, self.hi = lo, hi

    def forward(self, V):
        T = np.tanh(V)
        U = np.where(self.bounded, self.centre + self.radius * T, V)
        dU = np.where(self.bounded, self.radius * (1.0 - T * T), 1.0)
        return np.clip(U, self.lo, self.hi), dU

    def inverse(self, U):
        s = np.where(self.bounded, (U - self.centre) / np.where(self.radius > 0, self.radius, 1.0), U)
        s_clipped = np.clip(s, -_WARM_START_CLIP, _WARM_START_CLIP)
        return np.where(self.bounded, np.arctanh(s_clipped), U)


def plan(params: DdmParams, state0: HistoryState, z_ref, cfg: MpcConfig, warm_start: Plan | np.ndarray | None = None) -> Plan:
    """Minimize the MPC cost over the control sequence.

    ``warm_start`` may be a previous :class:`Plan` (shifted one step here) or an
    explicit (K, F) control array used as is.  The optimizer is also started
    from each constant sequence in ``cfg.extra_starts`` and the cheapest
    result wins, so the returned plan never costs more than the warm start.
    """
    K, F = cfg.horizon, cfg.control_dim
    if F != params.control_dim:
        raise ValueError(f"config has {F} control dimensions, model has {params.control_dim}")
    box = _BoxMap(cfg.u_min, cfg.u_max)
    if isinstance(warm_start, Plan):
        U0 = warm_start.shifted()
    elif warm_start is not None:
        U0 = np.asarray(warm_start, dtype=np.float64).reshape(K, F)
    else:
        U0 = np.tile(np.clip(np.zeros(F), box.lo, box.hi), (K, 1))
    if U0.shape != (K, F):
        raise ValueError(f"warm start has shape {U0.shape}, expected {(K, F)}")
    U0 = np.clip(U0, box.lo, box.hi)
    lam = cfg.control_penalty
    z_ref = np.asarray(z_ref, dtype=np.float64)

    def fun(v):
        V = v.reshape(K, F)
        U, dU = box.forward(V)
        c, g = mpc_cost(params, state0, z_ref, U, lam)
        return c, (g * dU).ravel()

    cost0, _ = mpc_cost(params, state0, z_ref, U0, lam)
    starts = [box.inverse(U0)] + [np.full((K, F), v) for v in cfg.extra_starts]
    U, cost, iters, finished, clean = U0, cost0, 0, 0, True
    for v0 in starts:
        try:
            res = lbfgs_minimize(fun, v0.ravel(), cfg.planner)
        except NonFiniteError:
            continue
        finished += 1
        iters += res.iterations
        Ui, _ = box.forward(res.x.reshape(K, F))
        ci, _ = mpc_cost(params, state0, z_ref, Ui, lam)
        if ci < cost:
            U, cost, clean = Ui, ci, not res.line_search_failed
    ok = finished > 0 and clean
    return Plan(U, rollout_features(params, state0, U), float(cost), ok, iters)


def epsilon_greedy_action(p: Plan, cfg: MpcConfig, rng: Rng):
    """First planned control with probability 1-eps, else uniform in the box.

    Returns ``(u, was_random)``.
    """
    if p.horizon < 1:
        raise ValueError("plan is empty")
    if rng.random() < cfg.epsilon:
        return np.array([rng.uniform(lo, hi) if hi > lo else lo for lo, hi in zip(cfg.u_min, cfg.u_max)]), True
    return p.controls[0].copy(), False


def plan_csv(p: Plan, z_ref, lam: float) -> str:
    """Debug dump: step, u[..], zhat[..], running (per-step) cost."""
    z_ref = np.asarray(z_ref, dtype=np.float64)
    F = p.controls.shape[1]
    m = p.features.shape[1]
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["step", *[f"u{i}" for i in range(F)], *[f"zhat{i}" for i in range(m)], "running_cost"])
    for k in range(p.horizon):
        u, z = p.controls[k], p.features[k]
        c = float(np.sum((z - z_ref) ** 2) + lam * np.sum(u * u))
        wr.writerow([k, *[repr(float(v)) for v in u], *[repr(float(v)) for v in z], repr(c)])
    return out.getvalue()
