import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import mpc_cost_loop

from ddmpc.model import DdmParams, Layer, Mlp, encode, make_history, rollout_features
from ddmpc.mpc import MpcConfig, Plan, encode_reference, epsilon_greedy_action, make_state, mpc_cost, plan, plan_csv
from ddmpc.numkit import NonFiniteError, OptimizerOptions, Rng, finite_diff_grad


def integrator(gain_z=1.0, gain_u=1.0):
    """Scalar model with z_{t+1} = gain_z * z_t + gain_u * u_t (n = 1)."""
    enc = Mlp([Layer(np.array([[1.0]]), np.zeros(1), "scaled_arctan")])
    dec = Mlp([Layer(np.array([[1.0]]), np.zeros(1), "affine")])
    pred = Mlp([Layer(np.array([[gain_z, gain_u]]), np.zeros(1), "affine")])
    return DdmParams(enc, dec, pred, n=1, control_dim=1)


def scalar_cfg(K, lam, bound=2.0, **kw):
    opts = OptimizerOptions(max_iterations=200, gradient_tolerance=1e-10)
    return MpcConfig(horizon=K, control_penalty=lam, u_min=(-bound,), u_max=(bound,), planner=opts, **kw)


def random_model(seed=0, n=2, F=1, sizes=(6, 4, 2), hidden=(4,), scale=2.0):
    return DdmParams.zeros(sizes, hidden, n, F).randomized(Rng(seed), scale)


def random_state(p, seed=0):
    r = np.random.default_rng(seed)
    feats = [r.uniform(-0.8, 0.8, p.feature_dim) for _ in range(p.n)]
    ctrls = [r.uniform(-2, 2, p.control_dim) for _ in range(p.n - 1)]
    return make_history(feats, ctrls)


# -- state construction -----------------------------------------------------------


def test_make_state_order_one_and_two():
    p1 = random_model(1, n=1)
    s1 = make_state(p1, [np.ones(6)], [])
    assert s1.order == 1 and len(s1.controls) == 0
    p2 = random_model(2, n=2)
    Y = np.random.default_rng(0).normal(size=(2, 6))
    s2 = make_state(p2, list(Y), [np.array([0.5])])
    assert np.allclose(s2.features[0], encode(p2, Y[0]), rtol=0, atol=1e-15)
    assert np.allclose(s2.features[1], encode(p2, Y[1]), rtol=0, atol=1e-15)
    assert np.array_equal(encode_reference(p2, Y[0]), encode(p2, Y[0]))


def test_make_state_with_zero_encoder():
    p = DdmParams.zeros((6, 4, 2), (4,), 2, 1)
    s = make_state(p, [np.ones(6), -np.ones(6)], [np.zeros(1)])
    assert all(np.array_equal(z, np.zeros(2)) for z in s.features)


def test_make_state_count_errors():
    p = random_model()
    with pytest.raises(ValueError):
        make_state(p, [np.zeros(6)], [])
    with pytest.raises(ValueError):
        make_state(p, [np.zeros(6)] * 2, [])
    with pytest.raises(ValueError):
        make_state(p, [np.zeros(6)] * 2, [np.zeros(2)])


# -- cost and gradient ---------------------------------------------------------------


def test_zero_dynamics_zero_cost():
    p = DdmParams.zeros((6, 4, 2), (4,), 2, 1)
    c, g = mpc_cost(p, random_state(p), np.zeros(2), np.zeros((5, 1)), 0.3)
    assert c == 0.0 and np.array_equal(g, np.zeros((5, 1)))


@pytest.mark.parametrize("u", [-1.5, 0.0, 0.3, 2.0])
def test_single_step_cost_and_gradient(u):
    # z_hat = u from z_0 = 0 through the pure control map
    p = integrator(gain_z=0.0)
    c, g = mpc_cost(p, make_history([np.zeros(1)], []), np.ones(1), np.array([[u]]), 0.0)
    assert c == pytest.approx((u - 1.0) ** 2, abs=1e-15)
    assert g[0, 0] == pytest.approx(2.0 * (u - 1.0), abs=1e-15)


@pytest.mark.parametrize("n,F,K", [(1, 1, 1), (2, 1, 15), (3, 2, 7), (2, 2, 15)])
def test_cost_matches_loop_oracle(n, F, K):
    p = random_model(3, n=n, F=F)
    s = random_state(p, 4)
    U = np.random.default_rng(5).uniform(-3, 3, (K, F))
    z_ref = np.array([0.2, -0.4])
    c, _ = mpc_cost(p, s, z_ref, U, 0.05)
    assert c == pytest.approx(mpc_cost_loop(p, s.features, s.controls, z_ref, U, 0.05), rel=1e-12)


@pytest.mark.parametrize("n,F,K", [(1, 1, 3), (2, 1, 15), (3, 2, 10), (2, 1, 1)])
def test_gradient_matches_finite_differences(n, F, K):
    p = random_model(6, n=n, F=F)
    s = random_state(p, 7)
    U = np.random.default_rng(8).uniform(-2, 2, (K, F))
    z_ref = np.array([0.5, 0.1])
    _, g = mpc_cost(p, s, z_ref, U, 0.01)
    fd = finite_diff_grad(lambda v: mpc_cost(p, s, z_ref, v.reshape(K, F), 0.01)[0], U.ravel(), 1e-6)
    err = np.abs(g.ravel() - fd)
    assert np.all(err <= 1e-5 * np.maximum(np.abs(fd), 1e-3))


@given(st.integers(0, 10_000), st.integers(1, 15))
@settings(max_examples=25, deadline=None)
def test_gradient_property(seed, K):
    p = random_model(seed, n=2)
    s = random_state(p, seed)
    U = np.random.default_rng(seed).uniform(-3, 3, (K, 1))
    z_ref = np.array([0.3, -0.3])
    _, g = mpc_cost(p, s, z_ref, U, 0.01)
    fd = finite_diff_grad(lambda v: mpc_cost(p, s, z_ref, v.reshape(K, 1), 0.01)[0], U.ravel(), 1e-6)
    assert np.max(np.abs(g.ravel() - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_cost_dimension_errors():
    p = random_model()
    s = random_state(p)
    with pytest.raises(ValueError):
        mpc_cost(p, s, np.zeros(3), np.zeros((2, 1)), 0.0)
    with pytest.raises(ValueError):
        mpc_cost(p, s, np.zeros(2), np.zeros((2, 2)), 0.0)


def test_nonfinite_rollout_reports_step():
    p = integrator(gain_z=1e200)
    with pytest.raises(NonFiniteError) as info, np.errstate(over="ignore", invalid="ignore"):
        mpc_cost(p, make_history([np.ones(1)], []), np.zeros(1), np.ones((4, 1)), 0.0)
    assert info.value.index == 1


# -- planning ------------------------------------------------------------------------


def test_single_step_plan_without_penalty():
    p = integrator()
    res = plan(p, make_history([np.zeros(1)], []), np.ones(1), scalar_cfg(1, 0.0))
    assert res.controls[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert res.ok


def test_single_step_plan_with_penalty():
    p = integrator()
    res = plan(p, make_history([np.zeros(1)], []), np.ones(1), scalar_cfg(1, 1.0))
    assert res.controls[0, 0] == pytest.approx(0.5, abs=1e-6)
    assert res.cost == pytest.approx(0.5, abs=1e-10)


def _grid_search(cost, lo, hi, steps=(0.1, 0.01, 0.001)):
    """Coarse-to-fine grid search on a box; each level searches +-one coarse cell."""
    centre = None
    for i, h in enumerate(steps):
        if centre is None:
            axes = [np.arange(lo, hi + h / 2, h)] * 3
        else:
            span = steps[i - 1]
            axes = [np.clip(np.arange(c - span, c + span + h / 2, h), lo, hi) for c in centre]
        pts = np.array(list(itertools.product(*axes)))
        vals = cost(pts)
        centre = pts[int(np.argmin(vals))]
    return centre, float(np.min(vals))


def test_three_step_plan_matches_grid_search():
    p = integrator()
    lam = 0.01

    def cost(P):
        z = np.zeros(P.shape[0])
        total = np.zeros(P.shape[0])
        for k in range(3):
            z = z + P[:, k]
            total += (z - 1.0) ** 2 + lam * P[:, k] ** 2
        return total

    u_grid, c_grid = _grid_search(cost, -2.0, 2.0)
    res = plan(p, make_history([np.zeros(1)], []), np.ones(1), scalar_cfg(3, lam))
    assert np.allclose(res.controls[:, 0], u_grid, atol=2e-3)
    assert res.cost <= c_grid + 1e-9
    assert c_grid - res.cost < 1e-5


def test_plan_record_is_consistent():
    p = random_model(9)
    s = random_state(p, 10)
    cfg = MpcConfig(horizon=6, planner=OptimizerOptions(max_iterations=30))
    z_ref = np.array([0.7, -0.7])
    res = plan(p, s, z_ref, cfg)
    assert res.controls.shape == (6, 1) and res.features.shape == (6, 2)
    assert res.cost == pytest.approx(mpc_cost(p, s, z_ref, res.controls, cfg.control_penalty)[0], rel=1e-12)
    assert np.allclose(res.features, rollout_features(p, s, res.controls))


@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
@settings(max_examples=20, deadline=None)
def test_plan_respects_bounds_and_never_loses_to_warm_start(seed, bound):
    p = random_model(seed, scale=3.0)
    s = random_state(p, seed)
    z_ref = np.random.default_rng(seed).uniform(-0.9, 0.9, 2)
    cfg = MpcConfig(horizon=5, u_min=(-bound,), u_max=(bound,), planner=OptimizerOptions(max_iterations=15))
    prev = Plan(np.random.default_rng(seed + 1).uniform(-bound, bound, (5, 1)), np.zeros((5, 2)), 0.0)
    res = plan(p, s, z_ref, cfg, warm_start=prev)
    assert np.all(res.controls >= -bound) and np.all(res.controls <= bound)
    warm_cost, _ = mpc_cost(p, s, z_ref, prev.shifted(), cfg.control_penalty)
    assert res.cost <= warm_cost + 1e-12


def test_plan_is_deterministic():
    p = random_model(11)
    s = random_state(p, 12)
    cfg = MpcConfig(horizon=8, planner=OptimizerOptions(max_iterations=20))
    a = plan(p, s, np.zeros(2), cfg)
    b = plan(p, s, np.zeros(2), cfg)
    assert np.array_equal(a.controls, b.controls) and a.cost == b.cost


def test_shifted_repeats_last_control():
    pl = Plan(np.array([[1.0], [2.0], [3.0]]), np.zeros((3, 2)), 0.0)
    assert pl.shifted().ravel().tolist() == [2.0, 3.0, 3.0]


@pytest.mark.parametrize(
    "kw",
    [dict(horizon=0), dict(control_penalty=-1.0), dict(u_min=(1.0,), u_max=(0.0,)), dict(epsilon=1.5)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MpcConfig(**kw)


# -- exploration ---------------------------------------------------------------------


def _plan_with_first(u0):
    return Plan(np.array([[u0], [0.0]]), np.zeros((2, 2)), 0.0)


def test_greedy_when_epsilon_zero():
    rng = Rng(0)
    cfg = MpcConfig(epsilon=0.0)
    for _ in range(200):
        u, rnd = epsilon_greedy_action(_plan_with_first(1.25), cfg, rng)
        assert u[0] == 1.25 and not rnd


def test_random_when_epsilon_one():
    rng = Rng(1)
    cfg = MpcConfig(epsilon=1.0)
    draws = []
    for _ in range(2000):
        u, rnd = epsilon_greedy_action(_plan_with_first(1.25), cfg, rng)
        assert rnd
        draws.append(u[0])
    draws = np.array(draws)
    assert draws.min() >= -5.0 and draws.max() <= 5.0
    assert abs(draws.mean()) < 0.3 and abs(draws.std() - 10 / np.sqrt(12)) < 0.2


def test_random_fraction_matches_epsilon():
    rng = Rng(2)
    cfg = MpcConfig(epsilon=0.2)
    flags = [epsilon_greedy_action(_plan_with_first(0.0), cfg, rng)[1] for _ in range(10_000)]
    assert abs(np.mean(flags) - 0.2) <= 0.02


def test_plan_csv_columns():
    pl = Plan(np.array([[1.0], [-1.0]]), np.array([[0.1, 0.2], [0.3, 0.4]]), 0.0)
    rows = list(csv.reader(io.StringIO(plan_csv(pl, np.zeros(2), 0.5))))
    assert rows[0] == ["step", "u0", "zhat0", "zhat1", "running_cost"]
    assert float(rows[1][-1]) == pytest.approx(0.01 + 0.04 + 0.5)
    assert len(rows) == 3
