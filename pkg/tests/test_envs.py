import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import rk4_fine

from ddmpc.envs import (
    HEIGHT,
    TILE_MAX,
    TILE_SIDE,
    WIDTH,
    PendulumConfig,
    PendulumState,
    TileState,
    generate_tile_dataset,
    pendulum_energy,
    pendulum_step,
    pgm_bytes,
    read_pgm,
    render_pendulum,
    render_tile,
    tile_positions,
    tile_step,
    wrap_angle,
    write_pgm,
)
from ddmpc.numkit import Rng

angles = st.floats(-math.pi, math.pi, exclude_min=True)


# -- pendulum dynamics -----------------------------------------------------------


def test_equilibria_are_fixed_points():
    assert pendulum_step(PendulumState(0.0, 0.0), 0.0) == PendulumState(0.0, 0.0)
    s = pendulum_step(PendulumState(math.pi, 0.0), 0.0)
    assert abs(wrap_angle(s.angle - math.pi)) < 1e-12 and abs(s.velocity) < 1e-12


def test_step_matches_fine_integrator():
    s = pendulum_step(PendulumState(0.3, 0.0), 0.0)
    phi, om = rk4_fine(0.3, 0.0, 0.0, 0.2, 2000)
    assert abs(s.angle - phi) < 1e-5
    assert abs(s.velocity - om) < 1e-5


def test_torque_is_clamped():
    a = pendulum_step(PendulumState(0.1, 0.2), 50.0)
    b = pendulum_step(PendulumState(0.1, 0.2), 5.0)
    assert a == b
    phi, _ = rk4_fine(0.1, 0.2, 5.0, 0.2, 2000)
    assert abs(a.angle - phi) < 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        PendulumConfig(mass=0.0)
    with pytest.raises(ValueError):
        PendulumConfig(substeps=0)


def test_energy_is_non_increasing_without_torque():
    r = np.random.default_rng(0)
    for _ in range(1000):
        s = PendulumState(r.uniform(-math.pi, math.pi), r.uniform(-8, 8))
        e0 = pendulum_energy(s)
        for _ in range(3):
            s = pendulum_step(s, 0.0)
            e1 = pendulum_energy(s)
            assert e1 <= e0 + 1e-9
            e0 = e1


@given(angles, st.floats(-20, 20), st.floats(-10, 10))
@settings(max_examples=100, deadline=None)
def test_angle_stays_wrapped(phi, omega, u):
    s = pendulum_step(PendulumState(phi, omega), u)
    assert -math.pi < s.angle <= math.pi
    assert math.isfinite(s.velocity)


@pytest.mark.parametrize("x,want", [(math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi), (0.5, 0.5), (-7.0, -7.0 + 2 * math.pi)])
def test_wrap_angle(x, want):
    assert wrap_angle(x) == pytest.approx(want, abs=1e-12)


# -- pendulum rendering ----------------------------------------------------------


@given(angles)
@settings(max_examples=60, deadline=None)
def test_pendulum_image_range_and_mirror(phi):
    img = render_pendulum(PendulumState(phi, 0.0)).reshape(HEIGHT, WIDTH)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.sum(img == 1.0) > 0.8 * img.size
    mirror = render_pendulum(PendulumState(-phi, 0.0)).reshape(HEIGHT, WIDTH)
    assert np.array_equal(img[:, ::-1], mirror)


def test_hanging_rod_occupies_centre_columns_below_centre():
    img = render_pendulum(PendulumState(0.0, 0.0)).reshape(HEIGHT, WIDTH)
    rows, cols = np.nonzero(img < 1.0)
    assert rows.size > 0
    assert set(cols.tolist()) <= {24, 25, 26}
    assert rows.min() >= HEIGHT // 2


@given(angles)
@settings(max_examples=60, deadline=None)
def test_pixel_sum_is_continuous_in_angle(phi):
    a = render_pendulum(PendulumState(phi, 0.0)).sum()
    b = render_pendulum(PendulumState(phi + 1e-3, 0.0)).sum()
    # a 20 px rod sweeps at most ~20 * 1e-3 px of area per side
    assert abs(a - b) < 0.5


# -- moving tile -----------------------------------------------------------------


def test_zero_increment_changes_nothing():
    s = TileState(12.3, 20.7)
    t = tile_step(s, (0.0, 0.0))
    assert t == s and np.array_equal(render_tile(s), render_tile(t))


def test_border_clamping():
    s = tile_step(TileState(2.0, TILE_MAX - 1.0), (-5.0, 5.0))
    assert (s.x, s.y) == (0.0, TILE_MAX)
    img = render_tile(s).reshape(HEIGHT, WIDTH)
    assert np.sum(1.0 - img) == pytest.approx(TILE_SIDE * TILE_SIDE)


# positions on a dyadic grid, so x and x + dx carry the same fractional part exactly
grid = st.integers(0, 20 * 64).map(lambda k: k / 64)


@given(grid, grid, st.integers(-5, 10), st.integers(-5, 10))
@settings(max_examples=60, deadline=None)
def test_integer_shift_translates_image_exactly(x, y, dx, dy):
    a = render_tile(TileState(x, y)).reshape(HEIGHT, WIDTH)
    b = render_tile(TileState(x + dx, y + dy)).reshape(HEIGHT, WIDTH)
    shifted = np.ones_like(a)
    src = a[max(0, -dy) : HEIGHT - max(0, dy), max(0, -dx) : WIDTH - max(0, dx)]
    shifted[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    assert np.array_equal(b, shifted)


@given(st.floats(0, TILE_MAX), st.floats(0, TILE_MAX))
@settings(max_examples=60, deadline=None)
def test_tile_mass_is_constant(x, y):
    img = render_tile(TileState(x, y))
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.sum(1.0 - img) == pytest.approx(TILE_SIDE * TILE_SIDE, abs=1e-9)


def test_tile_dataset_shapes_and_determinism():
    t = generate_tile_dataset(Rng(0), 2)
    assert t.observations.shape == (2, WIDTH * HEIGHT) and t.controls.shape == (1, 2)
    a = generate_tile_dataset(Rng(5), 50)
    b = generate_tile_dataset(Rng(5), 50)
    assert np.array_equal(a.observations, b.observations) and np.array_equal(a.controls, b.controls)


def test_recorded_controls_are_realized_displacements():
    t = generate_tile_dataset(Rng(1), 300, bounds=(10.0, 26.0))
    pos = tile_positions(t.controls)
    assert np.allclose(np.diff(pos, axis=0), t.controls, atol=1e-12)
    assert pos.min() >= 10.0 and pos.max() <= 26.0
    for k in (0, 150, 299):
        assert np.array_equal(t.observations[k], render_tile(TileState(*pos[k])))


def test_increments_are_uniform():
    t = generate_tile_dataset(Rng(2), 10_001, bounds=(0.0, TILE_MAX))
    # the mirror keeps |increment| uniform on [0, 3] whatever the sign flips
    mags = np.abs(t.controls).ravel()
    counts, _ = np.histogram(mags, bins=20, range=(0.0, 3.0))
    assert stats.chisquare(counts).pvalue > 0.01
    assert mags.max() <= 3.0


def test_tile_dataset_argument_checks():
    with pytest.raises(ValueError):
        generate_tile_dataset(Rng(0), 1)
    with pytest.raises(ValueError):
        generate_tile_dataset(Rng(0), 10, bounds=(10.0, 12.0))


# -- PGM -------------------------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    img = render_pendulum(PendulumState(1.0, 0.0))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (HEIGHT, WIDTH)
    assert np.array_equal(back.ravel(), np.rint(255 * img).astype(np.uint8))
    blob = pgm_bytes(img)
    assert blob.startswith(b"P5\n51 51\n255\n")
    assert np.array_equal(read_pgm(blob), back)


def test_pgm_rejects_garbage():
    with pytest.raises(ValueError):
        read_pgm(b"P2\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        read_pgm(b"P5\n2 2\n255\n\x00")
