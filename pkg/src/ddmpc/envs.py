"""Simulated environments that only expose pixels: a torque-driven pendulum and a moving tile.

Angle convention: phi = 0 hangs straight down, phi = +-pi is upright.  Images are
51x51 grayscale in [0, 1], row-major, background 1.0 and foreground dark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import Rng
from .training import Trajectory

WIDTH = HEIGHT = 51


def wrap_angle(phi: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(phi + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# ---------------------------------------------------------------------------
# pendulum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PendulumState:
    angle: float = 0.0
    velocity: float = 0.0


@dataclass(frozen=True)
class PendulumConfig:
    mass: float = 1.0
    length: float = 1.0
    friction: float = 1.0
    gravity: float = 9.81
    torque_bound: float = 5.0
    dt: float = 0.2
    substeps: int = 10
    rod_pixels: float = 20.0

    def __post_init__(self):
        for name in ("mass", "length", "friction", "gravity", "torque_bound", "dt", "substeps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _pendulum_rhs(phi, omega, u, cfg: PendulumConfig):
    ml2 = cfg.mass * cfg.length * cfg.length
    return omega, (u - cfg.friction * omega - cfg.mass * cfg.gravity * cfg.length * math.sin(phi)) / ml2


def pendulum_step(state: PendulumState, u: float, cfg: PendulumConfig = PendulumConfig()) -> PendulumState:
    """Advance one sample period with RK4 on ``cfg.substeps`` sub-intervals.

    The torque is clamped to the configured bound and held constant over the
    period.
    """
    u = min(max(float(u), -cfg.torque_bound), cfg.torque_bound)
    h = cfg.dt / cfg.substeps
    phi, om = state.angle, state.velocity
    for _ in range(cfg.substeps):
        k1p, k1o = _pendulum_rhs(phi, om, u, cfg)
        k2p, k2o = _pendulum_rhs(phi + 0.5 * h * k1p, om + 0.5 * h * k1o, u, cfg)
        k3p, k3o = _pendulum_rhs(phi + 0.5 * h * k2p, om + 0.5 * h * k2o, u, cfg)
        k4p, k4o = _pendulum_rhs(phi + h * k3p, om + h * k3o, u, cfg)
        phi += h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        om += h / 6.0 * (k1o + 2 * k2o + 2 * k3o + k4o)
    return PendulumState(wrap_angle(phi), om)


def pendulum_energy(state: PendulumState, cfg: PendulumConfig = PendulumConfig()) -> float:
    """Kinetic plus potential energy, zero potential at the hanging position."""
    ml2 = cfg.mass * cfg.length * cfg.length
    return 0.5 * ml2 * state.velocity**2 + cfg.mass * cfg.gravity * cfg.length * (1.0 - math.cos(state.angle))


_cols = np.arange(WIDTH, dtype=np.float64) - (WIDTH // 2)
_rows = np.arange(HEIGHT, dtype=np.float64) - (HEIGHT // 2)
_PX, _PY = np.meshgrid(_cols, _rows)  # centred pixel coordinates, y grows downward


def render_pendulum(state: PendulumState, cfg: PendulumConfig = PendulumConfig(), line_width: float = 3.0) -> np.ndarray:
    """Rod from the image centre toward ``(sin phi, cos phi)`` (down-positive rows).

    Coverage falls off linearly over one pixel across the rod's sides and ends,
    which anti-aliases the edges.  Returns a flat array of length 51*51.
    """
    dx = math.sin(state.angle)
    dy = math.cos(state.angle)
    along = _PX * dx + _PY * dy
    across = np.abs(_PX * dy - _PY * dx)
    half = 0.5 * line_width
    cov = np.clip(half + 0.5 - across, 0.0, 1.0)
    cov *= np.clip(along + 0.5, 0.0, 1.0)
    cov *= np.clip(cfg.rod_pixels + 0.5 - along, 0.0, 1.0)
    return (1.0 - cov).ravel()


# ---------------------------------------------------------------------------
# moving tile
# ---------------------------------------------------------------------------

TILE_SIDE = 15
TILE_MAX = float(WIDTH - TILE_SIDE)


@dataclass(frozen=True)
class TileState:
    """Top-left corner (x = column, y = row) in pixels."""

    x: float = TILE_MAX / 2
    y: float = TILE_MAX / 2

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def tile_step(state: TileState, delta, bounds: tuple[float, float] = (0.0, TILE_MAX)) -> TileState:
    lo, hi = bounds
    dx, dy = (float(v) for v in np.asarray(delta, dtype=np.float64).reshape(2))
    return TileState(min(max(state.x + dx, lo), hi), min(max(state.y + dy, lo), hi))


def _axis_coverage(pos: float, n: int, side: int) -> np.ndarray:
    """Overlap of each unit pixel [i, i+1) with [pos, pos+side).

    Computed relative to floor(pos) so integer shifts translate the result exactly.
    """
    base = math.floor(pos)
    frac = pos - base
    idx = np.arange(n, dtype=np.float64) - base
    return np.clip(np.minimum(idx + 1.0, frac + side) - np.maximum(idx, frac), 0.0, 1.0)


def render_tile(state: TileState, side: int = TILE_SIDE) -> np.ndarray:
    cx = _axis_coverage(state.x, WIDTH, side)
    cy = _axis_coverage(state.y, HEIGHT, side)
    return (1.0 - np.outer(cy, cx)).ravel()


def generate_tile_dataset(
    rng: Rng,
    frames: int = 601,
    max_step: float = 3.0,
    start: TileState | None = None,
    bounds: tuple[float, float] = (0.0, TILE_MAX),
) -> Trajectory:
    """Random walk of the tile with increments uniform in [-max_step, max_step] per axis.

    An increment that would push the tile out of ``bounds`` is mirrored (its
    sign flipped) so the recorded control always equals the realized
    displacement and the clamp in :func:`tile_step` never binds.
    """
    if frames < 2:
        raise ValueError("need at least two frames")
    lo, hi = bounds
    if not (0.0 <= lo and hi <= TILE_MAX and hi - lo >= 2 * max_step):
        raise ValueError("walk bounds must lie inside the image and span two steps")
    state = start or TileState()
    draws = rng.uniform(-max_step, max_step, size=(frames - 1, 2))
    images = [render_tile(state)]
    controls = np.empty((frames - 1, 2))
    for t, d in enumerate(draws):
        d = d.copy()
        pos = state.position
        for a in range(2):
            if not lo <= pos[a] + d[a] <= hi:
                d[a] = -d[a]
        state = tile_step(state, d, bounds)
        controls[t] = d
        images.append(render_tile(state))
    return Trajectory(np.stack(images), controls)


def tile_positions(traj_controls: np.ndarray, start: TileState | None = None) -> np.ndarray:
    """Positions visited by a walk that starts at ``start`` and applies the controls."""
    state = start or TileState()
    out = [state.position]
    for d in traj_controls:
        state = tile_step(state, d)
        out.append(state.position)
    return np.stack(out)


# ---------------------------------------------------------------------------
# PGM export
# ---------------------------------------------------------------------------


def pgm_bytes(pixels, width: int = WIDTH, height: int = HEIGHT) -> bytes:
    """Binary P5 image, maxval 255, value = round(255 * pixel) after clipping to [0, 1]."""
    a = np.clip(np.asarray(pixels, dtype=np.float64).reshape(height, width), 0.0, 1.0)
    data = np.rint(255.0 * a).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + data.tobytes()


def write_pgm(path, pixels, width: int = WIDTH, height: int = HEIGHT) -> None:
    Path(path).write_bytes(pgm_bytes(pixels, width, height))


def read_pgm(path_or_bytes) -> np.ndarray:
    """Parse a binary P5 PGM; returns uint8 array of shape (height, width)."""
    blob = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while blob[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM supported")
    data = np.frombuffer(blob[i + 1 : i + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError("truncated PGM")
    return data.reshape(h, w)
