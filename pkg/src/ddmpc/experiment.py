"""End-to-end experiments: adaptive MPC on the pendulum and the moving-tile prediction study."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import envs
from .envs import PendulumConfig, PendulumState, TileState
from .model import DdmParams, decode, encode, make_history, rollout_features
from .mpc import MpcConfig, Plan, epsilon_greedy_action, make_state, plan
from .numkit import OptimizerOptions, Rng
from .training import (
    Dataset,
    PcaProjection,
    Trajectory,
    carry_params,
    cost_terms,
    pca_apply,
    pca_fit,
    pca_init,
    pca_invert,
    train_joint,
    train_sequential,
)

SUCCESS_TOLERANCE_DEG = 10.0
# absorbs rounding in degree<->radian conversions at the threshold
_ANGLE_SLACK = 1e-9

# sub-stream ids derived from the experiment seed
_STREAM_RANDOM_TRIAL = 0
_STREAM_INIT = 1
_STREAM_TRIAL = 100


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = 15
    frames_per_trial: int = 100
    encoder_sizes: tuple = (50, 25, 12, 6, 2)
    predictor_hidden: tuple = (4,)
    order: int = 2
    mpc: MpcConfig = field(default_factory=MpcConfig)
    pca_dim: int = 50
    pca_refit: bool = True
    seed: int = 0
    environment: str = "pendulum"
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    train_iterations: int = 1000
    init_scale: float = 2.0
    prediction_weight: float = 1.0
    eval_tail: int = 10

    def __post_init__(self):
        if self.trials < 0 or self.frames_per_trial < 1:
            raise ValueError("trials must be >= 0 and frames_per_trial >= 1")
        if self.encoder_sizes[0] != self.pca_dim:
            raise ValueError("encoder input width must equal the PCA dimension")
        if self.environment != "pendulum":
            raise ValueError(f"unknown environment {self.environment!r}")
        if self.train_iterations < 0:
            raise ValueError("train_iterations must be >= 0")

    @property
    def train_options(self) -> OptimizerOptions:
        return OptimizerOptions(max_iterations=self.train_iterations, gradient_tolerance=1e-8)

    def template(self) -> DdmParams:
        return DdmParams.zeros(self.encoder_sizes, self.predictor_hidden, self.order, self.mpc.control_dim)


@dataclass
class TrialRecord:
    seed: int
    trial: int
    frames_seen: int
    success: bool
    final_angle: float
    mean_tail_error: float
    V_R: float
    V_P: float
    train_seconds: float


@dataclass
class LearningCurve:
    seed: int
    records: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # greedy-evaluation angle traces, one per record
    error: str | None = None
    models: list | None = None  # (params, pca) per record when requested

    def successes(self) -> list[bool]:
        return [r.success for r in self.records]


# ---------------------------------------------------------------------------
# success criterion
# ---------------------------------------------------------------------------


def upright_error(angle: float) -> float:
    """Wrapped distance (rad) from ``angle`` to the nearer of +-pi."""
    return math.pi - abs(envs.wrap_angle(angle))


def is_success(angles: Sequence[float], tail: int = 10, tolerance_deg: float = SUCCESS_TOLERANCE_DEG) -> bool:
    """True iff each of the last ``tail`` angles is within the tolerance of upright."""
    if len(angles) < tail:
        return False
    limit = math.radians(tolerance_deg) + _ANGLE_SLACK
    return all(upright_error(a) <= limit for a in list(angles)[-tail:])


def success_rate(curves: Sequence, trial: int) -> tuple[float, float]:
    """Mean success at ``trial`` across curves and its standard error.

    The standard error is ``sqrt(p (1 - p) / (N - 1))``, the sample standard
    deviation of the 0/1 outcomes over sqrt(N); zero for a single curve.
    """
    if not curves:
        raise ValueError("no learning curves given")
    flags = []
    for c in curves:
        flags.append(bool(c.records[trial].success) if isinstance(c, LearningCurve) else bool(c))
    N = len(flags)
    p = sum(flags) / N
    if N < 2:
        return p, 0.0
    return p, math.sqrt(p * (1.0 - p) / (N - 1))


# ---------------------------------------------------------------------------
# controller bundle
# ---------------------------------------------------------------------------


@dataclass
class LatentController:
    """A trained model together with the pixel->PCA map and the encoded target."""

    params: DdmParams
    pca: PcaProjection
    y_ref_pixels: np.ndarray
    cfg: MpcConfig

    def __post_init__(self):
        self.z_ref = encode(self.params, pca_apply(self.pca, self.y_ref_pixels))

    def features(self, pixels: np.ndarray) -> np.ndarray:
        return encode(self.params, pca_apply(self.pca, pixels))


def run_episode(
    ctrl: LatentController | None,
    frames: int,
    rng: Rng,
    epsilon: float,
    env_cfg: PendulumConfig,
    start: PendulumState = PendulumState(),
):
    """Run one pendulum episode of ``frames`` observations.

    With ``ctrl`` None every action is uniform random in the bounds.  The history
    before the first frame is padded with copies of it and zero controls.
    Returns (pixel trajectory, angle trace, count of random actions).
    """
    mpc_cfg = ctrl.cfg if ctrl is not None else MpcConfig()
    if ctrl is not None:
        mpc_cfg = replace(ctrl.cfg, epsilon=epsilon)
    lo, hi = mpc_cfg.u_min[0], mpc_cfg.u_max[0]
    state = start
    images = [envs.render_pendulum(state, env_cfg)]
    angles = [state.angle]
    controls = []
    n_random = 0
    previous: Plan | None = None
    if ctrl is not None:
        n = ctrl.params.n
        feats = [ctrl.features(images[0])] * n
        past_u = [np.zeros(1)] * (n - 1)
    for _ in range(frames - 1):
        if ctrl is None:
            u = np.array([rng.uniform(lo, hi)])
            n_random += 1
        else:
            hist = make_history(feats, past_u)
            previous = plan(ctrl.params, hist, ctrl.z_ref, mpc_cfg, previous)
            u, was_random = epsilon_greedy_action(previous, mpc_cfg, rng)
            n_random += was_random
        state = envs.pendulum_step(state, float(u[0]), env_cfg)
        img = envs.render_pendulum(state, env_cfg)
        images.append(img)
        angles.append(state.angle)
        controls.append(u)
        if ctrl is not None:
            feats = [ctrl.features(img)] + feats[:-1]
            past_u = ([u] + past_u)[: ctrl.params.n - 1]
    ctl = np.array(controls).reshape(-1, 1) if controls else np.zeros((0, 1))
    return Trajectory(np.stack(images), ctl), np.array(angles), n_random


def run_random_trial(cfg: ExperimentConfig, rng: Rng) -> Trajectory:
    """One trial of uniform random torques from the hanging rest position (pixel frames)."""
    traj, _, _ = run_episode(None, cfg.frames_per_trial, rng, 1.0, cfg.pendulum)
    return traj


def evaluate_greedy(ctrl: LatentController, cfg: ExperimentConfig):
    """Greedy (epsilon = 0) episode from rest; returns (success, final angle, angle trace)."""
    _, angles, _ = run_episode(ctrl, cfg.frames_per_trial, Rng(0), 0.0, cfg.pendulum)
    return is_success(angles, cfg.eval_tail), float(angles[-1]), angles


def reference_pixels(cfg: ExperimentConfig) -> np.ndarray:
    return envs.render_pendulum(PendulumState(math.pi, 0.0), cfg.pendulum)


def fit_model(raw: Dataset, cfg: ExperimentConfig, previous=None, init_rng: Rng | None = None):
    """PCA-reduce the pixel dataset and train the DDM on it.

    ``previous`` is an optional (params, pca) pair to warm-start from.  Returns
    (params, pca, TrainReport).
    """
    frames = raw.all_frames()
    if previous is None or cfg.pca_refit:
        pca = pca_fit(frames, cfg.pca_dim)
    else:
        pca = previous[1]
    data = raw.mapped(lambda Y: pca_apply(pca, Y))
    if previous is None:
        params = pca_init(cfg.template(), data.all_frames(), init_rng, cfg.init_scale)
    else:
        params = carry_params(previous[0], previous[1], pca) if pca is not previous[1] else previous[0]
    params, report = train_joint(params, data, cfg.train_options, cfg.prediction_weight)
    return params, pca, report


def run_learning_experiment(cfg: ExperimentConfig, keep_models: bool = False, progress=None) -> LearningCurve:
    """Adaptive MPC: random trial, then repeatedly retrain on all data and run an
    epsilon-greedy MPC trial.  Each retrained model is also evaluated greedily.

    Record k holds the greedy evaluation of the model trained on trials 0..k.
    """
    root = Rng(cfg.seed)
    curve = LearningCurve(cfg.seed)
    y_ref = reference_pixels(cfg)
    raw = Dataset([run_random_trial(cfg, root.split(_STREAM_RANDOM_TRIAL))], y_ref[None, :])
    previous = None
    curve.models = [] if keep_models else None
    for k in range(cfg.trials + 1):
        t0 = time.perf_counter()
        try:
            params, pca, report = fit_model(raw, cfg, previous, root.split(_STREAM_INIT))
        except Exception as exc:  # keep the partial curve
            curve.error = f"training failed at trial {k}: {exc!r}"
            break
        train_seconds = time.perf_counter() - t0
        previous = (params, pca)
        ctrl = LatentController(params, pca, y_ref, cfg.mpc)
        success, final, angles = evaluate_greedy(ctrl, cfg)
        tail = np.array([upright_error(a) for a in angles[-cfg.eval_tail :]])
        curve.records.append(
            TrialRecord(cfg.seed, k, raw.frame_count, success, final, float(tail.mean()), report.V_R, report.V_P, train_seconds)
        )
        curve.traces.append(angles)
        if keep_models:
            curve.models.append((params, pca))
        if progress is not None:
            progress(curve.records[-1])
        if k < cfg.trials:
            traj, _, _ = run_episode(ctrl, cfg.frames_per_trial, root.split(_STREAM_TRIAL + k), cfg.mpc.epsilon, cfg.pendulum)
            raw.trajectories.append(traj)
    return curve


CURVE_COLUMNS = ["seed", "trial", "frames_seen", "success", "final_angle_rad", "mean_tail_error_rad", "V_R", "V_P"]


def curve_csv(curves: Sequence[LearningCurve]) -> str:
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(CURVE_COLUMNS)
    for c in curves:
        for r in c.records:
            wr.writerow([r.seed, r.trial, r.frames_seen, int(r.success), repr(r.final_angle), repr(r.mean_tail_error), repr(r.V_R), repr(r.V_P)])
    return out.getvalue()


def timing_csv(curves: Sequence[LearningCurve]) -> str:
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["seed", "trial", "train_seconds"])
    for c in curves:
        for r in c.records:
            wr.writerow([r.seed, r.trial, f"{r.train_seconds:.3f}"])
    return out.getvalue()


def aggregate_csv(curves: Sequence[LearningCurve]) -> str:
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["trial", "frames_seen", "success_mean", "success_stderr"])
    rows = min(len(c.records) for c in curves) if curves else 0
    for k in range(rows):
        mean, se = success_rate(curves, k)
        wr.writerow([k, curves[0].records[k].frames_seen, f"{mean:.6f}", f"{se:.6f}"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# tile study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileStudyConfig:
    frames: int = 601
    train_fraction: float = 0.8
    max_step: float = 3.0
    walk_bounds: tuple = (10.0, 26.0)
    pca_dim: int = 50
    encoder_sizes: tuple = (50, 25, 12, 6, 2)
    predictor_hidden: tuple = (4,)
    order: int = 2
    train_iterations: int = 10000
    init_scale: float = 2.0
    horizon: int = 8
    seed: int = 0

    def template(self) -> DdmParams:
        return DdmParams.zeros(self.encoder_sizes, self.predictor_hidden, self.order, 2)


@dataclass
class TileModelResult:
    params: DdmParams
    rmse: np.ndarray  # (horizon + 1,), index 0 is reconstruction
    position_error: np.ndarray  # (windows,), horizon-step tile position error in px
    V_R: float
    V_P: float


@dataclass
class TileStudyResult:
    cfg: TileStudyConfig
    pca: PcaProjection
    joint: TileModelResult
    sequential: TileModelResult
    test_frames: np.ndarray
    test_controls: np.ndarray
    test_positions: np.ndarray
    train_features_joint: np.ndarray
    train_features_sequential: np.ndarray

    def report_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["k", "rmse_joint", "rmse_sequential"])
        for k in range(self.cfg.horizon + 1):
            wr.writerow([k, f"{self.joint.rmse[k]:.10f}", f"{self.sequential.rmse[k]:.10f}"])
        return out.getvalue()

    def summary_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["model", "V_R", "V_P", "windows", "position_error_median_px", "fraction_within_2px"])
        for name, r in (("joint", self.joint), ("sequential", self.sequential)):
            wr.writerow([name, f"{r.V_R:.10f}", f"{r.V_P:.10f}", r.position_error.size,
                         f"{np.median(r.position_error):.6f}", f"{np.mean(r.position_error <= 2.0):.6f}"])
        return out.getvalue()


class TileLocator:
    """Estimate a tile position by template matching (peak of the correlation score).

    A coarse search over integer positions is refined on a ``fine`` grid within
    one pixel of the coarse peak.
    """

    def __init__(self, fine: float = 0.1):
        grid = np.arange(0.0, envs.TILE_MAX + 1e-9, 1.0)
        self.positions = np.array([(x, y) for y in grid for x in grid])
        self.templates = np.stack([envs.render_tile(TileState(x, y)) for x, y in self.positions])
        self._norms = np.sum(self.templates**2, axis=1)
        self.offsets = np.arange(-1.0, 1.0 + 1e-9, fine)

    def _best(self, image, positions, templates, norms):
        # argmin ||img - template||^2 == argmax of 2 <img, template> - ||template||^2
        return positions[int(np.argmax(2.0 * templates @ image - norms))]

    def locate(self, images: np.ndarray) -> np.ndarray:
        images = np.atleast_2d(images)
        out = np.empty((images.shape[0], 2))
        for i, img in enumerate(images):
            cx, cy = self._best(img, self.positions, self.templates, self._norms)
            cand = np.array([
                (min(max(cx + dx, 0.0), envs.TILE_MAX), min(max(cy + dy, 0.0), envs.TILE_MAX))
                for dy in self.offsets for dx in self.offsets
            ])
            T = np.stack([envs.render_tile(TileState(x, y)) for x, y in cand])
            out[i] = self._best(img, cand, T, np.sum(T * T, axis=1))
        return out


def tile_windows(T: int, order: int, horizon: int) -> np.ndarray:
    """Start indices t such that frames t-order+1 .. t+horizon all exist."""
    return np.arange(order - 1, T - horizon)


def predict_windows(params: DdmParams, reduced: np.ndarray, controls: np.ndarray, horizon: int) -> np.ndarray:
    """Open-loop ``horizon``-step predictions (reduced space) from every valid window.

    Returns an array (windows, horizon, d) of decoded predictions.
    """
    n = params.n
    Z = encode(params, reduced)
    preds = []
    for t in tile_windows(reduced.shape[0], n, horizon):
        hist = make_history([Z[t - j] for j in range(n)], [controls[t - j] for j in range(1, n)])
        zs = rollout_features(params, hist, controls[t : t + horizon])
        preds.append(decode(params, zs))
    return np.stack(preds)


def _evaluate_tile_model(params, pca, frames, controls, positions, horizon, locator, report):
    reduced = pca_apply(pca, frames)
    n = params.n
    starts = tile_windows(frames.shape[0], n, horizon)
    preds = predict_windows(params, reduced, controls, horizon)  # (W, H, d)
    rmse = np.empty(horizon + 1)
    recon = pca_invert(pca, decode(params, encode(params, reduced)))
    rmse[0] = math.sqrt(np.mean((frames - recon) ** 2))
    for k in range(1, horizon + 1):
        pix = pca_invert(pca, preds[:, k - 1])
        truth = frames[starts + k]
        rmse[k] = math.sqrt(np.mean((truth - pix) ** 2))
    last = pca_invert(pca, preds[:, -1])
    est = locator.locate(last)
    err = np.linalg.norm(est - positions[starts + horizon], axis=1)
    return TileModelResult(params, rmse, err, report.V_R, report.V_P)


def run_tile_study(cfg: TileStudyConfig = TileStudyConfig(), locator: TileLocator | None = None) -> TileStudyResult:
    """Train joint and sequential models on the first part of a tile walk and
    score multi-step predictions on the held-out remainder."""
    rng = Rng(cfg.seed)
    traj = envs.generate_tile_dataset(rng.split(0), cfg.frames, cfg.max_step, bounds=cfg.walk_bounds)
    positions = envs.tile_positions(traj.controls)
    split = int(cfg.frames * cfg.train_fraction)
    train = Trajectory(traj.observations[:split], traj.controls[: split - 1])
    test_frames = traj.observations[split:]
    test_controls = traj.controls[split:]
    test_positions = positions[split:]

    pca = pca_fit(train.observations, cfg.pca_dim)
    data = Dataset([Trajectory(pca_apply(pca, train.observations), train.controls)])
    params0 = pca_init(cfg.template(), data.all_frames(), rng.split(1), cfg.init_scale)
    opts = OptimizerOptions(max_iterations=cfg.train_iterations, gradient_tolerance=1e-8)
    p_joint, rep_joint = train_joint(params0, data, opts)
    p_seq, rep_seq = train_sequential(params0, data, opts)

    locator = locator or TileLocator()
    joint = _evaluate_tile_model(p_joint, pca, test_frames, test_controls, test_positions, cfg.horizon, locator, rep_joint)
    seq = _evaluate_tile_model(p_seq, pca, test_frames, test_controls, test_positions, cfg.horizon, locator, rep_seq)
    train_red = data.all_frames()
    return TileStudyResult(
        cfg, pca, joint, seq, test_frames, test_controls, test_positions,
        encode(p_joint, train_red), encode(p_seq, train_red),
    )


def feature_grid(params: DdmParams, pca: PcaProjection, resolution: int = 9, extent: float = 1.0) -> list:
    """Decoded pixel images over a resolution x resolution grid in [-extent, extent]^2.

    Returns a list of ((i, j), (z0, z1), pixels) in row-major grid order.  A
    resolution of 1 yields the single centre feature (0, 0).
    """
    if params.feature_dim != 2:
        raise ValueError("feature grids need a two-dimensional feature space")
    axis = np.zeros(1) if resolution == 1 else np.linspace(-extent, extent, resolution)
    out = []
    for i, z1 in enumerate(axis[::-1]):
        for j, z0 in enumerate(axis):
            z = np.array([z0, z1])
            out.append(((i, j), (float(z0), float(z1)), pca_invert(pca, decode(params, z))))
    return out
