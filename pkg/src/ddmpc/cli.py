"""Command-line front end.

Verbs::

    ddmpc tile      [--config F] [--out D] [--seed S]
    ddmpc pendulum  [--config F] [--out D] [--seed S] [--seeds N] [--jobs J]
                    [--trials T] [--epsilon E] [--horizon K] [--lambda L] [--save-models]
    ddmpc render    MODEL --pca P [--out D] [--resolution R] [--extent X] [--angle A ...]
    ddmpc eval      MODEL --pca P [--config F] [--out D]

``--config`` takes a key = value file or a ``manifest.json`` from an earlier run
(its config snapshot and seeds are reused).  Every command writes
``manifest.json`` into its output directory.  Exit codes: 0 success, 1 usage or
input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, envs
from .config import ConfigError, RunConfig, dump_config, load_config, override_experiment, parse_config
from .experiment import (
    LatentController,
    aggregate_csv,
    curve_csv,
    evaluate_greedy,
    feature_grid,
    predict_windows,
    reference_pixels,
    run_learning_experiment,
    run_tile_study,
    tile_windows,
    timing_csv,
    upright_error,
)
from .model import load_params, save_params
from .training import load_pca, pca_apply, pca_invert, save_pca

log = logging.getLogger("ddmpc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------


class _Run:
    """Output directory plus the manifest being assembled for it."""

    def __init__(self, out: Path, command: str, argv: list, config_text: str | None, seeds: list):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "tool": "ddmpc",
            "version": __version__,
            "command": command,
            "argv": argv,
            "config": config_text,
            "seeds": seeds,
            "artifacts": [],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }

    def write_text(self, name: str, text: str):
        (self.out / name).write_text(text)
        self.manifest["artifacts"].append(name)

    def write_pgm(self, name: str, pixels, width=envs.WIDTH, height=envs.HEIGHT):
        envs.write_pgm(self.out / name, pixels, width, height)
        self.manifest["artifacts"].append(name)

    def record(self, name: str):
        self.manifest["artifacts"].append(name)

    def finish(self, status: str, **extra):
        self.manifest.update(extra)
        self.manifest["status"] = status
        self.manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.manifest["artifacts"] = sorted(set(self.manifest["artifacts"]))
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _load_run_config(path) -> tuple[RunConfig, dict | None]:
    """Config file or earlier manifest; returns (config, manifest or None)."""
    if path is None:
        return RunConfig(), None
    p = Path(path)
    if p.suffix == ".json":
        if not p.is_file():
            raise ConfigError(f"manifest not found: {p}")
        try:
            manifest = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not a valid manifest ({exc})") from None
        if not manifest.get("config"):
            raise ConfigError(f"{p}: manifest carries no config snapshot")
        return parse_config(manifest["config"]), manifest
    return load_config(p), None


def _strip(frames, gap=2):
    """Concatenate 51x51 frames horizontally with light separators."""
    tiles = []
    for f in frames:
        tiles.append(np.asarray(f).reshape(envs.HEIGHT, envs.WIDTH))
        tiles.append(np.ones((envs.HEIGHT, gap)))
    return np.hstack(tiles[:-1])


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_tile(args) -> int:
    run_cfg, manifest = _load_run_config(args.config)
    seed = args.seed if args.seed is not None else (manifest["seeds"][0] if manifest else run_cfg.tile.seed)
    run_cfg = RunConfig(run_cfg.experiment, replace(run_cfg.tile, seed=seed))
    run = _Run(Path(args.out), "tile", args.argv, dump_config(run_cfg), [seed])
    cfg = run_cfg.tile
    log.info("tile study, seed %d", seed)
    try:
        res = run_tile_study(cfg)
    except Exception as exc:
        run.finish("failed", error=repr(exc))
        print(f"error: tile study failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.write_text("report.csv", res.report_csv())
    run.write_text("summary.csv", res.summary_csv())
    save_params(res.joint.params, run.out / "joint.ddm")
    save_params(res.sequential.params, run.out / "sequential.ddm")
    save_pca(res.pca, run.out / "pca.pca")
    for name in ("joint.ddm", "sequential.ddm", "pca.pca"):
        run.record(name)

    # true and predicted frames from the first test window (row per model)
    start = int(tile_windows(res.test_frames.shape[0], cfg.order, cfg.horizon)[0])
    truth = res.test_frames[start + 1 : start + 1 + cfg.horizon]
    rows = {"true": truth}
    reduced = pca_apply(res.pca, res.test_frames)
    for name, model in (("joint", res.joint), ("sequential", res.sequential)):
        pred = predict_windows(model.params, reduced, res.test_controls, cfg.horizon)[0]
        rows[name] = pca_invert(res.pca, pred)
    for name, frames in rows.items():
        strip = _strip(frames)
        run.write_pgm(f"strip_{name}.pgm", strip, strip.shape[1], strip.shape[0])
    np.savetxt(run.out / "features_joint.csv", res.train_features_joint, delimiter=",", fmt="%.10f")
    np.savetxt(run.out / "features_sequential.csv", res.train_features_sequential, delimiter=",", fmt="%.10f")
    run.record("features_joint.csv")
    run.record("features_sequential.csv")
    within = float(np.mean(res.joint.position_error <= 2.0))
    run.finish("ok", fraction_within_2px=within)
    print(res.report_csv(), end="")
    return EXIT_OK


def _pendulum_worker(payload):
    cfg, save = payload
    curve = run_learning_experiment(cfg, keep_models=save)
    if save and curve.models:
        curve.models = [curve.models[-1]]
    return curve


def cmd_pendulum(args) -> int:
    run_cfg, manifest = _load_run_config(args.config)
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.seed is None and args.seeds is None and manifest:
        seeds = list(manifest["seeds"])
    else:
        first = args.seed if args.seed is not None else run_cfg.experiment.seed
        seeds = list(range(first, first + (args.seeds or 1)))
    run_cfg = override_experiment(
        run_cfg, trials=args.trials, epsilon=args.epsilon, horizon=args.horizon, lam=args.lam, seed=seeds[0]
    )
    run = _Run(Path(args.out), "pendulum", args.argv, dump_config(run_cfg), seeds)
    payloads = [(replace(run_cfg.experiment, seed=s), args.save_models) for s in seeds]
    log.info("pendulum: %d seed(s), %d trial(s), %d job(s)", len(seeds), run_cfg.experiment.trials, args.jobs)
    if args.jobs == 1 or len(seeds) == 1:
        curves = [_pendulum_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            curves = list(pool.map(_pendulum_worker, payloads))

    for c in curves:
        run.write_text(f"curve_seed{c.seed}.csv", curve_csv([c]))
        if args.save_models and c.models:
            params, pca = c.models[-1]
            save_params(params, run.out / f"model_seed{c.seed}.ddm")
            save_pca(pca, run.out / f"pca_seed{c.seed}.pca")
            run.record(f"model_seed{c.seed}.ddm")
            run.record(f"pca_seed{c.seed}.pca")
    run.write_text("curves.csv", curve_csv(curves))
    run.write_text("aggregate.csv", aggregate_csv(curves))
    (run.out / "timing.csv").write_text(timing_csv(curves))  # wall times: not reproducible, not an artifact
    errors = {c.seed: c.error for c in curves if c.error}
    run.finish("failed" if errors else "ok", epsilon=run_cfg.experiment.mpc.epsilon, errors=errors)
    print(aggregate_csv(curves), end="")
    if errors:
        for s, e in errors.items():
            print(f"error: seed {s}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_model(model_path, pca_path):
    try:
        params = load_params(model_path)
    except FileNotFoundError:
        raise UsageError(f"model file not found: {model_path}") from None
    except ValueError as exc:
        raise UsageError(f"{model_path}: {exc}") from None
    try:
        pca = load_pca(pca_path)
    except FileNotFoundError:
        raise UsageError(f"PCA file not found: {pca_path}") from None
    except ValueError as exc:
        raise UsageError(f"{pca_path}: {exc}") from None
    if pca.d != params.obs_dim:
        raise UsageError(f"PCA has {pca.d} components but the model expects {params.obs_dim} inputs")
    return params, pca


def cmd_render(args) -> int:
    params, pca = _load_model(args.model, args.pca)
    if args.resolution < 1:
        raise UsageError("--resolution must be >= 1")
    if params.feature_dim != 2:
        raise UsageError("feature grids need a two-dimensional feature space")
    run = _Run(Path(args.out), "render", args.argv, None, [])
    for (i, j), _, pixels in feature_grid(params, pca, args.resolution, args.extent):
        run.write_pgm(f"grid_r{i}_c{j}.pgm", pixels)
    cfg = envs.PendulumConfig()
    for k, a in enumerate(args.angle or []):
        run.write_pgm(f"env_{k}.pgm", envs.render_pendulum(envs.PendulumState(envs.wrap_angle(a), 0.0), cfg))
    run.finish("ok")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, pca = _load_model(args.model, args.pca)
    run_cfg, _ = _load_run_config(args.config)
    exp = run_cfg.experiment
    if params.control_dim != exp.mpc.control_dim or params.n != exp.order:
        raise UsageError("model does not match the configured controls or order")
    run = _Run(Path(args.out), "eval", args.argv, dump_config(run_cfg), [])
    ctrl = LatentController(params, pca, reference_pixels(exp), exp.mpc)
    success, final, angles = evaluate_greedy(ctrl, exp)
    lines = ["step,angle_rad,upright_error_rad"]
    lines += [f"{t},{a!r},{upright_error(a)!r}" for t, a in enumerate(angles)]
    run.write_text("trace.csv", "\n".join(lines) + "\n")
    run.finish("ok", success=bool(success), final_angle=final)
    print(f"success={int(success)} final_angle={final:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddmpc", description="Deep dynamical models and latent MPC from pixels.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("tile", help="moving-tile prediction study")
    t.add_argument("--config")
    t.add_argument("--out", default="runs/tile")
    t.add_argument("--seed", type=int)

    q = sub.add_parser("pendulum", help="adaptive MPC swing-up learning experiment")
    q.add_argument("--config")
    q.add_argument("--out", default="runs/pendulum")
    q.add_argument("--seed", type=int, help="first seed")
    q.add_argument("--seeds", type=int, help="number of consecutive seeds")
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--trials", type=int)
    q.add_argument("--epsilon", type=float)
    q.add_argument("--horizon", type=int)
    q.add_argument("--lambda", dest="lam", type=float)
    q.add_argument("--save-models", action="store_true", help="write the final model of each seed")

    r = sub.add_parser("render", help="decode a feature grid (and optional pendulum angles) to PGM")
    r.add_argument("model")
    r.add_argument("--pca", required=True)
    r.add_argument("--out", default="runs/render")
    r.add_argument("--resolution", type=int, default=9)
    r.add_argument("--extent", type=float, default=1.0)
    r.add_argument("--angle", type=float, action="append", help="also render the pendulum at this angle")

    e = sub.add_parser("eval", help="greedy swing-up evaluation of a saved model")
    e.add_argument("model")
    e.add_argument("--pca", required=True)
    e.add_argument("--config")
    e.add_argument("--out", default="runs/eval")
    return p


_VERBS = {"tile": cmd_tile, "pendulum": cmd_pendulum, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.argv = argv
    try:
        return _VERBS[args.verb](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
