"""Training of the deep dynamical model.

The joint objective is the plain sum of squared reconstruction errors over all
frames and squared one-step prediction errors over all frames that have a full
history inside their own trajectory.  Gradients are computed analytically by
back-propagation; the encoder receives contributions from both the
reconstruction path and the encoded history that feeds the predictor.
"""

from __future__ import annotations

import io
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DdmParams, Layer, Mlp, grads_vector
from .numkit import OptimizerOptions, Rng, lbfgs_minimize

# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Aligned observations ``(T, M)`` and controls ``(T-1, F)``; u_t acts between y_t and y_{t+1}."""

    observations: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        c = np.asarray(self.controls, dtype=np.float64)
        if c.ndim == 1:
            c = c.reshape(-1, 1) if c.size else c.reshape(0, 0)
        self.controls = c
        T = self.observations.shape[0]
        if self.controls.shape[0] != max(T - 1, 0):
            raise ValueError(f"{T} observations need {T - 1} controls, got {self.controls.shape[0]}")

    def __len__(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1] if self.controls.shape[0] else 0


@dataclass
class Dataset:
    trajectories: list = field(default_factory=list)
    # static frames that only enter the reconstruction term
    references: np.ndarray | None = None

    def __post_init__(self):
        dims = {t.obs_dim for t in self.trajectories}
        if self.references is not None:
            self.references = np.atleast_2d(np.asarray(self.references, dtype=np.float64))
            dims.add(self.references.shape[1])
        if len(dims) > 1:
            raise ValueError(f"observations of differing dimension in one dataset: {sorted(dims)}")

    @property
    def frame_count(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def all_frames(self, include_references: bool = True) -> np.ndarray:
        parts = [t.observations for t in self.trajectories]
        if include_references and self.references is not None:
            parts.append(self.references)
        if not parts:
            raise ValueError("dataset is empty")
        return np.concatenate(parts, axis=0)

    def mapped(self, fn) -> "Dataset":
        """Dataset with ``fn`` applied to every observation block."""
        return Dataset(
            [Trajectory(fn(t.observations), t.controls) for t in self.trajectories],
            None if self.references is None else fn(self.references),
        )


class _Batch:
    """Index bookkeeping that turns a dataset into stacked arrays."""

    def __init__(self, data: Dataset, n: int, control_dim: int):
        self.Y = data.all_frames()
        if self.Y.shape[0] == 0:
            raise ValueError("dataset has no frames")
        self.n = n
        z_rows = [[] for _ in range(n)]
        u_rows = [[] for _ in range(n)]
        targets = []
        controls = []
        offset = u_off = 0
        for i, tr in enumerate(data.trajectories):
            T = len(tr)
            if T >= n + 1:
                if tr.control_dim != control_dim:
                    raise ValueError(f"trajectory {i} has control dimension {tr.control_dim}, model expects {control_dim}")
                t = np.arange(n - 1, T - 1)
                for j in range(n):
                    z_rows[j].append(offset + t - j)
                    u_rows[j].append(u_off + t - j)
                targets.append(offset + t + 1)
                controls.append(tr.controls)
                u_off += T - 1
            else:
                warnings.warn(f"trajectory {i} has {T} frames, fewer than n+1={n + 1}; excluded from V_P")
            offset += T
        self.has_prediction = bool(targets)
        if self.has_prediction:
            self.z_rows = [np.concatenate(r) for r in z_rows]
            self.u_rows = [np.concatenate(r) for r in u_rows]
            self.targets = np.concatenate(targets)
            self.U = np.concatenate(controls, axis=0)
            self.Y_target = self.Y[self.targets]


def _prediction_input(batch: _Batch, Z: np.ndarray) -> np.ndarray:
    parts = []
    for zr, ur in zip(batch.z_rows, batch.u_rows):
        parts += [Z[zr], batch.U[ur]]
    return np.concatenate(parts, axis=1)


@dataclass
class CostTerms:
    V_R: float
    V_P: float
    value: float
    grad: np.ndarray | None = None


def _evaluate(params: DdmParams, batch: _Batch, w_r=1.0, w_p=1.0, need_grad=True, blocks=(True, True, True)) -> CostTerms:
    enc, dec, pred = params.encoder, params.decoder, params.predictor
    need_enc = need_grad and blocks[0]
    Z, enc_cache = enc.forward(batch.Y)
    Yr, dec_cache_r = dec.forward(Z)
    R = batch.Y - Yr
    V_R = float(np.sum(R * R))
    V_P = 0.0
    if batch.has_prediction:
        X = _prediction_input(batch, Z)
        Zh, pred_cache = pred.forward(X)
        Yp, dec_cache_p = dec.forward(Zh)
        E = batch.Y_target - Yp
        V_P = float(np.sum(E * E))
    value = w_r * V_R + w_p * V_P
    if not need_grad:
        return CostTerms(V_R, V_P, value)

    m, F = params.feature_dim, params.control_dim
    d_z, g_dec = dec.backward(dec_cache_r, -2.0 * w_r * R, need_input_grad=need_enc)
    g_dec = [(dw.copy(), db.copy()) for dw, db in g_dec]
    g_pred = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in pred.layers]
    if batch.has_prediction and w_p != 0.0:
        d_zh, g_dec_p = dec.backward(dec_cache_p, -2.0 * w_p * E)
        for (a, b), (c, d) in zip(g_dec, g_dec_p):
            a += c
            b += d
        d_x, g_pred = pred.backward(pred_cache, d_zh, need_input_grad=need_enc)
        if need_enc:
            d_z = d_z.copy()
            w = m + F
            for j, zr in enumerate(batch.z_rows):
                np.add.at(d_z, zr, d_x[:, j * w : j * w + m])
    if need_enc:
        _, g_enc = enc.backward(enc_cache, d_z, need_input_grad=False)
        ge = grads_vector(g_enc)
    else:
        ge = np.zeros(enc.size)
    grad = np.concatenate([ge, grads_vector(g_dec), grads_vector(g_pred)])
    return CostTerms(V_R, V_P, value, grad)


def joint_cost(params: DdmParams, data: Dataset, prediction_weight: float = 1.0):
    """Return ``(V, grad)`` with ``V = V_R + prediction_weight * V_P``.

    ``grad`` is the gradient with respect to ``params.vector()``.
    """
    t = _evaluate(params, _Batch(data, params.n, params.control_dim), 1.0, prediction_weight)
    return t.value, t.grad


def cost_terms(params: DdmParams, data: Dataset) -> CostTerms:
    """V_R and V_P (no gradient)."""
    return _evaluate(params, _Batch(data, params.n, params.control_dim), need_grad=False)


def reconstruction_cost(params: DdmParams, data: Dataset) -> float:
    Y = data.all_frames()
    R = Y - params.decoder(params.encoder(Y))
    return float(np.sum(R * R))


def prediction_cost(params: DdmParams, data: Dataset) -> float:
    batch = _Batch(data, params.n, params.control_dim)
    if not batch.has_prediction:
        return 0.0
    Z = params.encoder(batch.Y)
    Yp = params.decoder(params.predictor(_prediction_input(batch, Z)))
    E = batch.Y_target - Yp
    return float(np.sum(E * E))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    V_R: float
    V_P: float
    iterations: int
    grad_norm: float
    wall_time: float
    converged: bool = False
    message: str = ""
    history: list = field(default_factory=list)


def _minimize_blocks(params, batch, opts, w_r, w_p, blocks):
    """Minimize over the parameter blocks flagged in ``blocks`` (encoder, decoder, predictor)."""
    theta0 = params.vector()
    ne, nd, np_ = params.block_sizes
    mask = np.concatenate([np.full(ne, blocks[0]), np.full(nd, blocks[1]), np.full(np_, blocks[2])])
    idx = np.flatnonzero(mask)

    def fun(x):
        theta = theta0.copy()
        theta[idx] = x
        t = _evaluate(params.with_vector(theta), batch, w_r, w_p, True, blocks)
        return t.value, t.grad[idx]

    res = lbfgs_minimize(fun, theta0[idx], opts)
    theta = theta0.copy()
    theta[idx] = res.x
    return params.with_vector(theta), res


def train_joint(params0: DdmParams, data: Dataset, opts: OptimizerOptions | None = None, prediction_weight: float = 1.0):
    """Minimize ``V_R + V_P`` over all parameters jointly with L-BFGS."""
    opts = opts or OptimizerOptions()
    start = time.perf_counter()
    batch = _Batch(data, params0.n, params0.control_dim)
    params, res = _minimize_blocks(params0, batch, opts, 1.0, prediction_weight, (True, True, True))
    t = _evaluate(params, batch, need_grad=False)
    return params, TrainReport(
        t.V_R, t.V_P, res.iterations, float(np.linalg.norm(res.grad)),
        time.perf_counter() - start, res.converged, res.message, res.history,
    )


def train_sequential(params0: DdmParams, data: Dataset, opts: OptimizerOptions | None = None):
    """Auto-encoder first (V_R over encoder/decoder), then the predictor alone on V_P."""
    opts = opts or OptimizerOptions()
    start = time.perf_counter()
    batch = _Batch(data, params0.n, params0.control_dim)
    stage1, res1 = _minimize_blocks(params0, batch, opts, 1.0, 0.0, (True, True, False))
    params, res2 = _minimize_blocks(stage1, batch, opts, 0.0, 1.0, (False, False, True))
    t = _evaluate(params, batch, need_grad=False)
    return params, TrainReport(
        t.V_R, t.V_P, res1.iterations + res2.iterations, float(np.linalg.norm(res2.grad)),
        time.perf_counter() - start, res2.converged, f"{res1.message}; {res2.message}",
        res1.history + res2.history,
    )


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaProjection:
    mean: np.ndarray  # (M,)
    basis: np.ndarray  # (M, d), orthonormal columns
    variances: np.ndarray | None = None  # eigenvalues of the 1/N covariance, descending

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]


def pca_fit(data, d: int) -> PcaProjection:
    """Top-``d`` principal directions of mean-centred ``data`` (rows are samples).

    Each basis vector is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        X = np.atleast_2d(X)
    N, M = X.shape
    if d < 1 or d > min(N, M):
        raise ValueError(f"cannot extract {d} components from {N} samples of dimension {M}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise ValueError("degenerate data: all samples are identical")
    if N >= M:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(evals)[::-1]
        evals = np.maximum(evals[order], 0.0)
        V = evecs[:, order[:d]]
    else:
        _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        evals = np.concatenate([s * s, np.zeros(M - s.size)])
        V = Vt[:d].T
    V = np.array(V)
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(d)])
    signs[signs == 0] = 1.0
    V *= signs
    return PcaProjection(mean, V, evals / N)


def pca_apply(p: PcaProjection, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != p.input_dim:
        raise ValueError(f"input has dimension {y.shape[-1]}, projection expects {p.input_dim}")
    return (y - p.mean) @ p.basis


def pca_invert(p: PcaProjection, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.d:
        raise ValueError(f"coefficients have dimension {v.shape[-1]}, projection has {p.d}")
    return v @ p.basis.T + p.mean


def pca_init(template: DdmParams, data, rng: Rng | None = None, target_scale: float = 0.5) -> DdmParams:
    """Layer-pair PCA initialization of the auto-encoder.

    Pairs are handled outermost inward.  Each pair's encoder layer gets the
    transposed principal basis and its decoder layer the basis itself, so with
    affine activations the network reproduces PCA exactly.  For squashing
    activations the encoder weights are scaled so that the largest
    pre-activation on the data is ``target_scale``, the paired decoder layer
    undoes that scale (and the 2/pi output factor, where present), and each
    squashing decoder layer gets a least-squares gain so its output tracks the
    encoder representation it stands in for.

    The predictor is drawn uniform in [-0.1, 0.1] / fan-in from ``rng``; without
    an rng the template's predictor is kept.
    """
    X = np.asarray(data, dtype=np.float64)
    enc_layers = list(template.encoder.layers)
    L = len(enc_layers)
    sizes = template.encoder.sizes
    for i in range(len(sizes) - 1):
        if sizes[i + 1] >= sizes[i]:
            raise ValueError("encoder layer sizes must strictly decrease toward the code layer")
    new_enc = [None] * L
    new_dec = list(template.decoder.layers)
    reps = [X]
    for k in range(L):
        width = sizes[k + 1]
        if X.shape[0] < width + 1:
            raise ValueError(f"layer pair {k} ({sizes[k]}->{width}): {X.shape[0]} samples cannot determine {width} components")
        try:
            p = pca_fit(X, width)
        except ValueError as exc:
            raise ValueError(f"layer pair {k} ({sizes[k]}->{width}): {exc}") from None
        if p.variances[width - 1] <= 1e-14 * p.variances[0]:
            raise ValueError(f"layer pair {k} ({sizes[k]}->{width}): representation has rank below {width}")
        B, mu = p.basis, p.mean
        P = (X - mu) @ B
        e_act = enc_layers[k].activation
        s = comp = 1.0
        if e_act != "affine":
            peak = float(np.max(np.abs(P)))
            s = target_scale / peak if peak > 0 else 1.0
            comp = 1.0 / s if e_act == "arctan" else np.pi / (2.0 * s)
        W = s * B.T
        new_enc[k] = Layer(W, -W @ mu, e_act)
        d = new_dec[L - 1 - k]
        new_dec[L - 1 - k] = Layer(comp * B, mu.copy(), d.activation)
        reps.append(_apply_layer(new_enc[k], X))
        X = reps[-1]
    _refit_decoder(new_dec, reps)
    pred = template.predictor
    if rng is not None:
        pred = Mlp(
            Layer(rng.uniform(-0.1, 0.1, l.weight.shape) / l.n_in, rng.uniform(-0.1, 0.1, l.bias.shape) / l.n_in, l.activation)
            for l in pred.layers
        )
    return template.replace(encoder=Mlp(new_enc), decoder=Mlp(new_dec), predictor=pred)


def _refit_decoder(dec: list, reps: list) -> None:
    """Gain correction of the squashing decoder layers, innermost first.

    A hidden decoder layer applies its activation to a linear estimate of the
    matching encoder representation.  Its pre-activation is rescaled by one
    least-squares gain (plus an offset) so the squashed output tracks that
    representation on the data.  Affine layers are left as they are.
    """
    L = len(dec)
    H = reps[L]
    for i, layer in enumerate(dec):
        if layer.activation != "affine":
            T = reps[L - 1 - i]
            if layer.activation == "arctan":
                T = np.tan(np.clip(T, -1.5, 1.5))
            else:
                T = np.tan(np.clip(T, -0.95, 0.95) * (np.pi / 2.0))
            pre = H @ layer.weight.T + layer.bias
            dp, dt = pre - pre.mean(axis=0), T - T.mean(axis=0)
            den = float(np.sum(dp * dp))
            g = float(np.sum(dp * dt)) / den if den > 0 else 1.0
            shift = T.mean(axis=0) - g * pre.mean(axis=0)
            dec[i] = Layer(g * layer.weight, g * layer.bias + shift, layer.activation)
        H = _apply_layer(dec[i], H)


def _apply_layer(layer: Layer, X: np.ndarray) -> np.ndarray:
    return Mlp([layer])(X)


def carry_params(params: DdmParams, old: PcaProjection, new: PcaProjection) -> DdmParams:
    """Re-express a model trained on ``old`` PCA coordinates in ``new`` coordinates.

    Only the first encoder layer and the last decoder layer change; on data in
    the span of both bases the network's pixel-space behaviour is unchanged.
    """
    T = old.basis.T @ new.basis  # old coords from new coords
    shift = old.basis.T @ (new.mean - old.mean)
    e0 = params.encoder.layers[0]
    enc = [Layer(e0.weight @ T, e0.bias + e0.weight @ shift, e0.activation), *params.encoder.layers[1:]]
    dl = params.decoder.layers[-1]
    back = new.basis.T @ old.basis
    dec = [*params.decoder.layers[:-1], Layer(back @ dl.weight, back @ dl.bias + new.basis.T @ (old.mean - new.mean), dl.activation)]
    return params.replace(encoder=Mlp(enc), decoder=Mlp(dec))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError(f"corrupt {what} file: truncated")
    return data


def dataset_to_bytes(data: Dataset) -> bytes:
    """DDS1: count, (T, obs_dim, control_dim) per trajectory, reference block header, then payload."""
    buf = io.BytesIO()
    buf.write(b"DDS1")
    buf.write(struct.pack("<I", len(data.trajectories)))
    for t in data.trajectories:
        F = t.controls.shape[1] if t.controls.ndim == 2 else 0
        buf.write(struct.pack("<III", len(t), t.obs_dim, F))
    refs = data.references
    if refs is None:
        buf.write(struct.pack("<II", 0, 0))
    else:
        buf.write(struct.pack("<II", refs.shape[0], refs.shape[1]))
    for t in data.trajectories:
        buf.write(np.ascontiguousarray(t.observations, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(t.controls, dtype="<f8").tobytes())
    if refs is not None:
        buf.write(np.ascontiguousarray(refs, dtype="<f8").tobytes())
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    buf = io.BytesIO(blob)
    if buf.read(4) != b"DDS1":
        raise ValueError("not a DDS1 dataset file")
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "dataset"))
    heads = [struct.unpack("<III", _read_exact(buf, 12, "dataset")) for _ in range(count)]
    R, RM = struct.unpack("<II", _read_exact(buf, 8, "dataset"))

    def block(rows, cols):
        raw = _read_exact(buf, 8 * rows * cols, "dataset")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    trajs = []
    for T, M, F in heads:
        obs = block(T, M)
        ctl = block(max(T - 1, 0), F)
        trajs.append(Trajectory(obs, ctl))
    refs = block(R, RM) if R else None
    if buf.read(1):
        raise ValueError("corrupt dataset file: trailing bytes")
    return Dataset(trajs, refs)


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(data))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def pca_to_bytes(p: PcaProjection) -> bytes:
    M, d = p.basis.shape
    return (
        b"PCA1"
        + struct.pack("<II", M, d)
        + np.ascontiguousarray(p.mean, dtype="<f8").tobytes()
        + np.ascontiguousarray(p.basis, dtype="<f8").tobytes()
    )


def pca_from_bytes(blob: bytes) -> PcaProjection:
    buf = io.BytesIO(blob)
    if buf.read(4) != b"PCA1":
        raise ValueError("not a PCA1 file")
    M, d = struct.unpack("<II", _read_exact(buf, 8, "PCA"))
    mean = np.frombuffer(_read_exact(buf, 8 * M, "PCA"), dtype="<f8").astype(np.float64)
    basis = np.frombuffer(_read_exact(buf, 8 * M * d, "PCA"), dtype="<f8").astype(np.float64).reshape(M, d)
    if buf.read(1):
        raise ValueError("corrupt PCA file: trailing bytes")
    return PcaProjection(mean, basis)


def save_pca(p: PcaProjection, path) -> None:
    Path(path).write_bytes(pca_to_bytes(p))


def load_pca(path) -> PcaProjection:
    return pca_from_bytes(Path(path).read_bytes())


def stack_frames(frames: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in frames])
