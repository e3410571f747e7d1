"""Deep dynamical model: auto-encoder plus a latent NARX predictor.

Layer k computes ``act(A_k @ x + b_k)``.  Activations are tagged per layer:

* ``affine``         identity
* ``arctan``         plain arctan (hidden layers)
* ``scaled_arctan``  ``(2/pi) * arctan``, used on the encoder output so that
  features live strictly inside (-1, 1)

The predictor input for a history of order n is ordered
``(z_t, u_t, z_{t-1}, u_{t-1}, ..., z_{t-n+1}, u_{t-n+1})``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkit import Rng

ACTIVATION_TAGS = {"affine": 0, "arctan": 1, "scaled_arctan": 2}
_TAG_NAMES = {v: k for k, v in ACTIVATION_TAGS.items()}
_TWO_OVER_PI = 2.0 / np.pi

MAGIC = b"DDM1"


def activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "arctan":
        return np.arctan(pre)
    if name == "scaled_arctan":
        return _TWO_OVER_PI * np.arctan(pre)
    if name == "affine":
        return pre
    raise ValueError(f"unknown activation {name!r}")


def activation_slope(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "arctan":
        return 1.0 / (1.0 + pre * pre)
    if name == "scaled_arctan":
        return _TWO_OVER_PI / (1.0 + pre * pre)
    if name == "affine":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "arctan"

    def __post_init__(self):
        if self.activation not in ACTIVATION_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight/bias shapes do not agree")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


class Mlp:
    """A feed-forward stack of :class:`Layer` objects."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers

    @classmethod
    def zeros(cls, sizes: Sequence[int], activations: Sequence[str]) -> "Mlp":
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        return cls(
            Layer(np.zeros((o, i)), np.zeros(o), act)
            for i, o, act in zip(sizes[:-1], sizes[1:], activations)
        )

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0].n_in,) + tuple(l.n_out for l in self.layers)

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(l.activation for l in self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a vector ``(in,)`` or a batch ``(N, in)``."""
        h = x
        for l in self.layers:
            h = activate(l.activation, h @ l.weight.T + l.bias)
        return h

    def forward(self, X: np.ndarray):
        """Batched forward pass keeping what :meth:`backward` needs."""
        cache = []
        h = X
        for l in self.layers:
            pre = h @ l.weight.T + l.bias
            cache.append((h, pre))
            h = activate(l.activation, pre)
        return h, cache

    def backward(self, cache, d_out: np.ndarray, need_input_grad: bool = True):
        """Back-propagate ``d_out``; returns (d_input, [(dW, db), ...])."""
        grads = [None] * len(self.layers)
        d = d_out
        for k in range(len(self.layers) - 1, -1, -1):
            l = self.layers[k]
            h, pre = cache[k]
            if l.activation != "affine":
                d = d * activation_slope(l.activation, pre)
            grads[k] = (d.T @ h, d.sum(axis=0))
            if k > 0 or need_input_grad:
                d = d @ l.weight
        return d, grads

    def vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def with_vector(self, theta: np.ndarray) -> "Mlp":
        """New MLP with the same shapes whose parameters are views into ``theta``."""
        out = []
        i = 0
        for l in self.layers:
            nw = l.weight.size
            w = theta[i : i + nw].reshape(l.weight.shape)
            i += nw
            b = theta[i : i + l.bias.size]
            i += l.bias.size
            out.append(Layer(w, b, l.activation))
        if i != theta.size:
            raise ValueError(f"parameter vector has {theta.size} entries, expected {i}")
        return Mlp(out)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Mlp)
            and self.activations == other.activations
            and self.sizes == other.sizes
            and all(
                np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
                for a, b in zip(self.layers, other.layers)
            )
        )


def grads_vector(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


@dataclass(frozen=True)
class HistoryState:
    """MPC state: newest-first features (n) and newest-first past controls (n-1)."""

    features: tuple
    controls: tuple

    def __post_init__(self):
        if len(self.controls) != len(self.features) - 1:
            raise ValueError("a history of n features needs n-1 controls")

    @property
    def order(self) -> int:
        return len(self.features)

    def predictor_input(self, u: np.ndarray) -> np.ndarray:
        parts = [self.features[0], u]
        for z, v in zip(self.features[1:], self.controls):
            parts += [z, v]
        return np.concatenate(parts)

    def advance(self, z_next: np.ndarray, u: np.ndarray) -> "HistoryState":
        n = self.order
        feats = (z_next,) + self.features[: n - 1]
        ctrls = ((u,) + self.controls)[: n - 1]
        return HistoryState(feats, ctrls)


class DdmParams:
    """Encoder, decoder and predictor parameters plus the model dimensions."""

    def __init__(self, encoder: Mlp, decoder: Mlp, predictor: Mlp, n: int, control_dim: int):
        self.encoder = encoder
        self.decoder = decoder
        self.predictor = predictor
        self.n = int(n)
        self.control_dim = int(control_dim)
        self._check()

    def _check(self):
        if self.n < 1:
            raise ValueError("history order n must be >= 1")
        if self.decoder.sizes != tuple(reversed(self.encoder.sizes)):
            raise ValueError(
                f"decoder sizes {self.decoder.sizes} do not mirror encoder {self.encoder.sizes}"
            )
        want = self.n * (self.feature_dim + self.control_dim)
        if self.predictor.n_in != want:
            raise ValueError(f"predictor input width {self.predictor.n_in}, expected n*(m+F) = {want}")
        if self.predictor.n_out != self.feature_dim:
            raise ValueError("predictor output width must equal the feature dimension")

    @property
    def feature_dim(self) -> int:
        return self.encoder.n_out

    @property
    def obs_dim(self) -> int:
        return self.encoder.n_in

    @property
    def block_sizes(self) -> tuple[int, int, int]:
        return self.encoder.size, self.decoder.size, self.predictor.size

    @property
    def size(self) -> int:
        return sum(self.block_sizes)

    @classmethod
    def zeros(
        cls,
        encoder_sizes: Sequence[int],
        predictor_hidden: Sequence[int] = (4,),
        n: int = 2,
        control_dim: int = 1,
        encoder_activations: Sequence[str] | None = None,
        decoder_activations: Sequence[str] | None = None,
        predictor_activations: Sequence[str] | None = None,
    ) -> "DdmParams":
        """All-zero parameters with the default activation layout.

        Hidden layers use arctan, the encoder output uses scaled arctan and the
        decoder and predictor outputs are affine.
        """
        enc = list(encoder_sizes)
        L = len(enc) - 1
        m = enc[-1]
        if encoder_activations is None:
            encoder_activations = ["arctan"] * (L - 1) + ["scaled_arctan"]
        if decoder_activations is None:
            decoder_activations = ["arctan"] * (L - 1) + ["affine"]
        psizes = [n * (m + control_dim), *predictor_hidden, m]
        if predictor_activations is None:
            predictor_activations = ["arctan"] * (len(psizes) - 2) + ["affine"]
        return cls(
            Mlp.zeros(enc, encoder_activations),
            Mlp.zeros(enc[::-1], decoder_activations),
            Mlp.zeros(psizes, predictor_activations),
            n,
            control_dim,
        )

    def vector(self) -> np.ndarray:
        """Flat view order: encoder, decoder, predictor; per layer W (row-major) then b."""
        return np.concatenate([self.encoder.vector(), self.decoder.vector(), self.predictor.vector()])

    def with_vector(self, theta) -> "DdmParams":
        theta = np.asarray(theta, dtype=np.float64)
        ne, nd, np_ = self.block_sizes
        if theta.size != ne + nd + np_:
            raise ValueError(f"parameter vector has {theta.size} entries, expected {ne + nd + np_}")
        return DdmParams(
            self.encoder.with_vector(theta[:ne]),
            self.decoder.with_vector(theta[ne : ne + nd]),
            self.predictor.with_vector(theta[ne + nd :]),
            self.n,
            self.control_dim,
        )

    def replace(self, encoder=None, decoder=None, predictor=None) -> "DdmParams":
        return DdmParams(
            encoder or self.encoder,
            decoder or self.decoder,
            predictor or self.predictor,
            self.n,
            self.control_dim,
        )

    def randomized(self, rng: Rng, scale: float = 0.1) -> "DdmParams":
        """Copy with every parameter uniform in ``[-scale, scale] / fan_in``."""
        def rand_mlp(mlp):
            return Mlp(
                Layer(
                    rng.uniform(-scale, scale, l.weight.shape) / l.n_in,
                    rng.uniform(-scale, scale, l.bias.shape) / l.n_in,
                    l.activation,
                )
                for l in mlp.layers
            )

        return DdmParams(rand_mlp(self.encoder), rand_mlp(self.decoder), rand_mlp(self.predictor), self.n, self.control_dim)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DdmParams)
            and self.n == other.n
            and self.control_dim == other.control_dim
            and self.encoder == other.encoder
            and self.decoder == other.decoder
            and self.predictor == other.predictor
        )

    def __repr__(self) -> str:
        return (
            f"DdmParams(encoder={self.encoder.sizes}, predictor={self.predictor.sizes}, "
            f"n={self.n}, F={self.control_dim})"
        )


# ---------------------------------------------------------------------------
# forward computations
# ---------------------------------------------------------------------------


def _check_width(x: np.ndarray, width: int, what: str):
    if x.shape[-1] != width:
        raise ValueError(f"{what} has dimension {x.shape[-1]}, expected {width}")


def encode(params: DdmParams, y) -> np.ndarray:
    """Features for one observation ``(M,)`` or a batch ``(N, M)``."""
    y = np.asarray(y, dtype=np.float64)
    _check_width(y, params.obs_dim, "observation")
    return params.encoder(y)


def decode(params: DdmParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_width(z, params.feature_dim, "feature")
    return params.decoder(z)


def reconstruction_error(params: DdmParams, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y - decode(params, encode(params, y))


def _check_state(params: DdmParams, state: HistoryState, u: np.ndarray):
    if state.order != params.n:
        raise ValueError(f"history holds {state.order} features, model order is {params.n}")
    for z in state.features:
        _check_width(np.asarray(z), params.feature_dim, "history feature")
    for v in state.controls:
        _check_width(np.asarray(v), params.control_dim, "history control")
    _check_width(u, params.control_dim, "control")


def predict_feature(params: DdmParams, state: HistoryState, u_t) -> np.ndarray:
    u_t = np.atleast_1d(np.asarray(u_t, dtype=np.float64))
    _check_state(params, state, u_t)
    return params.predictor(state.predictor_input(u_t))


def predict_observation(params: DdmParams, state: HistoryState, u_t) -> np.ndarray:
    return decode(params, predict_feature(params, state, u_t))


def rollout_features(params: DdmParams, state0: HistoryState, controls) -> np.ndarray:
    """Open-loop multi-step prediction; row k is the feature after applying u_0..u_k."""
    controls = np.asarray(controls, dtype=np.float64).reshape(len(controls), -1)
    if controls.shape[0] < 1:
        raise ValueError("need at least one control")
    _check_state(params, state0, controls[0])
    out = np.empty((controls.shape[0], params.feature_dim))
    state = state0
    for k, u in enumerate(controls):
        z = params.predictor(state.predictor_input(u))
        out[k] = z
        state = state.advance(z, u)
    return out


def make_history(features: Sequence, controls: Sequence) -> HistoryState:
    return HistoryState(
        tuple(np.asarray(z, dtype=np.float64).reshape(-1) for z in features),
        tuple(np.atleast_1d(np.asarray(u, dtype=np.float64)).reshape(-1) for u in controls),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_mlp_header(buf: io.BytesIO, mlp: Mlp):
    sizes = mlp.sizes
    buf.write(struct.pack("<I", len(mlp.layers)))
    buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
    buf.write(bytes(ACTIVATION_TAGS[a] for a in mlp.activations))


def _read_mlp_header(buf: io.BytesIO):
    (L,) = struct.unpack("<I", _read_exact(buf, 4))
    if L < 1 or L > 1024:
        raise ValueError("corrupt model file: bad layer count")
    sizes = struct.unpack(f"<{L + 1}I", _read_exact(buf, 4 * (L + 1)))
    tags = _read_exact(buf, L)
    try:
        acts = [_TAG_NAMES[t] for t in tags]
    except KeyError:
        raise ValueError("corrupt model file: unknown activation tag") from None
    return sizes, acts


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("corrupt model file: truncated")
    return data


def params_to_bytes(params: DdmParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", params.n, params.feature_dim, params.control_dim))
    for mlp in (params.encoder, params.decoder, params.predictor):
        _write_mlp_header(buf, mlp)
    buf.write(params.vector().astype("<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> DdmParams:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError("not a DDM1 model file")
    n, m, F = struct.unpack("<III", _read_exact(buf, 12))
    mlps = []
    for _ in range(3):
        sizes, acts = _read_mlp_header(buf)
        mlps.append(Mlp.zeros(sizes, acts))
    template = DdmParams(*mlps, n=n, control_dim=F)
    if template.feature_dim != m:
        raise ValueError("corrupt model file: feature dimension mismatch")
    payload = buf.read()
    if len(payload) != 8 * template.size:
        raise ValueError("corrupt model file: payload size mismatch")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("corrupt model file: non-finite parameters")
    return template.with_vector(theta)


def save_params(params: DdmParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> DdmParams:
    return params_from_bytes(Path(path).read_bytes())
