"""Learned per-station multipath map.

Two three-layer MLPs (ReLU hidden layers) map a station position to the map
features used by the likelihood: ``f_p`` emits D positions plus delay biases,
``f_rho`` emits D amplitude variances.  Biases and variances go through an
absolute-value output mapping so they stay non-negative for any parameters.
The station position is expanded with sinusoidal positional encodings before
it enters either network.

Parameters live in one flat float64 vector (the optimizer's view); reverse-
mode gradients are implemented by hand and pinned against finite differences
in the test suite — that gradient check is the single most important property
test in this repository, since everything the learner does flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .likelihood import FeatureBank

GEOMETRY_DIM = 2


@dataclass(frozen=True)
class MapArchitecture:
    """Shapes and output scalings of the map networks.

    ``scene_extent`` normalizes the encoder input; ``pos_scale``/``bias_scale``
    /``gamma_scale`` convert raw network outputs into meters/seconds/power so
    the optimizer works on O(1) quantities regardless of scene units.
    """

    n_features: int = 6
    n_enc: int = 4
    hidden1: int = 64
    hidden2: int = 64
    scene_extent: float = 1.0
    pos_scale: float = 1.0
    bias_scale: float = 1.0
    gamma_scale: float = 1.0

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("need at least one map feature")
        if self.n_enc < 0 or self.hidden1 < 1 or self.hidden2 < 1:
            raise ValueError("invalid architecture sizes")
        if min(self.scene_extent, self.pos_scale, self.bias_scale,
               self.gamma_scale) <= 0:
            raise ValueError("scales must be positive")

    @property
    def d_in(self) -> int:
        return GEOMETRY_DIM * (1 + self.n_enc)

    @property
    def layer_shapes(self) -> list:
        "(out, in) per layer: three for f_p, then three for f_rho."
        d = self.n_features
        return [
            (self.hidden1, self.d_in), (self.hidden2, self.hidden1),
            ((GEOMETRY_DIM + 1) * d, self.hidden2),
            (self.hidden1, self.d_in), (self.hidden2, self.hidden1),
            (d, self.hidden2),
        ]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def encode_position(p_bs: np.ndarray, n_enc: int, scene_extent: float) -> np.ndarray:
    "Normalized position followed by sin(2^i pi p~) per coordinate, i = 0..n_enc-1."
    p = np.asarray(p_bs, dtype=np.float64) / scene_extent
    if n_enc == 0:
        return p.copy()
    freqs = (2.0 ** np.arange(n_enc)) * np.pi
    return np.concatenate([p, np.sin(np.outer(freqs, p)).ravel()])


def split_params(theta: np.ndarray, arch: MapArchitecture) -> list:
    "View the flat vector as a list of (W, b) per layer (no copies)."
    if theta.shape != (arch.n_params,):
        raise ValueError(f"theta must have length {arch.n_params}, got {theta.shape}")
    layers = []
    off = 0
    for out, inp in arch.layer_shapes:
        w = theta[off:off + out * inp].reshape(out, inp)
        off += out * inp
        b = theta[off:off + out]
        off += out
        layers.append((w, b))
    return layers


def init_params(arch: MapArchitecture, rng: np.random.Generator,
                bbox_min=None, bbox_max=None, gamma_hint: float = 0.1,
                head_scale: float = 1.0) -> np.ndarray:
    """He-uniform weights, zero hidden biases, then seed the output heads.

    The position head's bias puts each feature at a random point of the given
    bounding box; the He-scaled head weights (times ``head_scale``) add an
    input-dependent scatter on top, so different station inputs start with
    different feature layouts.  Variance-head biases sit at ``gamma_hint``.
    """
    theta = np.zeros(arch.n_params)
    layers = split_params(theta, arch)
    for li, (w, _) in enumerate(layers):
        limit = np.sqrt(6.0 / w.shape[1])
        if li in (2, 5):
            limit *= head_scale
        w[:] = rng.uniform(-limit, limit, size=w.shape)
    d = arch.n_features
    if bbox_min is not None and bbox_max is not None:
        pts = rng.uniform(np.asarray(bbox_min), np.asarray(bbox_max), size=(d, 2))
        head = layers[2][1].reshape(d, GEOMETRY_DIM + 1)
        head[:, :2] = pts / arch.pos_scale
        head[:, 2] = 0.0
    layers[5][1][:] = gamma_hint / arch.gamma_scale
    return theta


def _forward(x: np.ndarray, layers: list, cache: list | None = None) -> np.ndarray:
    h = x
    for li, (w, b) in enumerate(layers):
        pre = w @ h + b
        if cache is not None:
            cache.append((h, pre))
        h = np.maximum(pre, 0.0) if li < len(layers) - 1 else pre
    return h


def predict_map(p_bs: np.ndarray, theta: np.ndarray, arch: MapArchitecture) -> FeatureBank:
    """Map features of one station: positions, delay biases, amplitude variances.

    Pure in (p_bs, theta): independent of the terminal state, bit-identical
    across repeated calls.
    """
    layers = split_params(np.asarray(theta, dtype=np.float64), arch)
    x = encode_position(p_bs, arch.n_enc, arch.scene_extent)
    raw_p = _forward(x, layers[:3]).reshape(arch.n_features, GEOMETRY_DIM + 1)
    raw_g = _forward(x, layers[3:])
    if not (np.all(np.isfinite(raw_p)) and np.all(np.isfinite(raw_g))):
        raise FloatingPointError("non-finite map network activation")
    return FeatureBank(positions=raw_p[:, :2] * arch.pos_scale,
                       biases=np.abs(raw_p[:, 2]) * arch.bias_scale,
                       gammas=np.abs(raw_g) * arch.gamma_scale)


def _backward_net(layers, cache, delta):
    "Reverse pass through one MLP; returns flat per-layer (dW, db) gradients."
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        h_in, pre = cache[li]
        if li < len(layers) - 1:
            delta = delta * (pre > 0.0)
        grads.append((np.outer(delta, h_in), delta.copy()))
        delta = w.T @ delta
    return grads[::-1]


def backward(p_bs: np.ndarray, theta: np.ndarray, arch: MapArchitecture,
             d_positions: np.ndarray, d_biases: np.ndarray,
             d_gammas: np.ndarray) -> np.ndarray:
    """Exact gradient of <upstream, predict_map> with respect to theta.

    The absolute-value output maps contribute sign(pre-activation) with
    subgradient 0 at exactly 0, matching the ReLU convention.
    """
    d = arch.n_features
    d_positions = np.asarray(d_positions, dtype=np.float64)
    d_biases = np.asarray(d_biases, dtype=np.float64)
    d_gammas = np.asarray(d_gammas, dtype=np.float64)
    if d_positions.shape != (d, 2) or d_biases.shape != (d,) or d_gammas.shape != (d,):
        raise ValueError("upstream gradient shapes do not match the feature count")

    theta = np.asarray(theta, dtype=np.float64)
    layers = split_params(theta, arch)
    x = encode_position(p_bs, arch.n_enc, arch.scene_extent)
    cache_p: list = []
    cache_g: list = []
    raw_p = _forward(x, layers[:3], cache_p).reshape(d, GEOMETRY_DIM + 1)
    raw_g = _forward(x, layers[3:], cache_g)

    delta_p = np.empty((d, GEOMETRY_DIM + 1))
    delta_p[:, :2] = d_positions * arch.pos_scale
    delta_p[:, 2] = d_biases * arch.bias_scale * np.sign(raw_p[:, 2])
    delta_g = d_gammas * arch.gamma_scale * np.sign(raw_g)

    grads_p = _backward_net(layers[:3], cache_p, delta_p.ravel())
    grads_g = _backward_net(layers[3:], cache_g, delta_g)
    out = np.empty_like(theta)
    off = 0
    for dw, db in grads_p + grads_g:
        out[off:off + dw.size] = dw.ravel()
        off += dw.size
        out[off:off + db.size] = db
        off += db.size
    return out


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState):
    "One standard Adam descent step with bias correction; returns (theta, state)."
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("parameter/gradient/state lengths disagree")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_theta, replace(state, m=m, v=v, step=t)
