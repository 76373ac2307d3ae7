"""Samplers for the latent first-order Markov dynamics and priors.

Terminal state x = (position, velocity, orientation) follows constant-velocity
kinematics driven by white acceleration, with the orientation fused against an
inertial heading measurement.  Per-station latents: a two-state visibility
chain with Gamma-distributed direct-path power, and a Gamma random walk for
the noise variance.  All Gamma laws use the (shape, scale) parameterization,
so a transition with shape c and scale prev/c keeps the previous value as its
mean with variance prev^2/c.

Samplers take an explicit numpy Generator; concurrent callers must hand each
worker an independent stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 5
"Terminal state layout: [x, y, vx, vy, orientation]."


@dataclass(frozen=True)
class MotionParams:
    dt: float
    sigma_acc: float = 0.15
    sigma_o_walk: float = 0.01
    sigma_o_meas: float = 0.02

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.sigma_acc, self.sigma_o_walk, self.sigma_o_meas) < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class LosTransitionParams:
    """Visibility chain and direct-path power dynamics.

    ``appearance_mean``/``appearance_shape`` parameterize the Gamma density a
    re-appearing path's power is drawn from; ``dummy_mean`` parameterizes the
    placeholder density attached to the invisible branch (it never influences
    weights, the likelihood ignores the power when the path is absent).
    """

    p_appear: float = 0.05
    p_visible: float = 0.999
    c_gamma: float = 100.0
    appearance_mean: float = 1.0
    appearance_shape: float = 2.0
    dummy_mean: float = 1e-6

    def __post_init__(self):
        if not (0 < self.p_appear <= 1 and 0 < self.p_visible <= 1):
            raise ValueError("probabilities must lie in (0, 1]")
        if self.c_gamma <= 0 or self.appearance_shape <= 0:
            raise ValueError("Gamma shapes must be positive")


@dataclass(frozen=True)
class NoiseTransitionParams:
    c_eta: float = 1000.0

    def __post_init__(self):
        if self.c_eta <= 0:
            raise ValueError("c_eta must be positive")


@dataclass(frozen=True)
class Priors:
    """Independent initial laws for all latents.

    Position/velocity/orientation are Gaussian around the stated means; the
    direct-path power and noise variance are Gamma with the stated mean and
    shape; visibility starts Bernoulli(p_visible0).
    """

    position_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    position_std: float = 1.0
    velocity_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    velocity_std: float = 0.5
    orientation_mean: float = 0.0
    orientation_std: float = 0.1
    p_visible0: float = 0.9
    gamma_mean: float = 1.0
    gamma_shape: float = 2.0
    eta_mean: float = 1.0
    eta_shape: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "position_mean",
                           np.asarray(self.position_mean, dtype=np.float64))
        object.__setattr__(self, "velocity_mean",
                           np.asarray(self.velocity_mean, dtype=np.float64))
        if not 0 <= self.p_visible0 <= 1:
            raise ValueError("p_visible0 must lie in [0, 1]")
        if min(self.gamma_shape, self.eta_shape) <= 0:
            raise ValueError("Gamma shapes must be positive")
        if min(self.gamma_mean, self.eta_mean) <= 0:
            raise ValueError("Gamma means must be positive")


def _gamma_mean_shape(rng, mean, shape, size=None):
    "Gamma draw parameterized by (mean, shape): scale = mean/shape."
    return rng.gamma(shape, mean / shape, size=size)


def wrap_angle(a):
    "Wrap to (-pi, pi]."
    return np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi


def sample_mt_transition(x_prev: np.ndarray, z_o: float, params: MotionParams,
                         rng: np.random.Generator) -> np.ndarray:
    """One constant-velocity step with orientation fused against the heading measurement.

    ``x_prev`` is (..., 5).  The new orientation is Gaussian around the
    variance-weighted combination of the random-walk prediction and ``z_o``
    (the innovation is angle-wrapped first), which also covers the degenerate
    zero-noise configurations.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    out = np.array(x_prev, copy=True)
    dt = params.dt
    shape = x_prev.shape[:-1]
    w = params.sigma_acc * rng.standard_normal(shape + (2,))
    out[..., 0:2] += x_prev[..., 2:4] * dt + 0.5 * w * dt ** 2
    out[..., 2:4] += w * dt

    var_walk = params.sigma_o_walk ** 2
    var_meas = params.sigma_o_meas ** 2
    total = var_walk + var_meas
    if total == 0.0:
        mean = x_prev[..., 4]
        std = 0.0
    else:
        innov = wrap_angle(z_o - x_prev[..., 4])
        mean = x_prev[..., 4] + (var_walk / total) * innov
        std = np.sqrt(var_walk * var_meas / total)
    out[..., 4] = mean + std * rng.standard_normal(shape)
    return out


def sample_los_transition(gamma_prev: float, r_prev: int, params: LosTransitionParams,
                          rng: np.random.Generator) -> tuple:
    """One step of the joint (power, visibility) chain.

    Visible survivors keep their power mean through a Gamma step; appearing
    paths draw fresh power from the appearance density; invisible steps carry
    a draw from the placeholder density.
    """
    if gamma_prev < 0:
        raise ValueError("gamma_prev must be non-negative")
    if r_prev:
        if rng.uniform() < params.p_visible:
            return float(_gamma_mean_shape(rng, max(gamma_prev, 1e-300),
                                           params.c_gamma)), 1
        return float(_gamma_mean_shape(rng, params.dummy_mean, 1.0)), 0
    if rng.uniform() < params.p_appear:
        return float(_gamma_mean_shape(rng, params.appearance_mean,
                                       params.appearance_shape)), 1
    return float(_gamma_mean_shape(rng, params.dummy_mean, 1.0)), 0


def sample_gamma_survival(gamma_prev: np.ndarray, params: LosTransitionParams,
                          rng: np.random.Generator) -> np.ndarray:
    "Vectorized power transition conditional on continued visibility."
    gamma_prev = np.asarray(gamma_prev, dtype=np.float64)
    return rng.gamma(params.c_gamma, np.maximum(gamma_prev, 1e-300) / params.c_gamma)


def sample_gamma_appearance(count: int, params: LosTransitionParams,
                            rng: np.random.Generator) -> np.ndarray:
    "Fresh power draws for paths that just became visible."
    return _gamma_mean_shape(rng, params.appearance_mean, params.appearance_shape,
                             size=count)


def sample_eta_transition(eta_prev: np.ndarray, params: NoiseTransitionParams,
                          rng: np.random.Generator) -> np.ndarray:
    "Gamma noise-variance step keeping the previous value as the mean."
    eta_prev = np.asarray(eta_prev, dtype=np.float64)
    if np.any(eta_prev <= 0):
        raise ValueError("eta_prev must be positive")
    return rng.gamma(params.c_eta, eta_prev / params.c_eta)


@dataclass
class InitialParticles:
    mt: np.ndarray       # (P, 5)
    gamma: np.ndarray    # (J, P)
    r: np.ndarray        # (J, P) in {0, 1}
    eta: np.ndarray      # (J, P)


def sample_priors(priors: Priors, n_stations: int, n_particles: int,
                  rng: np.random.Generator) -> InitialParticles:
    "Independent initial particles for every latent."
    p = n_particles
    mt = np.empty((p, STATE_DIM))
    mt[:, 0:2] = priors.position_mean + priors.position_std * rng.standard_normal((p, 2))
    mt[:, 2:4] = priors.velocity_mean + priors.velocity_std * rng.standard_normal((p, 2))
    mt[:, 4] = priors.orientation_mean + priors.orientation_std * rng.standard_normal(p)
    gamma = _gamma_mean_shape(rng, priors.gamma_mean, priors.gamma_shape,
                              size=(n_stations, p))
    r = (rng.uniform(size=(n_stations, p)) < priors.p_visible0).astype(np.int64)
    eta = _gamma_mean_shape(rng, priors.eta_mean, priors.eta_shape,
                            size=(n_stations, p))
    return InitialParticles(mt=mt, gamma=gamma, r=r, eta=eta)
