"""Particle-based sum-product filter over terminal state, visibility, and variances.

Beliefs are weighted particle sets, one set per latent, with the p-th
particles of all latents stacked into a joint tuple so the per-step
likelihood work is linear in the particle count.  The invisible branch of
each station's visibility variable is carried as one scalar mass per station
rather than as dummy particles: its likelihood does not depend on the path
power, so nothing is lost and no placeholder density is ever evaluated.

Each step runs prediction/birth, a measurement update sharing one
hypothesis-pair likelihood evaluation per (station, particle), estimate
extraction, and systematic resampling of every particle set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .likelihood import FeatureBank, batch_log_likelihood
from .signal import ArrayGeometry, Calibration, SignalConfig
from .states import (
    STATE_DIM,
    LosTransitionParams,
    MotionParams,
    NoiseTransitionParams,
    Priors,
    sample_eta_transition,
    sample_gamma_appearance,
    sample_gamma_survival,
    sample_mt_transition,
    sample_priors,
)


class DegeneracyError(RuntimeError):
    "All importance weights vanished; carries per-station diagnostics."

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 1000
    n_birth: int = 50
    n_subset: int = 128
    seed: int = 0
    threads: int | None = None
    check_invariants: bool = False

    def __post_init__(self):
        if not 0 < self.n_birth < self.n_particles:
            raise ValueError("need 0 < n_birth < n_particles")
        if not 0 < self.n_subset <= self.n_particles:
            raise ValueError("need 0 < n_subset <= n_particles")


@dataclass
class ParticleBeliefs:
    """Weighted particle sets after one measurement update.

    ``w_gamma[j]`` is unnormalized: its sum is the station's visibility
    probability ``p_vis[j]``; the complementary mass ``1 - p_vis[j]`` belongs
    to the invisible branch.
    """

    mt: np.ndarray
    w_mt: np.ndarray
    gamma: np.ndarray
    w_gamma: np.ndarray
    eta: np.ndarray
    w_eta: np.ndarray
    p_vis: np.ndarray


@dataclass
class PredictedBeliefs:
    mt: np.ndarray
    w_mt: np.ndarray
    gamma: np.ndarray
    w_gamma: np.ndarray  # survivor/birth masses; sums to the predicted visibility
    eta: np.ndarray
    w_eta: np.ndarray
    mass_r0: np.ndarray  # per-station invisible mass


@dataclass
class StateEstimates:
    k: int
    mt: np.ndarray
    p_vis: np.ndarray
    gamma: np.ndarray  # NaN where the visibility mass is zero
    eta: np.ndarray


@dataclass
class BeliefSnapshot:
    "Subset of the post-resampling beliefs retained for the learning step."

    k: int
    mt: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    p_vis: np.ndarray
    mt_mmse: np.ndarray
    gamma_mmse: np.ndarray
    eta_mmse: np.ndarray


@dataclass
class FilterResult:
    estimates: list
    snapshots: list
    beliefs: ParticleBeliefs
    invariant_violations: list = field(default_factory=list)


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    "Systematic resampling: n indices drawn with one uniform offset."
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("cannot resample from zero total weight")
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights / total), positions, side="right").clip(0, len(weights) - 1)


def init_beliefs(priors: Priors, n_stations: int, cfg: FilterConfig,
                 rng: np.random.Generator) -> ParticleBeliefs:
    "Initial weighted beliefs drawn from the priors."
    p = cfg.n_particles
    init = sample_priors(priors, n_stations, p, rng)
    w = np.full(p, 1.0 / p)
    w_gamma = np.full((n_stations, p), priors.p_visible0 / p)
    return ParticleBeliefs(mt=init.mt, w_mt=w.copy(), gamma=init.gamma,
                           w_gamma=w_gamma, eta=init.eta,
                           w_eta=np.tile(w, (n_stations, 1)),
                           p_vis=np.full(n_stations, priors.p_visible0))


def predict_step(beliefs: ParticleBeliefs, z_o: float, motion: MotionParams,
                 los: LosTransitionParams, noise: NoiseTransitionParams,
                 cfg: FilterConfig, rng: np.random.Generator) -> PredictedBeliefs:
    """Prediction and birth.

    Terminal and noise particles propagate through their transitions with
    inherited weights.  Per station, the first P' = P - n_birth visibility
    particles survive (scaled to carry mass p_visible * p_prev) and n_birth
    fresh particles from the appearance density carry mass
    p_appear * (1 - p_prev); the complementary invisible mass becomes the
    station's scalar.
    """
    p = cfg.n_particles
    n_stations = beliefs.gamma.shape[0]
    mt = sample_mt_transition(beliefs.mt, z_o, motion, rng)
    eta = np.stack([sample_eta_transition(beliefs.eta[j], noise, rng)
                    for j in range(n_stations)])

    p_surv = p - cfg.n_birth
    gamma = np.empty((n_stations, p))
    w_gamma = np.empty((n_stations, p))
    mass_r0 = np.empty(n_stations)
    for j in range(n_stations):
        p_prev = beliefs.p_vis[j]
        surv_w = beliefs.w_gamma[j, :p_surv]
        surv_total = surv_w.sum()
        share = surv_w / surv_total if surv_total > 0 else np.full(p_surv, 1.0 / p_surv)
        gamma[j, :p_surv] = sample_gamma_survival(beliefs.gamma[j, :p_surv], los, rng)
        w_gamma[j, :p_surv] = los.p_visible * p_prev * share
        gamma[j, p_surv:] = sample_gamma_appearance(cfg.n_birth, los, rng)
        w_gamma[j, p_surv:] = los.p_appear * (1.0 - p_prev) / cfg.n_birth
        mass_r0[j] = (1.0 - los.p_visible) * p_prev + (1.0 - los.p_appear) * (1.0 - p_prev)
    return PredictedBeliefs(mt=mt, w_mt=beliefs.w_mt.copy(), gamma=gamma,
                            w_gamma=w_gamma, eta=eta, w_eta=beliefs.w_eta.copy(),
                            mass_r0=mass_r0)


def _logsumexp(log_terms, axis=None):
    m = np.max(log_terms, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(log_terms - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def update_step(pred: PredictedBeliefs, frame_z: np.ndarray,
                bs_positions: np.ndarray, features, cfg_rf: SignalConfig,
                geo: ArrayGeometry, cal: Calibration, fcfg: FilterConfig,
                k: int = 0) -> ParticleBeliefs:
    """Measurement update from one frame; returns weighted (unresampled) beliefs.

    Every station/particle pair is evaluated once under both visibility
    hypotheses; the terminal and noise weights use the hypothesis mixture
    with the predicted scalar masses, the visibility weights use the visible
    branch against the invisible scalar.  All bookkeeping is in log domain.
    """
    n_stations = frame_z.shape[0]
    p = pred.mt.shape[0]
    log_w_mt = np.log(np.maximum(pred.w_mt, 1e-300))
    log_w_eta = np.log(np.maximum(pred.w_eta, 1e-300))
    w_gamma_new = np.empty_like(pred.w_gamma)
    p_vis = np.empty(n_stations)

    for j in range(n_stations):
        bank = features[j] if features is not None else FeatureBank.empty()
        res = batch_log_likelihood(frame_z[j], pred.mt[:, 0:2], pred.mt[:, 4],
                                   pred.gamma[j], pred.eta[j], bank,
                                   bs_positions[j], cfg_rf, geo, cal,
                                   threads=fcfg.threads)
        ll = np.nan_to_num(res.values, nan=-np.inf)
        ll0, ll1 = ll[:, 0], ll[:, 1]
        q1 = pred.w_gamma[j].sum()
        m0 = pred.mass_r0[j]

        # Visibility branch masses (shared shift keeps the ratio exact).
        log_a1_terms = np.log(np.maximum(pred.w_gamma[j], 1e-300)) + ll1
        shift = max(np.max(log_a1_terms), np.max(np.log(max(m0, 1e-300)) + ll0 + log_w_eta[j]))
        if not np.isfinite(shift):
            raise DegeneracyError(
                f"all likelihoods vanished at step {k}, station {j}",
                {"step": k, "station": j, "max_ll1": float(np.max(ll1))})
        a1 = np.exp(log_a1_terms - shift)
        a0 = m0 * np.sum(np.exp(np.log(np.maximum(pred.w_eta[j], 1e-300)) + ll0 - shift))
        total = a1.sum() + a0
        if total <= 0 or not np.isfinite(total):
            raise DegeneracyError(
                f"visibility normalization failed at step {k}, station {j}",
                {"step": k, "station": j})
        p_vis[j] = a1.sum() / total
        w_gamma_new[j] = a1 / total

        # Hypothesis mixture for terminal and noise weights.
        mix = np.logaddexp(np.log(max(q1, 1e-300)) + ll1, np.log(max(m0, 1e-300)) + ll0)
        log_w_mt = log_w_mt + mix
        log_w_eta[j] = log_w_eta[j] + mix

    norm = _logsumexp(log_w_mt, axis=0)
    if not np.isfinite(norm):
        raise DegeneracyError(f"terminal weights vanished at step {k}", {"step": k})
    w_mt = np.exp(log_w_mt - norm)
    w_eta = np.empty_like(log_w_eta)
    for j in range(n_stations):
        norm_j = _logsumexp(log_w_eta[j], axis=0)
        if not np.isfinite(norm_j):
            raise DegeneracyError(
                f"noise weights vanished at step {k}, station {j}",
                {"step": k, "station": j})
        w_eta[j] = np.exp(log_w_eta[j] - norm_j)

    return ParticleBeliefs(mt=pred.mt, w_mt=w_mt, gamma=pred.gamma,
                           w_gamma=w_gamma_new, eta=pred.eta, w_eta=w_eta,
                           p_vis=p_vis)


def estimate(beliefs: ParticleBeliefs, k: int = 0) -> StateEstimates:
    "Posterior-mean estimates; the path power conditions on the visible branch."
    n_stations = beliefs.gamma.shape[0]
    mt = beliefs.w_mt @ beliefs.mt
    gamma = np.full(n_stations, np.nan)
    eta = np.empty(n_stations)
    for j in range(n_stations):
        if beliefs.p_vis[j] > 0:
            gamma[j] = (beliefs.w_gamma[j] @ beliefs.gamma[j]) / beliefs.p_vis[j]
        eta[j] = beliefs.w_eta[j] @ beliefs.eta[j]
    return StateEstimates(k=k, mt=mt, p_vis=beliefs.p_vis.copy(), gamma=gamma, eta=eta)


def resample_beliefs(beliefs: ParticleBeliefs, fcfg: FilterConfig,
                     rng: np.random.Generator) -> ParticleBeliefs:
    "Systematic resampling of every particle set; masses are preserved."
    p = fcfg.n_particles
    n_stations = beliefs.gamma.shape[0]
    idx = systematic_resample(beliefs.w_mt, p, rng)
    mt = beliefs.mt[idx]
    gamma = np.empty_like(beliefs.gamma)
    w_gamma = np.empty_like(beliefs.w_gamma)
    eta = np.empty_like(beliefs.eta)
    for j in range(n_stations):
        if beliefs.p_vis[j] > 0:
            gidx = systematic_resample(beliefs.w_gamma[j], p, rng)
            gamma[j] = beliefs.gamma[j][gidx]
        else:
            gamma[j] = beliefs.gamma[j]
        w_gamma[j] = beliefs.p_vis[j] / p
        eidx = systematic_resample(beliefs.w_eta[j], p, rng)
        eta[j] = beliefs.eta[j][eidx]
    uniform = np.full(p, 1.0 / p)
    return ParticleBeliefs(mt=mt, w_mt=uniform.copy(), gamma=gamma, w_gamma=w_gamma,
                           eta=eta, w_eta=np.tile(uniform, (n_stations, 1)),
                           p_vis=beliefs.p_vis.copy())


def _check_invariants(beliefs: ParticleBeliefs, k: int, violations: list):
    if abs(beliefs.w_mt.sum() - 1.0) > 1e-10:
        violations.append((k, "mt weight sum", float(beliefs.w_mt.sum())))
    for j in range(beliefs.gamma.shape[0]):
        if abs(beliefs.w_eta[j].sum() - 1.0) > 1e-10:
            violations.append((k, f"eta weight sum {j}", float(beliefs.w_eta[j].sum())))
        gap = abs(beliefs.w_gamma[j].sum() - beliefs.p_vis[j])
        if gap > 1e-10:
            violations.append((k, f"visibility mass {j}", float(gap)))
        if not 0.0 <= beliefs.p_vis[j] <= 1.0 + 1e-12:
            violations.append((k, f"visibility bound {j}", float(beliefs.p_vis[j])))
    if not np.all(np.isfinite(beliefs.w_mt)):
        violations.append((k, "non-finite mt weights", np.nan))


def run_filter(frames, imu_orientation, bs_positions, motion: MotionParams,
               los: LosTransitionParams, noise: NoiseTransitionParams,
               priors: Priors, fcfg: FilterConfig, cfg_rf: SignalConfig,
               geo: ArrayGeometry, cal: Calibration, features=None,
               collect_snapshots: bool = True) -> FilterResult:
    """Sequential predict/update/estimate/resample over all frames.

    ``features[j]`` parameterizes station j's multipath map; None runs the
    direct-path-only model.  Estimates include the prior (k = 0); snapshots
    keep the first ``n_subset`` particles of each post-resampling set.
    """
    bs_positions = np.atleast_2d(bs_positions)
    n_stations = bs_positions.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(fcfg.seed))
    beliefs = init_beliefs(priors, n_stations, fcfg, rng)
    estimates = [estimate(beliefs, k=0)]
    snapshots = []
    violations: list = []

    for frame in frames:
        k = frame.k
        pred = predict_step(beliefs, imu_orientation[k], motion, los, noise, fcfg, rng)
        weighted = update_step(pred, frame.z, bs_positions, features, cfg_rf, geo,
                               cal, fcfg, k=k)
        est = estimate(weighted, k=k)
        estimates.append(est)
        beliefs = resample_beliefs(weighted, fcfg, rng)
        if fcfg.check_invariants:
            _check_invariants(weighted, k, violations)
            _check_invariants(beliefs, k, violations)
        if collect_snapshots:
            sub = fcfg.n_subset
            snapshots.append(BeliefSnapshot(
                k=k, mt=beliefs.mt[:sub].copy(), gamma=beliefs.gamma[:, :sub].copy(),
                eta=beliefs.eta[:, :sub].copy(), p_vis=beliefs.p_vis.copy(),
                mt_mmse=est.mt.copy(), gamma_mmse=est.gamma.copy(),
                eta_mmse=est.eta.copy()))
    return FilterResult(estimates=estimates, snapshots=snapshots, beliefs=beliefs,
                        invariant_violations=violations)
