"""Unsupervised fitting of the multipath map by expectation-maximization.

Each iteration alternates an inference pass and a learning pass: the particle
filter runs under the current parameters and leaves per-step belief
snapshots; the surrogate objective

    Q = sum_k sum_j (1/P) sum_p [ p_vis * log f(z | r=1, particle)
                                  + (1 - p_vis) * log f(z | r=0, particle) ]

is then ascended over the map parameters with Adam while the snapshots stay
frozen.  Because the snapshots approximate the posterior under the current
parameters, each ascent step on Q pushes up a lower bound on the measurement
evidence; that is the correctness argument for the loop, and the
monotonicity of Q across the learning phase is asserted by the acceptance
suite.

Optionally the response calibration is learned the same way: per iteration,
one phase updates the map with the calibration frozen, then one phase
updates the calibration with the map frozen, each with its own optimizer
state.

Approximations: only the first P0 particles of each resampled belief are
kept, and the particle sums can be collapsed to the posterior-mean point
(``use_mmse_points``).  With ground-truth positions available, the snapshots
can be conditioned on the true track instead of the filtered one
(``supervised``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .filtering import BeliefSnapshot, FilterConfig, run_filter
from .likelihood import batch_log_likelihood, batch_pair_sensitivities
from .neuralmap import AdamState, MapArchitecture, adam_step, backward, predict_map
from .signal import SPEED_OF_LIGHT, ArrayGeometry, Calibration, SignalConfig
from .states import LosTransitionParams, MotionParams, NoiseTransitionParams, Priors


@dataclass(frozen=True)
class LearnConfig:
    em_iters: int = 20
    adam_steps: int = 100
    adam_lr: float = 1e-3
    chi_adam_lr: float = 1e-4
    segment_len: int | None = None  # None = full track
    use_mmse_points: bool = False
    supervised: bool = False
    learn_chi: bool = False

    def __post_init__(self):
        if self.em_iters < 0 or self.adam_steps < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.segment_len is not None and self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")


@dataclass
class QEvaluation:
    value: float
    per_step: dict  # (k, j) -> term value
    grad_theta: np.ndarray | None = None
    grad_chi: np.ndarray | None = None


@dataclass
class TrainingLogEntry:
    iteration: int
    phase: str
    q_before: float
    q_after: float
    grad_norm: float
    seconds: float


@dataclass
class LearnProblem:
    "Everything the EM loop needs besides the learnable parameters."

    frames: list
    imu_orientation: np.ndarray
    bs_positions: np.ndarray
    motion: MotionParams
    los: LosTransitionParams
    noise: NoiseTransitionParams
    priors: Priors
    fcfg: FilterConfig
    cfg: SignalConfig
    geo: ArrayGeometry
    arch: MapArchitecture
    truth_states: np.ndarray | None = None


def segment_scheduler(n_steps: int, segment_len: int | None) -> list:
    "Contiguous 1-based windows covering 1..K; None gives the full track."
    if segment_len is None:
        return [(1, n_steps)]
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    return [(s, min(s + segment_len - 1, n_steps))
            for s in range(1, n_steps + 1, segment_len)]


def supervised_condition(snapshots: list, truth_states: np.ndarray) -> list:
    "Replace terminal positions/orientations in the snapshots by ground truth."
    out = []
    for snap in snapshots:
        if snap.k >= truth_states.shape[0]:
            raise ValueError(f"no ground truth for step {snap.k}")
        mt = snap.mt.copy()
        mt[:, 0:2] = truth_states[snap.k, 0:2]
        mt[:, 4] = truth_states[snap.k, 4]
        mmse = snap.mt_mmse.copy()
        mmse[0:2] = truth_states[snap.k, 0:2]
        mmse[4] = truth_states[snap.k, 4]
        out.append(replace(snap, mt=mt, mt_mmse=mmse))
    return out


def _station_features(theta, chi_cal, bs_positions, arch):
    return [predict_map(bs_positions[j], theta, arch)
            for j in range(len(bs_positions))]


def _select(snapshots, segment):
    if segment is None:
        return snapshots
    lo, hi = segment
    return [s for s in snapshots if lo <= s.k <= hi]


def _gather_terms(snapshots, frames, j, use_mmse):
    """Stack every (step, particle) term of one station into flat batch arrays.

    Returns (z, positions, orientations, gammas, etas, p_vis_rows, ks,
    rows_per_step); each snapshot contributes ``rows_per_step`` consecutive
    rows so per-step values can be recovered by fixed-stride reduction.
    """
    frame_by_k = {f.k: f for f in frames}
    rows = 1 if use_mmse else snapshots[0].mt.shape[0]
    z_list, pos_list, ori_list, gam_list, eta_list, pv_list, ks = [], [], [], [], [], [], []
    for snap in snapshots:
        z_row = frame_by_k[snap.k].z[j]
        if use_mmse:
            gamma = snap.gamma_mmse[j]
            z_list.append(z_row[None, :])
            pos_list.append(snap.mt_mmse[None, 0:2])
            ori_list.append(np.atleast_1d(snap.mt_mmse[4]))
            gam_list.append(np.atleast_1d(gamma if np.isfinite(gamma) else 0.0))
            eta_list.append(np.atleast_1d(snap.eta_mmse[j]))
        else:
            z_list.append(np.broadcast_to(z_row, (rows, z_row.shape[0])))
            pos_list.append(snap.mt[:, 0:2])
            ori_list.append(snap.mt[:, 4])
            gam_list.append(snap.gamma[j])
            eta_list.append(snap.eta[j])
        pv_list.append(np.full(rows, snap.p_vis[j]))
        ks.append(snap.k)
    return (np.concatenate(z_list), np.concatenate(pos_list),
            np.concatenate(ori_list), np.concatenate(gam_list),
            np.concatenate(eta_list), np.concatenate(pv_list), ks, rows)


def _mix_rows(ll0, ll1, pv):
    "Per-row hypothesis mixture with 0 * (possibly non-finite) guarded away."
    out = np.where(pv > 0, pv * ll1, 0.0) + np.where(pv < 1, (1.0 - pv) * ll0, 0.0)
    return out


def q_tilde(snapshots: list, frames: list, theta: np.ndarray, chi_cal: Calibration,
            problem: LearnProblem, learn_cfg: LearnConfig,
            segment: tuple | None = None) -> QEvaluation:
    "Objective value on frozen snapshots (no gradients)."
    banks = _station_features(theta, chi_cal, problem.bs_positions, problem.arch)
    chosen = _select(snapshots, segment)
    total = 0.0
    per_step = {}
    for j in range(len(problem.bs_positions)):
        z, pos, ori, gam, eta, pv, ks, rows = _gather_terms(
            chosen, frames, j, learn_cfg.use_mmse_points)
        res = batch_log_likelihood(z, pos, ori, gam, eta, banks[j],
                                   problem.bs_positions[j], problem.cfg,
                                   problem.geo, chi_cal)
        mixed = _mix_rows(res.values[:, 0], res.values[:, 1], pv)
        terms = mixed.reshape(len(ks), rows).sum(axis=1) / rows
        for k, term in zip(ks, terms):
            per_step[(k, j)] = float(term)
        total += float(terms.sum())
    return QEvaluation(value=total, per_step=per_step)


def q_tilde_grad(snapshots: list, frames: list, theta: np.ndarray,
                 chi_cal: Calibration, problem: LearnProblem,
                 learn_cfg: LearnConfig, segment: tuple | None = None,
                 want_chi: bool = False) -> QEvaluation:
    """Objective value plus gradients over the map (and optionally calibration).

    Per term, the likelihood's per-feature delay/azimuth/power partials are
    chained through the feature geometry into position/bias/variance
    gradients, accumulated per station, and pushed through the map networks'
    reverse pass once per station.
    """
    arch = problem.arch
    n_stations = len(problem.bs_positions)
    banks = _station_features(theta, chi_cal, problem.bs_positions, arch)
    chosen = _select(snapshots, segment)
    d = arch.n_features
    grad_chi = np.zeros(chi_cal.n_params) if want_chi else None
    grad_theta = np.zeros(arch.n_params)
    total = 0.0
    per_step = {}

    for j in range(n_stations):
        z, pos, ori, gam, eta, pv, ks, rows = _gather_terms(
            chosen, frames, j, learn_cfg.use_mmse_points)
        sens = batch_pair_sensitivities(z, pos, ori, gam, eta, banks[j],
                                        problem.bs_positions[j], problem.cfg,
                                        problem.geo, chi_cal,
                                        with_calibration=want_chi)
        mixed = _mix_rows(sens.ll0, sens.ll1, pv)
        terms = mixed.reshape(len(ks), rows).sum(axis=1) / rows
        for k, term in zip(ks, terms):
            per_step[(k, j)] = float(term)
        total += float(terms.sum())

        w1 = (pv / rows)[:, None]
        w0 = ((1.0 - pv) / rows)[:, None]
        mix_delay = w1 * sens.d_delay1 + w0 * sens.d_delay0      # (n, d)
        mix_azim = w1 * sens.d_azimuth1 + w0 * sens.d_azimuth0
        mix_gamma = w1 * sens.d_gamma1 + w0 * sens.d_gamma0

        # Geometry chain: feature position -> (delay, azimuth).
        diff = banks[j].positions[None, :, :] - pos[:, None, :]   # (n, d, 2)
        dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-9)
        j_tau = diff / (SPEED_OF_LIGHT * dist[..., None])
        j_phi = np.stack([-diff[..., 1], diff[..., 0]], axis=-1) / \
            (dist ** 2)[..., None]
        d_pos = np.einsum("nd,ndc->dc", mix_delay, j_tau) + \
            np.einsum("nd,ndc->dc", mix_azim, j_phi)
        d_bias = mix_delay.sum(axis=0)
        d_gamma = mix_gamma.sum(axis=0)
        grad_theta += backward(problem.bs_positions[j], theta, arch,
                               d_pos, d_bias, d_gamma)
        if want_chi:
            grad_chi += (w1 * sens.d_chi1).sum(axis=0) + (w0 * sens.d_chi0).sum(axis=0)

    return QEvaluation(value=total, per_step=per_step, grad_theta=grad_theta,
                       grad_chi=grad_chi)


def e_step(problem: LearnProblem, theta: np.ndarray, chi_cal: Calibration,
           learn_cfg: LearnConfig) -> list:
    "Filter pass under the current parameters; returns (conditioned) snapshots."
    banks = _station_features(theta, chi_cal, problem.bs_positions, problem.arch)
    result = run_filter(problem.frames, problem.imu_orientation,
                        problem.bs_positions, problem.motion, problem.los,
                        problem.noise, problem.priors, problem.fcfg, problem.cfg,
                        problem.geo, chi_cal, features=banks)
    snapshots = result.snapshots
    if learn_cfg.supervised:
        if problem.truth_states is None:
            raise ValueError("supervised learning requires ground-truth states")
        snapshots = supervised_condition(snapshots, problem.truth_states)
    return snapshots


def em_iteration(problem: LearnProblem, theta: np.ndarray, adam: AdamState,
                 chi_cal: Calibration, chi_adam: AdamState | None,
                 learn_cfg: LearnConfig, iteration: int = 0):
    """One inference pass plus the learning phase(s) on its frozen snapshots.

    Returns (theta, adam, chi_cal, chi_adam, log_entries, snapshots).  The
    calibration phase, when enabled, runs after the map phase with the map
    frozen at its just-updated value and a separate optimizer state.
    """
    snapshots = e_step(problem, theta, chi_cal, learn_cfg)
    segments = segment_scheduler(len(problem.frames), learn_cfg.segment_len)
    entries = []

    t0 = time.perf_counter()
    q_before = q_tilde(snapshots, problem.frames, theta, chi_cal, problem,
                       learn_cfg).value
    grad_norm = 0.0
    for segment in segments:
        for _ in range(learn_cfg.adam_steps):
            ev = q_tilde_grad(snapshots, problem.frames, theta, chi_cal, problem,
                              learn_cfg, segment=segment)
            if not np.isfinite(ev.value):
                raise FloatingPointError(
                    f"non-finite objective in iteration {iteration}")
            theta, adam = adam_step(theta, -ev.grad_theta, adam)
            grad_norm = float(np.linalg.norm(ev.grad_theta))
    q_after = q_tilde(snapshots, problem.frames, theta, chi_cal, problem,
                      learn_cfg).value
    entries.append(TrainingLogEntry(iteration=iteration, phase="theta",
                                    q_before=q_before, q_after=q_after,
                                    grad_norm=grad_norm,
                                    seconds=time.perf_counter() - t0))

    if learn_cfg.learn_chi:
        if chi_adam is None:
            chi_adam = AdamState.zeros(chi_cal.n_params, lr=learn_cfg.chi_adam_lr)
        t0 = time.perf_counter()
        chi_vec = chi_cal.pack()
        q_before_chi = q_tilde(snapshots, problem.frames, theta, chi_cal, problem,
                               learn_cfg).value
        grad_norm = 0.0
        for segment in segments:
            for _ in range(learn_cfg.adam_steps):
                ev = q_tilde_grad(snapshots, problem.frames, theta, chi_cal,
                                  problem, learn_cfg, segment=segment,
                                  want_chi=True)
                chi_vec, chi_adam = adam_step(chi_vec, -ev.grad_chi, chi_adam)
                chi_cal = Calibration.unpack(chi_vec, problem.cfg.m_f,
                                             problem.cfg.m_a)
                grad_norm = float(np.linalg.norm(ev.grad_chi))
        q_after_chi = q_tilde(snapshots, problem.frames, theta, chi_cal, problem,
                              learn_cfg).value
        entries.append(TrainingLogEntry(iteration=iteration, phase="chi",
                                        q_before=q_before_chi, q_after=q_after_chi,
                                        grad_norm=grad_norm,
                                        seconds=time.perf_counter() - t0))
    return theta, adam, chi_cal, chi_adam, entries, snapshots


def learn_map(problem: LearnProblem, theta: np.ndarray, chi_cal: Calibration,
              learn_cfg: LearnConfig):
    """Full EM loop; returns (theta, chi, log entries, last snapshots)."""
    adam = AdamState.zeros(theta.size, lr=learn_cfg.adam_lr)
    chi_adam = None
    log: list = []
    snapshots: list = []
    for t in range(learn_cfg.em_iters):
        theta, adam, chi_cal, chi_adam, entries, snapshots = em_iteration(
            problem, theta, adam, chi_cal, chi_adam, learn_cfg, iteration=t)
        log.extend(entries)
    return theta, chi_cal, log, snapshots
