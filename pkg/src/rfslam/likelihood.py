"""Zero-mean complex Gaussian likelihoods with identity-plus-low-rank covariance.

One measurement snapshot ``z`` of length M is modeled as zero-mean circular
Gaussian with covariance

    C = eta * I + r * gamma_lo * h_lo h_lo^H + P (sum_n gamma_n h_n h_n^H) P^H

where ``h_lo`` is the direct-path response at the terminal position, the
``h_n`` are map-feature responses, and ``P`` projects onto the orthogonal
complement of ``h_lo`` so the feature term cannot absorb direct-path energy.
Collecting the scaled columns into U gives C = eta*I + U U^H, and the
log-likelihood is evaluated through the R x R capacitance matrix
G = I + U^H U / eta instead of the M x M covariance (inversion and
determinant lemmas), dropping the cost from O(M^3) to O(M R^2 + R^3).

A dense O(M^3) assembly of the same covariance lives here as well; it is the
test oracle for every optimized path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .signal import (
    ArrayGeometry,
    Calibration,
    SignalConfig,
    array_response_batch,
    frequency_response_batch,
    path_geometry_batch,
)

ETA_FLOOR = 1e-12
"Smallest admissible noise variance."

_JITTER_START = 1e-12
_JITTER_LIMIT = 1e-6


class NumericalDegeneracyError(RuntimeError):
    """Raised when a capacitance matrix stays non-positive-definite after jitter."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FeatureBank:
    """Point features of one station's multipath map.

    Each feature is a position (m), a non-negative delay bias (s), and a
    non-negative amplitude variance (power).
    """

    positions: np.ndarray
    biases: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if pos.size == 0:
            pos = pos.reshape(0, 2)
        b = np.atleast_1d(np.asarray(self.biases, dtype=np.float64))
        g = np.atleast_1d(np.asarray(self.gammas, dtype=np.float64))
        if pos.shape != (b.shape[0], 2) or b.shape != g.shape:
            raise ValueError(
                f"inconsistent feature shapes: {pos.shape}, {b.shape}, {g.shape}")
        if np.any(b < 0):
            raise ValueError("feature biases must be non-negative")
        if np.any(g < 0):
            raise ValueError("feature variances must be non-negative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "gammas", g)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "FeatureBank":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class CovarianceParams:
    """Everything that parameterizes the snapshot covariance for one station."""

    bs_position: np.ndarray
    position: np.ndarray
    orientation: float
    los_present: int
    gamma_lo: float
    eta: float
    features: FeatureBank = field(default_factory=FeatureBank.empty)

    def __post_init__(self):
        object.__setattr__(self, "bs_position",
                           np.asarray(self.bs_position, dtype=np.float64))
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64))
        if self.los_present not in (0, 1):
            raise ValueError(f"los_present must be 0 or 1, got {self.los_present}")
        if self.gamma_lo < 0:
            raise ValueError("gamma_lo must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "eta", max(self.eta, ETA_FLOOR))


@dataclass
class LowRankFactors:
    """Low-rank pieces of one covariance evaluation.

    ``u`` has one column per active component (direct path first when
    present, then the D feature columns), ``g = I + u^H u / eta`` is the
    capacitance matrix and ``chol_g`` its lower Cholesky factor.
    """

    u: np.ndarray
    b: np.ndarray
    q: np.ndarray
    g: np.ndarray
    chol_g: np.ndarray
    rank: int
    eta: float
    m: int

    @property
    def log_det_g(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diagonal(self.chol_g).real))) \
            if self.rank else 0.0


@dataclass
class LikelihoodSensitivities:
    """Partial derivatives of one log-likelihood value.

    Feature arrays have one entry per map feature; ``d_calibration`` follows
    the :meth:`rfslam.signal.Calibration.pack` layout and is ``None`` unless
    requested.
    """

    d_gamma_lo: float
    d_eta: float
    d_feature_gamma: np.ndarray
    d_feature_delay: np.ndarray
    d_feature_azimuth: np.ndarray
    d_calibration: np.ndarray | None = None


@dataclass
class BatchResult:
    """Pairwise log-likelihood values for a particle batch.

    ``values[i] = (log-likelihood with r=0, with r=1)``.  Elements that hit a
    numerical degeneracy are NaN and reported in ``errors`` as
    ``(index, message)`` without aborting the remaining batch.
    """

    values: np.ndarray
    errors: list


@dataclass
class PairSensitivities:
    """Values and parameter sensitivities of both visibility hypotheses.

    All arrays are batched over particles.  ``d_*`` entries are per-feature
    partials of the log-likelihood under the r=0 / r=1 covariance.
    """

    ll0: np.ndarray
    ll1: np.ndarray
    d_gamma0: np.ndarray
    d_gamma1: np.ndarray
    d_delay0: np.ndarray
    d_delay1: np.ndarray
    d_azimuth0: np.ndarray
    d_azimuth1: np.ndarray
    d_gamma_lo1: np.ndarray
    d_eta0: np.ndarray
    d_eta1: np.ndarray
    d_chi0: np.ndarray | None = None
    d_chi1: np.ndarray | None = None


def projector_apply(h_lo: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Project ``v`` onto the orthogonal complement of ``h_lo``.

    Supports stacked ``v`` with shape (..., M).
    """
    h_lo = np.asarray(h_lo)
    norm2 = np.real(np.vdot(h_lo, h_lo))
    if norm2 == 0.0:
        raise ValueError("h_lo must be non-zero")
    coeff = np.tensordot(np.asarray(v), np.conj(h_lo), axes=([-1], [0])) / norm2
    return v - coeff[..., None] * h_lo


# ---------------------------------------------------------------------------
# Response bundles (vectorized over a particle batch).
# ---------------------------------------------------------------------------

def _combine(h_f: np.ndarray, a_u: np.ndarray) -> np.ndarray:
    "Kronecker combine factored responses: (..., M_f) x (..., M_a) -> (..., M_f*M_a)."
    joint = h_f[..., :, None] * a_u[..., None, :]
    return joint.reshape(*joint.shape[:-2], joint.shape[-2] * joint.shape[-1])


class _Bundle:
    """Direct-path and feature responses for a batch of terminal states."""

    def __init__(self, positions, orientations, features: FeatureBank, bs_position,
                 cfg: SignalConfig, geo: ArrayGeometry, cal: Calibration,
                 derivatives: bool = False, unweighted: bool = False):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        orientations = np.atleast_1d(np.asarray(orientations, dtype=np.float64))
        n = positions.shape[0]
        d = features.count
        self.n, self.d = n, d
        self.cfg, self.geo, self.cal = cfg, geo, cal

        self.tau_lo, self.u_lo = path_geometry_batch(positions, orientations, bs_position)
        self.hf_lo = frequency_response_batch(self.tau_lo, cfg, cal)
        self.au_lo = array_response_batch(self.u_lo, geo, cal, cfg)
        self.h_lo = _combine(self.hf_lo, self.au_lo)
        self.norm2 = np.sum(np.abs(self.h_lo) ** 2, axis=-1)

        if d > 0:
            self.tau, self.u = path_geometry_batch(
                positions[:, None, :], orientations[:, None],
                features.positions[None, :, :], features.biases[None, :])
            self.hf = frequency_response_batch(self.tau, cfg, cal)
            self.au = array_response_batch(self.u, geo, cal, cfg)
            self.h = _combine(self.hf, self.au)
            cross = np.einsum("nm,ndm->nd", np.conj(self.h_lo), self.h)
            self.w = self.h - (cross / self.norm2[:, None])[..., None] * self.h_lo[:, None, :]
        else:
            self.tau = np.zeros((n, 0))
            self.u = np.zeros((n, 0, 2))
            self.hf = np.zeros((n, 0, cfg.m_f), dtype=np.complex128)
            self.au = np.zeros((n, 0, cfg.m_a), dtype=np.complex128)
            self.h = np.zeros((n, 0, cfg.m_total), dtype=np.complex128)
            self.w = self.h

        if derivatives and d > 0:
            # d(h)/d(tau): the factored frequency part picks up (-1/tau - 2j pi f_m).
            dfac = -1.0 / self.tau[..., None] - 2j * np.pi * cfg.freq_grid
            dhf = self.hf * dfac
            self.dh_dtau = _combine(dhf, self.au)
            # d(h)/d(azimuth): rotate u by +90 degrees inside the array phase.
            k = 2.0 * np.pi / cfg.wavelength
            pos_el = geo.element_positions + cal.delta_a
            perp = np.stack([-self.u[..., 1], self.u[..., 0]], axis=-1)
            dau = self.au * (-1j * k) * (perp @ pos_el.T)
            self.dh_dphi = _combine(self.hf, dau)
        elif derivatives:
            self.dh_dtau = self.h
            self.dh_dphi = self.h

        if unweighted:
            cal0 = Calibration(np.ones(cfg.m_f), np.ones(cfg.m_a), cal.delta_a)
            self.hf0_lo = frequency_response_batch(self.tau_lo, cfg, cal0)
            self.au0_lo = array_response_batch(self.u_lo, geo, cal0, cfg)
            if d > 0:
                self.hf0 = frequency_response_batch(self.tau, cfg, cal0)
                self.au0 = array_response_batch(self.u, geo, cal0, cfg)
            else:
                self.hf0 = self.hf
                self.au0 = self.au

    def project(self, v: np.ndarray) -> np.ndarray:
        "Apply the per-particle direct-path projector to stacked vectors (n, ..., M)."
        coeff = np.einsum("nm,n...m->n...", np.conj(self.h_lo), v) / self.norm2.reshape(
            (-1,) + (1,) * (v.ndim - 2))
        return v - coeff[..., None] * self.h_lo.reshape(
            (self.n,) + (1,) * (v.ndim - 2) + (-1,))


# ---------------------------------------------------------------------------
# Small batched triangular helpers (rank is tiny, batch is large).
# ---------------------------------------------------------------------------

def _solve_lower(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    "Forward substitution for stacked lower-triangular systems (n,R,R) x (n,R,K)."
    r = chol.shape[-1]
    out = np.zeros_like(rhs)
    for i in range(r):
        acc = np.einsum("nj,njk->nk", chol[:, i, :i], out[:, :i, :])
        out[:, i, :] = (rhs[:, i, :] - acc) / chol[:, i, i][:, None]
    return out


def _chol_jittered(g: np.ndarray, errors: list | None = None):
    """Stacked Cholesky with an escalating relative diagonal jitter.

    Returns (chol, ok_mask).  Failures are recorded in ``errors`` when a list
    is supplied, otherwise NumericalDegeneracyError is raised.
    """
    n, r = g.shape[0], g.shape[-1]
    if r == 0:
        return np.zeros((n, 0, 0), dtype=g.dtype), np.ones(n, dtype=bool)
    ok = np.ones(n, dtype=bool)
    try:
        if np.all(np.isfinite(g)):
            return np.linalg.cholesky(g), ok
    except np.linalg.LinAlgError:
        pass
    chol = np.zeros_like(g)
    eye = np.eye(r)
    for i in range(n):
        gi = g[i]
        if not np.all(np.isfinite(gi)):
            ok[i] = False
            msg = "non-finite capacitance matrix"
            if errors is None:
                raise NumericalDegeneracyError(msg, {"index": i})
            errors.append((i, msg))
            continue
        scale = np.trace(gi).real / r
        jitter = _JITTER_START
        done = False
        while jitter <= _JITTER_LIMIT:
            try:
                chol[i] = np.linalg.cholesky(gi + jitter * scale * eye)
                done = True
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        if not done:
            try:
                chol[i] = np.linalg.cholesky(gi)
                done = True
            except np.linalg.LinAlgError:
                ok[i] = False
                msg = f"capacitance matrix not positive definite after jitter {jitter:g}"
                if errors is None:
                    raise NumericalDegeneracyError(msg, {"index": i, "g": gi})
                errors.append((i, msg))
    return chol, ok


# ---------------------------------------------------------------------------
# Factor stacking and scalar evaluations.
# ---------------------------------------------------------------------------

def stack_factors(z: np.ndarray, params: CovarianceParams, cfg: SignalConfig,
                  geo: ArrayGeometry, cal: Calibration) -> LowRankFactors:
    """Assemble U, B, q and the capacitance matrix for one evaluation.

    The direct-path column (present iff ``los_present``) comes first, then
    the projected feature columns.  Zero-variance columns are kept: they are
    exact zeros and leave the likelihood untouched, so the rank invariant
    R = D + r holds unconditionally.
    """
    z = np.asarray(z, dtype=np.complex128)
    bundle = _Bundle(params.position[None, :], np.array([params.orientation]),
                     params.features, params.bs_position, cfg, geo, cal)
    cols = []
    if params.los_present:
        cols.append(np.sqrt(params.gamma_lo) * bundle.h_lo[0])
    for n in range(params.features.count):
        cols.append(np.sqrt(params.features.gammas[n]) * bundle.w[0, n])
    m = cfg.m_total
    u = np.stack(cols, axis=1) if cols else np.zeros((m, 0), dtype=np.complex128)
    eta = params.eta
    b = u / np.sqrt(eta)
    q = z / np.sqrt(eta)
    rank = u.shape[1]
    g = np.eye(rank, dtype=np.complex128) + (u.conj().T @ u) / eta
    chol, _ = _chol_jittered(g[None, :, :], errors=None)
    return LowRankFactors(u=u, b=b, q=q, g=g, chol_g=chol[0], rank=rank, eta=eta, m=m)


def log_likelihood(z: np.ndarray, params: CovarianceParams, cfg: SignalConfig,
                   geo: ArrayGeometry, cal: Calibration) -> float:
    "Log-likelihood of one snapshot through the capacitance-matrix route."
    f = stack_factors(z, params, cfg, geo, cal)
    q2 = float(np.real(np.vdot(f.q, f.q)))
    if f.rank == 0:
        return -q2 - f.m * np.log(np.pi * f.eta)
    alpha = (f.b.conj().T @ f.q)[None, :, None]
    x = _solve_lower(f.chol_g[None, :, :], alpha)[0, :, 0]
    quad = float(np.sum(np.abs(x) ** 2))
    return -q2 + quad - f.log_det_g - f.m * np.log(np.pi * f.eta)


def dense_covariance(params: CovarianceParams, cfg: SignalConfig, geo: ArrayGeometry,
                     cal: Calibration) -> np.ndarray:
    """O(M^2) assembly of the full covariance matrix (test oracle).

    Built directly from the model definition: noise floor, direct-path dyad,
    and the explicitly projected feature sum.
    """
    bundle = _Bundle(params.position[None, :], np.array([params.orientation]),
                     params.features, params.bs_position, cfg, geo, cal)
    h_lo = bundle.h_lo[0]
    m = cfg.m_total
    c = params.eta * np.eye(m, dtype=np.complex128)
    if params.los_present:
        c = c + params.gamma_lo * np.outer(h_lo, np.conj(h_lo))
    if params.features.count:
        s = np.zeros((m, m), dtype=np.complex128)
        for n in range(params.features.count):
            h_n = bundle.h[0, n]
            s += params.features.gammas[n] * np.outer(h_n, np.conj(h_n))
        proj = np.eye(m, dtype=np.complex128) - np.outer(h_lo, np.conj(h_lo)) / bundle.norm2[0]
        c = c + proj @ s @ proj.conj().T
    return c


def dense_log_likelihood(z: np.ndarray, params: CovarianceParams, cfg: SignalConfig,
                         geo: ArrayGeometry, cal: Calibration) -> float:
    "O(M^3) log-likelihood through the dense covariance (test oracle)."
    c = dense_covariance(params, cfg, geo, cal)
    z = np.asarray(z, dtype=np.complex128)
    sign, logdet = np.linalg.slogdet(c)
    if sign.real <= 0:
        raise NumericalDegeneracyError("dense covariance not positive definite")
    quad = float(np.real(np.vdot(z, np.linalg.solve(c, z))))
    return -quad - logdet - c.shape[0] * np.log(np.pi)


# ---------------------------------------------------------------------------
# Pair evaluation: both visibility hypotheses from one factorization.
# ---------------------------------------------------------------------------

def _pair_core(z, positions, orientations, gammas_lo, etas, features, bs_position,
               cfg, geo, cal, errors: list | None):
    """Vectorized (ll0, ll1) over a particle batch.

    ``z`` is one shared snapshot (M,) or one snapshot per batch element
    (N, M).  The feature-only capacitance matrix is factorized once; the
    direct-path hypothesis appends a single column, extending the Cholesky
    factor by one row (a rank-one update).
    """
    bundle = _Bundle(positions, orientations, features, bs_position, cfg, geo, cal)
    n, d, m = bundle.n, bundle.d, cfg.m_total
    etas = np.broadcast_to(np.asarray(etas, dtype=np.float64), (n,))
    gammas_lo = np.broadcast_to(np.asarray(gammas_lo, dtype=np.float64), (n,))
    etas = np.maximum(etas, ETA_FLOOR)
    z = np.broadcast_to(np.asarray(z, dtype=np.complex128), (n, m))

    a_cols = np.sqrt(features.gammas)[None, :, None] * bundle.w  # (n, d, m)
    g0 = np.eye(d, dtype=np.complex128) + \
        np.einsum("ndm,nem->nde", np.conj(a_cols), a_cols) / etas[:, None, None]
    chol0, ok = _chol_jittered(g0, errors)

    z_norm2 = np.sum(np.abs(z) ** 2, axis=1)
    az = np.einsum("ndm,nm->nd", np.conj(a_cols), z)
    x0 = _solve_lower(chol0, (az / etas[:, None])[..., None])[..., 0] if d else \
        np.zeros((n, 0), dtype=np.complex128)
    quad0 = np.sum(np.abs(x0) ** 2, axis=1)
    logdet0 = 2.0 * np.sum(np.log(np.abs(np.diagonal(chol0, axis1=1, axis2=2))), axis=1) \
        if d else np.zeros(n)
    base = -z_norm2 / etas - m * np.log(np.pi * etas)
    ll0 = base + quad0 - logdet0

    # Append the scaled direct-path column last and extend the factor.
    u_l = np.sqrt(gammas_lo)[:, None] * bundle.h_lo
    c_vec = np.einsum("ndm,nm->nd", np.conj(a_cols), u_l) / etas[:, None]
    d_scal = 1.0 + np.sum(np.abs(u_l) ** 2, axis=1) / etas
    e_vec = _solve_lower(chol0, c_vec[..., None])[..., 0] if d else \
        np.zeros((n, 0), dtype=np.complex128)
    f2 = np.maximum(np.real(d_scal - np.sum(np.abs(e_vec) ** 2, axis=1)), 1e-300)
    y_l = np.einsum("nm,nm->n", np.conj(u_l), z) / etas
    x_l = (y_l - np.einsum("nd,nd->n", np.conj(e_vec), x0)) / np.sqrt(f2)
    ll1 = base + quad0 + np.abs(x_l) ** 2 - (logdet0 + np.log(f2))

    if errors is not None and not np.all(ok):
        ll0 = np.where(ok, ll0, np.nan)
        ll1 = np.where(ok, ll1, np.nan)
    return ll0, ll1, bundle, a_cols, chol0, etas, gammas_lo, u_l


def log_likelihood_pair(z: np.ndarray, params: CovarianceParams, cfg: SignalConfig,
                        geo: ArrayGeometry, cal: Calibration) -> tuple:
    "(value with r=0, value with r=1), sharing the feature factorization."
    ll0, ll1, *_ = _pair_core(
        z, params.position[None, :], np.array([params.orientation]),
        np.array([params.gamma_lo]), np.array([params.eta]),
        params.features, params.bs_position, cfg, geo, cal, errors=None)
    return float(ll0[0]), float(ll1[0])


def batch_log_likelihood(z: np.ndarray, positions: np.ndarray, orientations: np.ndarray,
                         gammas_lo: np.ndarray, etas: np.ndarray, features: FeatureBank,
                         bs_position: np.ndarray, cfg: SignalConfig, geo: ArrayGeometry,
                         cal: Calibration, threads: int | None = None) -> BatchResult:
    """Hypothesis-pair log-likelihoods for a batch of particles against one snapshot.

    Output order matches input order regardless of ``threads``; per-element
    numerical failures are NaN plus an ``(index, message)`` entry.
    """
    positions = np.atleast_2d(positions)
    n = positions.shape[0]
    if threads and threads > 1 and n >= 4 * threads:
        bounds = np.linspace(0, n, threads + 1, dtype=int)
        orientations = np.broadcast_to(np.asarray(orientations, dtype=np.float64), (n,))
        gammas_lo = np.broadcast_to(np.asarray(gammas_lo, dtype=np.float64), (n,))
        etas = np.broadcast_to(np.asarray(etas, dtype=np.float64), (n,))

        def work(lo, hi):
            errs = []
            ll0, ll1, *_ = _pair_core(z, positions[lo:hi], orientations[lo:hi],
                                      gammas_lo[lo:hi], etas[lo:hi], features,
                                      bs_position, cfg, geo, cal, errs)
            return ll0, ll1, [(lo + i, msg) for i, msg in errs]

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: work(*ab), zip(bounds[:-1], bounds[1:])))
        values = np.column_stack([np.concatenate([p[0] for p in parts]),
                                  np.concatenate([p[1] for p in parts])])
        errors = [e for p in parts for e in p[2]]
        return BatchResult(values=values, errors=errors)

    errors: list = []
    ll0, ll1, *_ = _pair_core(z, positions, orientations, gammas_lo, etas, features,
                              bs_position, cfg, geo, cal, errors)
    return BatchResult(values=np.column_stack([ll0, ll1]), errors=errors)


# ---------------------------------------------------------------------------
# Analytic sensitivities.  For a real parameter p of the covariance,
#   d l / d p = s^H (dC/dp) s - tr(C^{-1} dC/dp),   s = C^{-1} z,
# and every dC/dp here has rank <= 2, so everything reduces to a handful of
# C^{-1}-applications through the existing factorization.
# ---------------------------------------------------------------------------

def _apply_cinv(x, u, chol, eta):
    "C^{-1} x for stacked x (n, k, m) given U (n, r, m) columns and chol(G)."
    r = u.shape[1]
    if r == 0:
        return x / eta[:, None, None]
    ux = np.einsum("nrm,nkm->nrk", np.conj(u), x)
    y = _solve_lower(chol, ux)
    # Finish the Hermitian solve G^{-1} = L^{-H} L^{-1} via back substitution.
    yy = _solve_upper_conj(chol, y)
    return x / eta[:, None, None] - np.einsum("nrm,nrk->nkm", u, yy) / (eta ** 2)[:, None, None]


def _solve_upper_conj(chol, rhs):
    "Backward substitution with L^H for stacked systems."
    r = chol.shape[-1]
    out = np.zeros_like(rhs)
    for i in range(r - 1, -1, -1):
        acc = np.einsum("nj,njk->nk", np.conj(chol[:, i + 1:, i]), out[:, i + 1:, :])
        out[:, i, :] = (rhs[:, i, :] - acc) / chol[:, i, i][:, None]
    return out


def _tr_g_inv(chol):
    "trace(G^{-1}) for stacked Cholesky factors."
    n, r = chol.shape[0], chol.shape[-1]
    if r == 0:
        return np.zeros(n)
    eye = np.broadcast_to(np.eye(r, dtype=chol.dtype), chol.shape).copy()
    l_inv = _solve_lower(chol, eye)
    return np.sum(np.abs(l_inv) ** 2, axis=(1, 2))


def _sens_one_hypothesis(z, bundle, a_cols, u_l, with_los, etas, gammas_lo, features,
                         cfg, with_calibration):
    """Per-feature / eta / gamma_lo (and optional calibration) partials.

    ``with_los`` selects the covariance hypothesis (r = 1 appends the scaled
    direct-path column).
    """
    n, d, m = bundle.n, bundle.d, cfg.m_total
    if with_los:
        u = np.concatenate([a_cols, u_l[:, None, :]], axis=1)
    else:
        u = a_cols
    r = u.shape[1]
    g = np.eye(r, dtype=np.complex128) + \
        np.einsum("nrm,nsm->nrs", np.conj(u), u) / etas[:, None, None]
    chol, _ = _chol_jittered(g, errors=None)

    w = bundle.w
    wd_tau = bundle.project(bundle.dh_dtau)
    wd_phi = bundle.project(bundle.dh_dphi)

    # One stacked solve: [z | w | P dh_tau | P dh_phi | h_lo (| P S h_lo)].
    z = np.broadcast_to(z, (n, m))
    rhs = [z[:, None, :], w, wd_tau, wd_phi, bundle.h_lo[:, None, :]]
    if with_calibration:
        gam = features.gammas
        sh = np.einsum("ndm,nd->nm", bundle.h,
                       gam[None, :] * np.einsum("ndm,nm->nd", np.conj(bundle.h), bundle.h_lo))
        psh = bundle.project(sh[:, None, :])[:, 0, :]
        rhs.append(psh[:, None, :])
    rhs = np.concatenate(rhs, axis=1)
    cinv = _apply_cinv(rhs, u, chol, etas)
    s = cinv[:, 0, :]
    cinv_w = cinv[:, 1:1 + d, :]
    cinv_dtau = cinv[:, 1 + d:1 + 2 * d, :]
    cinv_dphi = cinv[:, 1 + 2 * d:1 + 3 * d, :]
    cinv_hlo = cinv[:, 1 + 3 * d, :]

    gam = features.gammas[None, :]
    sw = np.einsum("ndm,nm->nd", np.conj(w), s)          # w_n^H s
    d_gamma = np.abs(sw) ** 2 - np.real(np.einsum("ndm,ndm->nd", np.conj(w), cinv_w))

    s_dtau = np.einsum("nm,ndm->nd", np.conj(s), wd_tau)  # s^H (P dh_tau)
    d_delay = 2.0 * gam * np.real(s_dtau * sw -
                                  np.einsum("ndm,ndm->nd", np.conj(w), cinv_dtau))
    s_dphi = np.einsum("nm,ndm->nd", np.conj(s), wd_phi)
    d_azimuth = 2.0 * gam * np.real(s_dphi * sw -
                                    np.einsum("ndm,ndm->nd", np.conj(w), cinv_dphi))

    hs = np.einsum("nm,nm->n", np.conj(bundle.h_lo), s)
    d_gamma_lo = (np.abs(hs) ** 2 -
                  np.real(np.einsum("nm,nm->n", np.conj(bundle.h_lo), cinv_hlo))) \
        if with_los else np.zeros(n)

    tr_cinv = m / etas - (r - _tr_g_inv(chol)) / etas
    d_eta = np.sum(np.abs(s) ** 2, axis=1) - tr_cinv

    d_chi = None
    if with_calibration:
        d_chi = _chi_gradient(z, bundle, s, cinv_w, cinv_hlo, cinv[:, -1, :],
                              etas, gammas_lo if with_los else np.zeros(n),
                              features, cfg)
    return d_gamma, d_delay, d_azimuth, d_gamma_lo, d_eta, d_chi


def _chi_gradient(z, bundle, s, cinv_w, cinv_hlo, cinv_psh, etas, gamma_lo_eff,
                  features, cfg):
    """Calibration gradient via conjugate response-vector gradients.

    For each path response vector h the likelihood satisfies
    d l = 2 Re[g^H dh]; the feature gradients flow through the projected
    columns and the direct-path gradient additionally carries the projector's
    dependence on h_lo.
    """
    n, d, m = bundle.n, bundle.d, cfg.m_total
    gam = features.gammas[None, :, None]
    # Feature path gradients: g_n = gamma_n P D w_n, D = s s^H - C^{-1}.
    sw = np.einsum("nm,ndm->nd", np.conj(s), bundle.w)  # s^H w_n
    d_w = s[:, None, :] * sw[..., None] - cinv_w
    g_feat = gam * bundle.project(d_w)

    # Direct-path gradient, including the projector chain.
    h = bundle.h_lo
    n2 = bundle.norm2
    sh_lo = np.einsum("nm,nm->n", np.conj(s), h)  # s^H h_lo
    d_h = s * sh_lo[:, None] - cinv_hlo
    pdh = bundle.project(d_h[:, None, :])[:, 0, :]
    cross_h = np.einsum("ndm,nm->nd", np.conj(bundle.h), pdh)
    spdh = np.einsum("ndm,nd->nm", bundle.h, features.gammas[None, :] * cross_h)
    sh = np.einsum("ndm,nd->nm", bundle.h,
                   features.gammas[None, :] * np.einsum("ndm,nm->nd", np.conj(bundle.h), h))
    psh = bundle.project(sh[:, None, :])[:, 0, :]
    s_psh = np.einsum("nm,nm->n", np.conj(s), psh)
    d_psh = s * s_psh[:, None] - cinv_psh
    t_h = spdh + d_psh
    hth = 2.0 * np.real(np.einsum("nm,nm->n", np.conj(sh), pdh))
    g_lo = gamma_lo_eff[:, None] * d_h - t_h / n2[:, None] + \
        (hth / n2 ** 2)[:, None] * h

    # Stack paths (direct path first), reshape to the (M_f, M_a) grid, and
    # contract against the structured response partials.
    g_paths = np.concatenate([g_lo[:, None, :], g_feat], axis=1)
    p_tot = d + 1
    g3 = g_paths.reshape(n, p_tot, cfg.m_f, cfg.m_a)
    hf = np.concatenate([bundle.hf_lo[:, None, :], bundle.hf], axis=1)
    au = np.concatenate([bundle.au_lo[:, None, :], bundle.au], axis=1)
    hf0 = np.concatenate([bundle.hf0_lo[:, None, :], bundle.hf0], axis=1)
    au0 = np.concatenate([bundle.au0_lo[:, None, :], bundle.au0], axis=1)
    u_paths = np.concatenate([bundle.u_lo[:, None, :], bundle.u], axis=1)

    inner_f = np.einsum("npfa,npa->npf", np.conj(g3), au)
    zeta_f = np.einsum("npf,npf->nf", hf0, inner_f)
    inner_u = np.einsum("npfa,npf->npa", np.conj(g3), hf)
    zeta_u = np.einsum("npa,npa->na", au0, inner_u)
    k_wave = 2.0 * np.pi / cfg.wavelength
    zeta_da = np.einsum("npc,npa->nac", u_paths, (-1j * k_wave) * au * inner_u)

    return np.concatenate([
        2.0 * np.real(zeta_f), -2.0 * np.imag(zeta_f),
        2.0 * np.real(zeta_u), -2.0 * np.imag(zeta_u),
        2.0 * np.real(zeta_da).reshape(n, -1),
    ], axis=1)


def batch_pair_sensitivities(z: np.ndarray, positions: np.ndarray,
                             orientations: np.ndarray, gammas_lo: np.ndarray,
                             etas: np.ndarray, features: FeatureBank,
                             bs_position: np.ndarray, cfg: SignalConfig,
                             geo: ArrayGeometry, cal: Calibration,
                             with_calibration: bool = False) -> PairSensitivities:
    "Values and analytic partials of both hypotheses for a particle batch."
    positions = np.atleast_2d(positions)
    n = positions.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=np.complex128), (n, cfg.m_total))
    orientations = np.broadcast_to(np.asarray(orientations, dtype=np.float64), (n,))
    gammas_lo = np.broadcast_to(np.asarray(gammas_lo, dtype=np.float64), (n,))
    etas = np.maximum(np.broadcast_to(np.asarray(etas, dtype=np.float64), (n,)), ETA_FLOOR)

    bundle = _Bundle(positions, orientations, features, bs_position, cfg, geo, cal,
                     derivatives=True, unweighted=with_calibration)
    a_cols = np.sqrt(features.gammas)[None, :, None] * bundle.w
    u_l = np.sqrt(gammas_lo)[:, None] * bundle.h_lo

    ll0, ll1, *_ = _pair_core(z, positions, orientations, gammas_lo, etas, features,
                              bs_position, cfg, geo, cal, errors=None)
    g0, d_t0, d_a0, _, d_eta0, chi0 = _sens_one_hypothesis(
        z, bundle, a_cols, u_l, False, etas, gammas_lo, features, cfg, with_calibration)
    g1, d_t1, d_a1, d_gl1, d_eta1, chi1 = _sens_one_hypothesis(
        z, bundle, a_cols, u_l, True, etas, gammas_lo, features, cfg, with_calibration)
    return PairSensitivities(
        ll0=ll0, ll1=ll1,
        d_gamma0=g0, d_gamma1=g1,
        d_delay0=d_t0, d_delay1=d_t1,
        d_azimuth0=d_a0, d_azimuth1=d_a1,
        d_gamma_lo1=d_gl1, d_eta0=d_eta0, d_eta1=d_eta1,
        d_chi0=chi0, d_chi1=chi1)


def likelihood_sensitivities(z: np.ndarray, params: CovarianceParams, cfg: SignalConfig,
                             geo: ArrayGeometry, cal: Calibration,
                             with_calibration: bool = False) -> LikelihoodSensitivities:
    "Partials of the log-likelihood at ``params`` (hypothesis taken from ``los_present``)."
    sens = batch_pair_sensitivities(
        z, params.position[None, :], np.array([params.orientation]),
        np.array([params.gamma_lo]), np.array([params.eta]), params.features,
        params.bs_position, cfg, geo, cal, with_calibration)
    if params.los_present:
        return LikelihoodSensitivities(
            d_gamma_lo=float(sens.d_gamma_lo1[0]), d_eta=float(sens.d_eta1[0]),
            d_feature_gamma=sens.d_gamma1[0], d_feature_delay=sens.d_delay1[0],
            d_feature_azimuth=sens.d_azimuth1[0],
            d_calibration=None if sens.d_chi1 is None else sens.d_chi1[0])
    return LikelihoodSensitivities(
        d_gamma_lo=0.0, d_eta=float(sens.d_eta0[0]),
        d_feature_gamma=sens.d_gamma0[0], d_feature_delay=sens.d_delay0[0],
        d_feature_azimuth=sens.d_azimuth0[0],
        d_calibration=None if sens.d_chi0 is None else sens.d_chi0[0])
