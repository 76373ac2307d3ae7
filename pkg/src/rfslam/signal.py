"""Deterministic RF response models.

Frequency, array, and joint frequency-array response vectors for a
narrowband multi-antenna receiver, plus the geometry mapping from 2-D
positions to path delays and arrival directions in the terminal's local
frame.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
"Propagation speed c in m/s."

DELAY_FLOOR = 1e-9
"Smallest delay (s) used when evaluating responses; caps the 1/tau path loss."

GEOMETRY_DIM = 2
"All geometry in this package is planar."


@dataclass(frozen=True)
class SignalConfig:
    """Sampling grid of one measurement snapshot.

    The receiver records ``m_f`` equally spaced frequency samples spanning
    ``bandwidth`` Hz around the carrier ``f_c``, at each of ``m_a`` antenna
    elements, for a total snapshot length of ``m_f * m_a`` complex values.
    """

    f_c: float
    bandwidth: float
    delta_f: float
    m_a: int
    baseband_spectrum: np.ndarray | None = None

    def __post_init__(self):
        if self.f_c <= 0 or self.bandwidth <= 0 or self.delta_f <= 0:
            raise ValueError("f_c, bandwidth and delta_f must be positive")
        if self.m_a < 1:
            raise ValueError(f"m_a must be >= 1, got {self.m_a}")
        if self.m_f < 2:
            raise ValueError(f"m_f = bandwidth/delta_f + 1 must be >= 2, got {self.m_f}")
        if self.baseband_spectrum is not None:
            s = np.asarray(self.baseband_spectrum, dtype=np.complex128)
            if s.shape != (self.m_f,):
                raise ValueError(f"baseband_spectrum must have shape ({self.m_f},), got {s.shape}")
            if not np.allclose(np.abs(s), 1.0, atol=1e-9):
                raise ValueError("baseband_spectrum samples must have unit magnitude")
            object.__setattr__(self, "baseband_spectrum", s)

    @property
    def m_f(self) -> int:
        return int(round(self.bandwidth / self.delta_f)) + 1

    @property
    def m_total(self) -> int:
        return self.m_f * self.m_a

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def d_max(self) -> float:
        "Unambiguous observation distance c/delta_f (m)."
        return SPEED_OF_LIGHT / self.delta_f

    @cached_property
    def freq_grid(self) -> np.ndarray:
        "Baseband frequency samples f_m = (m - (m_f-1)/2) * delta_f, m = 0..m_f-1."
        m = np.arange(self.m_f, dtype=np.float64)
        return (m - (self.m_f - 1) / 2.0) * self.delta_f

    @cached_property
    def spectrum(self) -> np.ndarray:
        if self.baseband_spectrum is None:
            return np.ones(self.m_f, dtype=np.complex128)
        return self.baseband_spectrum


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna element positions in the terminal frame, centered on the origin."""

    element_positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.element_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != GEOMETRY_DIM:
            raise ValueError(f"element_positions must be (m_a, 2), got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("need at least one element")
        centroid = pos.mean(axis=0)
        if np.any(np.abs(centroid) > 1e-12):
            raise ValueError(f"element positions must be centered, centroid = {centroid}")
        object.__setattr__(self, "element_positions", pos)

    @property
    def m_a(self) -> int:
        return self.element_positions.shape[0]

    @classmethod
    def ula(cls, m_a: int, spacing: float) -> "ArrayGeometry":
        "Uniform linear array along the local x-axis, centered."
        x = (np.arange(m_a) - (m_a - 1) / 2.0) * spacing
        return cls(np.column_stack([x, np.zeros(m_a)]))


@dataclass(frozen=True)
class Calibration:
    """Complex per-sample response weights and element position perturbations.

    The uncalibrated (ideal) state is all-ones weights and zero perturbations.
    The flat real parameter vector exposed by :meth:`pack` is laid out as
    ``[Re w_f, Im w_f, Re w_u, Im w_u, delta_a.ravel()]``.
    """

    w_f: np.ndarray
    w_u: np.ndarray
    delta_a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_f", np.asarray(self.w_f, dtype=np.complex128))
        object.__setattr__(self, "w_u", np.asarray(self.w_u, dtype=np.complex128))
        object.__setattr__(self, "delta_a", np.asarray(self.delta_a, dtype=np.float64))
        if self.w_f.ndim != 1 or self.w_u.ndim != 1:
            raise ValueError("w_f and w_u must be vectors")
        if self.delta_a.shape != (self.w_u.shape[0], GEOMETRY_DIM):
            raise ValueError(
                f"delta_a must be ({self.w_u.shape[0]}, 2), got {self.delta_a.shape}")

    @classmethod
    def identity(cls, m_f: int, m_a: int) -> "Calibration":
        return cls(np.ones(m_f), np.ones(m_a), np.zeros((m_a, GEOMETRY_DIM)))

    @property
    def n_params(self) -> int:
        m_f = self.w_f.shape[0]
        m_a = self.w_u.shape[0]
        return 2 * m_f + 2 * m_a + 2 * m_a

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.w_f.real, self.w_f.imag,
            self.w_u.real, self.w_u.imag,
            self.delta_a.ravel(),
        ])

    @classmethod
    def unpack(cls, vec: np.ndarray, m_f: int, m_a: int) -> "Calibration":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * m_f + 4 * m_a,):
            raise ValueError(f"calibration vector must have length {2 * m_f + 4 * m_a}")
        i = 0
        w_f = vec[i:i + m_f] + 1j * vec[i + m_f:i + 2 * m_f]
        i += 2 * m_f
        w_u = vec[i:i + m_a] + 1j * vec[i + m_a:i + 2 * m_a]
        i += 2 * m_a
        delta_a = vec[i:].reshape(m_a, GEOMETRY_DIM)
        return cls(w_f, w_u, delta_a)


@dataclass(frozen=True)
class PathGeometry:
    """Delay and local-frame arrival direction of one propagation path."""

    delay: float
    direction: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.delay <= 0:
            raise ValueError(f"delay must be positive, got {self.delay}")
        u = np.asarray(self.direction, dtype=np.float64)
        if u.shape != (GEOMETRY_DIM,):
            raise ValueError(f"direction must be a 2-vector, got shape {u.shape}")
        if abs(np.linalg.norm(u) - 1.0) > 1e-12:
            raise ValueError(f"direction must be unit length, |u| = {np.linalg.norm(u)}")
        object.__setattr__(self, "direction", u)


def rotation(o: float) -> np.ndarray:
    "Counterclockwise 2-D rotation matrix R(o)."
    c, s = np.cos(o), np.sin(o)
    return np.array([[c, -s], [s, c]])


def frequency_response(tau: float, cfg: SignalConfig, cal: Calibration) -> np.ndarray:
    """Sampled frequency response of a path with delay ``tau`` (s).

    Entry m is ``c/(4 pi f_c tau) * w_f[m] * S(f_m) * exp(-2j pi f_m tau)``;
    the leading scalar is the free-space path loss at range ``c*tau``.
    """
    if tau <= 0:
        raise ValueError(f"delay must be positive, got {tau}")
    path_loss = SPEED_OF_LIGHT / (4.0 * np.pi * cfg.f_c * tau)
    phase = np.exp(-2j * np.pi * cfg.freq_grid * tau)
    return path_loss * cal.w_f * cfg.spectrum * phase


def array_response(u: np.ndarray, geo: ArrayGeometry, cal: Calibration,
                   cfg: SignalConfig) -> np.ndarray:
    """Array response for a unit arrival direction ``u`` in the local frame.

    Entry m is ``w_u[m] * exp(-1j * 2 pi / lambda_c * u @ (a_m + delta_a_m))``.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (GEOMETRY_DIM,) or abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("u must be a unit 2-vector")
    k = 2.0 * np.pi / cfg.wavelength
    positions = geo.element_positions + cal.delta_a
    return cal.w_u * np.exp(-1j * k * positions @ u)


def joint_response(tau: float, u: np.ndarray, cfg: SignalConfig,
                   geo: ArrayGeometry, cal: Calibration) -> np.ndarray:
    "Kronecker product of frequency and array responses; length m_f * m_a."
    return np.kron(frequency_response(tau, cfg, cal), array_response(u, geo, cal, cfg))


def los_geometry(p_mt: np.ndarray, orientation: float, p_bs: np.ndarray) -> PathGeometry:
    """Delay and local direction of the direct path from a base station.

    The global direction toward the base station is rotated by the terminal
    orientation (one shared convention: ``u = R(o) @ (p_bs - p_mt)/dist``).
    """
    p_mt = np.asarray(p_mt, dtype=np.float64)
    p_bs = np.asarray(p_bs, dtype=np.float64)
    diff = p_bs - p_mt
    dist = np.linalg.norm(diff)
    if dist == 0.0:
        raise ValueError("terminal and base station positions coincide")
    u = rotation(orientation) @ (diff / dist)
    return PathGeometry(delay=dist / SPEED_OF_LIGHT, direction=u)


def feature_geometry(p_mt: np.ndarray, orientation: float, feature_position: np.ndarray,
                     bias: float) -> PathGeometry:
    "Like :func:`los_geometry` toward a map feature, with an additive delay bias (s)."
    if bias < 0:
        raise ValueError(f"bias must be non-negative, got {bias}")
    base = los_geometry(p_mt, orientation, feature_position)
    return PathGeometry(delay=base.delay + bias, direction=base.direction)


# ---------------------------------------------------------------------------
# Vectorized evaluation used by the likelihood and simulator hot paths.  The
# batch variants floor delays at DELAY_FLOOR so degenerate geometries cannot
# blow up the 1/tau path loss.
# ---------------------------------------------------------------------------

def path_geometry_batch(p_mt: np.ndarray, orientation: np.ndarray,
                        targets: np.ndarray, bias: np.ndarray | float = 0.0):
    """Delays and local directions from positions ``p_mt`` to ``targets``.

    ``p_mt`` is (..., 2), ``orientation`` (...,), ``targets`` (..., 2); all
    leading shapes must broadcast.  Returns ``(tau, u)`` with shapes (...,)
    and (..., 2).  Delays are floored at DELAY_FLOOR.
    """
    p_mt = np.asarray(p_mt, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    o = np.asarray(orientation, dtype=np.float64)
    diff = targets - p_mt
    dist = np.linalg.norm(diff, axis=-1)
    safe = np.where(dist > 1e-12, dist, 1.0)
    g = diff / safe[..., None]
    c, s = np.cos(o), np.sin(o)
    u = np.stack([c * g[..., 0] - s * g[..., 1],
                  s * g[..., 0] + c * g[..., 1]], axis=-1)
    tau = np.maximum(dist / SPEED_OF_LIGHT + bias, DELAY_FLOOR)
    return tau, u


def frequency_response_batch(tau: np.ndarray, cfg: SignalConfig,
                             cal: Calibration) -> np.ndarray:
    "Frequency responses for delays ``tau`` (...,); returns (..., m_f)."
    tau = np.maximum(np.asarray(tau, dtype=np.float64), DELAY_FLOOR)
    path_loss = SPEED_OF_LIGHT / (4.0 * np.pi * cfg.f_c * tau)
    phase = np.exp(-2j * np.pi * tau[..., None] * cfg.freq_grid)
    return path_loss[..., None] * (cal.w_f * cfg.spectrum) * phase


def array_response_batch(u: np.ndarray, geo: ArrayGeometry, cal: Calibration,
                         cfg: SignalConfig) -> np.ndarray:
    "Array responses for unit directions ``u`` (..., 2); returns (..., m_a)."
    k = 2.0 * np.pi / cfg.wavelength
    positions = geo.element_positions + cal.delta_a
    return cal.w_u * np.exp(-1j * k * np.asarray(u) @ positions.T)


def joint_response_batch(tau: np.ndarray, u: np.ndarray, cfg: SignalConfig,
                         geo: ArrayGeometry, cal: Calibration) -> np.ndarray:
    "Joint responses for delays (...,) and directions (..., 2); returns (..., m_f*m_a)."
    h_f = frequency_response_batch(tau, cfg, cal)
    a_u = array_response_batch(u, geo, cal, cfg)
    joint = h_f[..., :, None] * a_u[..., None, :]
    return joint.reshape(*joint.shape[:-2], cfg.m_total)
