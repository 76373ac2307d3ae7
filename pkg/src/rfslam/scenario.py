"""Synthetic 2-D scenarios: trajectories, reflector anchors, and raw snapshots.

The generative model per station and time step is

    z = r * rho_lo * h(tau_lo, u_lo) + sum_n rho_n * h(tau_n, u_n) + noise

with all amplitudes zero-mean circular Gaussian (Swerling-1: only the average
power is meaningful) and independent across steps, paths, and stations.
Reflections are single-bounce: each wall contributes one virtual anchor (the
station mirrored across the wall line), and the reflected path keeps playing
while the direct path is blocked — that is exactly the regime a learned
multipath map can exploit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import (
    SPEED_OF_LIGHT,
    ArrayGeometry,
    Calibration,
    SignalConfig,
    joint_response_batch,
    path_geometry_batch,
)
from .states import STATE_DIM


@dataclass(frozen=True)
class TrajectorySpec:
    """Piecewise-linear constant-speed path sampled every ``dt`` seconds.

    The terminal starts at the first waypoint and stops moving if it reaches
    the last one before step ``steps``.
    """

    waypoints: np.ndarray
    speed: float
    dt: float
    steps: int

    def __post_init__(self):
        wp = np.atleast_2d(np.asarray(self.waypoints, dtype=np.float64))
        if wp.shape[0] < 2 or wp.shape[1] != 2:
            raise ValueError("need at least two 2-D waypoints")
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(seg == 0):
            raise ValueError("consecutive waypoints must be distinct")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.dt <= 0 or self.steps < 1:
            raise ValueError("dt must be positive and steps >= 1")
        object.__setattr__(self, "waypoints", wp)


@dataclass(frozen=True)
class Scenario:
    """Full ground-truth description of one experiment."""

    bs_positions: np.ndarray
    trajectory: TrajectorySpec
    walls: list = field(default_factory=list)
    blockage: list = field(default_factory=list)  # per-BS list of (start, end) steps
    los_gamma: np.ndarray | float = 1.0
    mpc_gamma_scale: float = 0.25
    noise_eta: np.ndarray | float = 1.0
    imu_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        bs = np.atleast_2d(np.asarray(self.bs_positions, dtype=np.float64))
        if bs.shape[1] != 2 or bs.shape[0] < 1:
            raise ValueError("bs_positions must be (J, 2) with J >= 1")
        object.__setattr__(self, "bs_positions", bs)
        j = bs.shape[0]
        walls = [np.asarray(w, dtype=np.float64).reshape(2, 2) for w in self.walls]
        object.__setattr__(self, "walls", walls)
        gam = np.broadcast_to(np.asarray(self.los_gamma, dtype=np.float64), (j,)).copy()
        eta = np.broadcast_to(np.asarray(self.noise_eta, dtype=np.float64), (j,)).copy()
        if np.any(gam <= 0) or np.any(eta <= 0):
            raise ValueError("los_gamma and noise_eta must be positive")
        object.__setattr__(self, "los_gamma", gam)
        object.__setattr__(self, "noise_eta", eta)
        blockage = self.blockage if self.blockage else [[] for _ in range(j)]
        if len(blockage) != j:
            raise ValueError(f"blockage must list intervals for all {j} stations")
        k = self.trajectory.steps
        for intervals in blockage:
            for start, end in intervals:
                if not (1 <= start <= end <= k):
                    raise ValueError(f"blockage interval ({start}, {end}) outside [1, {k}]")
        object.__setattr__(self, "blockage", [list(map(tuple, iv)) for iv in blockage])

    @property
    def n_stations(self) -> int:
        return self.bs_positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.trajectory.steps


@dataclass
class ScenarioTruth:
    """Latent ground truth produced alongside the measurements."""

    mt_states: np.ndarray      # (K+1, 5), row k is the state at step k
    imu_orientation: np.ndarray  # (K+1,), noisy heading measurement per step
    los_flags: np.ndarray      # (K, J), row k-1 holds r_k
    anchors: list              # per BS: (positions (D,2), gammas (D,))


@dataclass
class MeasurementFrame:
    """One time step of per-station snapshots, each of length m_f * m_a."""

    k: int
    z: np.ndarray  # (J, M) complex


def mirror_anchor(wall: np.ndarray, p_bs: np.ndarray) -> np.ndarray:
    "Reflect a station position across the infinite line through a wall segment."
    wall = np.asarray(wall, dtype=np.float64).reshape(2, 2)
    p_bs = np.asarray(p_bs, dtype=np.float64)
    direction = wall[1] - wall[0]
    length = np.linalg.norm(direction)
    if length == 0:
        raise ValueError("wall segment has zero length")
    t = direction / length
    rel = p_bs - wall[0]
    perp = rel - (rel @ t) * t
    return p_bs - 2 * perp


def complex_normal(rng: np.random.Generator, variance, size=None) -> np.ndarray:
    "Zero-mean circular complex Gaussian draws with the given variance."
    scale = np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def synth_trajectory(spec: TrajectorySpec, imu_sigma: float,
                     rng: np.random.Generator):
    """States (K+1, 5) along the waypoint polyline plus noisy heading readings.

    Orientation is the segment heading; velocity is speed times the heading
    unit vector, zero once the path has been fully traversed.
    """
    wp = spec.waypoints
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    headings = seg / seg_len[:, None]

    states = np.zeros((spec.steps + 1, STATE_DIM))
    for k in range(spec.steps + 1):
        s = min(k * spec.dt * spec.speed, cum[-1])
        i = min(np.searchsorted(cum, s, side="right") - 1, len(seg_len) - 1)
        frac = (s - cum[i]) / seg_len[i]
        pos = wp[i] + frac * seg[i]
        moving = s < cum[-1]
        states[k, 0:2] = pos
        states[k, 2:4] = spec.speed * headings[i] if moving else 0.0
        states[k, 4] = np.arctan2(headings[i, 1], headings[i, 0])
    imu = states[:, 4] + imu_sigma * rng.standard_normal(spec.steps + 1)
    return states, imu


def build_anchors(scenario: Scenario) -> list:
    """Per-station virtual anchors: one image source per wall.

    Anchor power follows the documented convention
    ``los_gamma * mpc_gamma_scale * (d_direct / d_reflected)^2`` with both
    distances measured from the trajectory centroid, so the truth is a fixed
    per-anchor constant.
    """
    wp = scenario.trajectory.waypoints
    ref_point = wp.mean(axis=0)
    anchors = []
    for j in range(scenario.n_stations):
        bs = scenario.bs_positions[j]
        positions = []
        gammas = []
        d_lo = max(np.linalg.norm(bs - ref_point), 1e-6)
        for wall in scenario.walls:
            img = mirror_anchor(wall, bs)
            d_refl = max(np.linalg.norm(img - ref_point), 1e-6)
            positions.append(img)
            gammas.append(scenario.los_gamma[j] * scenario.mpc_gamma_scale *
                          (d_lo / d_refl) ** 2)
        anchors.append((np.array(positions).reshape(-1, 2), np.array(gammas)))
    return anchors


def blockage_flags(scenario: Scenario) -> np.ndarray:
    "Visibility truth (K, J): 0 inside a scheduled blockage window, else 1."
    k, j = scenario.n_steps, scenario.n_stations
    flags = np.ones((k, j), dtype=np.int64)
    for jj, intervals in enumerate(scenario.blockage):
        for start, end in intervals:
            flags[start - 1:end, jj] = 0
    return flags


def build_truth(scenario: Scenario, rng: np.random.Generator) -> ScenarioTruth:
    states, imu = synth_trajectory(scenario.trajectory, scenario.imu_sigma, rng)
    return ScenarioTruth(mt_states=states, imu_orientation=imu,
                         los_flags=blockage_flags(scenario),
                         anchors=build_anchors(scenario))


def synth_measurements(scenario: Scenario, truth: ScenarioTruth, cfg: SignalConfig,
                       geo: ArrayGeometry, cal: Calibration,
                       rng: np.random.Generator) -> list:
    """Draw the K measurement frames of the scenario.

    Amplitudes are independent across steps, paths, and stations; reflections
    stay active during direct-path blockage.
    """
    frames = []
    m = cfg.m_total
    for k in range(1, scenario.n_steps + 1):
        state = truth.mt_states[k]
        z = np.empty((scenario.n_stations, m), dtype=np.complex128)
        for j in range(scenario.n_stations):
            zx = complex_normal(rng, scenario.noise_eta[j], size=m)
            if truth.los_flags[k - 1, j]:
                tau, u = path_geometry_batch(state[None, 0:2], state[None, 4],
                                             scenario.bs_positions[j])
                h_lo = joint_response_batch(tau, u, cfg, geo, cal)[0]
                zx += complex_normal(rng, scenario.los_gamma[j]) * h_lo
            positions, gammas = truth.anchors[j]
            if len(gammas):
                tau, u = path_geometry_batch(state[None, None, 0:2],
                                             state[None, None, 4],
                                             positions[None, :, :])
                h = joint_response_batch(tau, u, cfg, geo, cal)[0]
                rho = complex_normal(rng, gammas)
                zx += rho @ h
            z[j] = zx
        frames.append(MeasurementFrame(k=k, z=z))
    return frames


def simulate(scenario: Scenario, cfg: SignalConfig, geo: ArrayGeometry,
             cal: Calibration):
    """Generate (truth, frames) with all randomness derived from scenario.seed.

    Stream derivation: SeedSequence(seed) spawns child 0 for the trajectory's
    heading noise and child 1 for amplitudes and receiver noise.
    """
    ss = np.random.SeedSequence(scenario.seed)
    child_traj, child_meas = ss.spawn(2)
    truth = build_truth(scenario, np.random.default_rng(child_traj))
    frames = synth_measurements(scenario, truth, cfg, geo, cal,
                                np.random.default_rng(child_meas))
    return truth, frames


def reflected_path_length(wall: np.ndarray, p_bs: np.ndarray, p_mt: np.ndarray) -> float:
    """Ray-traced single-bounce path length station -> wall line -> terminal.

    Oracle used by tests: must equal the distance from the mirrored station
    to the terminal.
    """
    img = mirror_anchor(wall, p_bs)
    wall = np.asarray(wall, dtype=np.float64).reshape(2, 2)
    # Intersection of the segment img -> p_mt with the wall line.
    d = np.asarray(p_mt, dtype=np.float64) - img
    w_dir = wall[1] - wall[0]
    normal = np.array([-w_dir[1], w_dir[0]])
    denom = d @ normal
    if abs(denom) < 1e-15:
        raise ValueError("degenerate reflection geometry")
    t = ((wall[0] - img) @ normal) / denom
    bounce = img + t * d
    return float(np.linalg.norm(bounce - np.asarray(p_bs)) +
                 np.linalg.norm(np.asarray(p_mt) - bounce))
