"""Binary containers and CSV emitters.

Four little-endian containers, each opening with a 4-byte magic and a u32
version:

``RFSL``  measurements: header {J, K, M_f, M_a}, then K*J complex snapshots
          (step-major, station-minor) as interleaved f64 (re, im).
``RFST``  scenario truth: terminal states, heading measurements, visibility
          flags, and per-station virtual anchors.
``RFSS``  belief snapshots kept for the learning step.
``RFNN``  neural-map checkpoint: architecture, flat parameters, optional
          optimizer state, optional calibration section.

Every reader validates magic and version and returns numpy arrays that
round-trip bit-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from .states import STATE_DIM

MEAS_MAGIC = b"RFSL"
TRUTH_MAGIC = b"RFST"
SNAP_MAGIC = b"RFSS"
CKPT_MAGIC = b"RFNN"
VERSION = 1


class ContainerError(IOError):
    "Malformed or mismatched binary container."


def _write_array(f, arr, dtype):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(f, count, dtype):
    dtype = np.dtype(dtype)
    buf = f.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise ContainerError("truncated container")
    return np.frombuffer(buf, dtype=dtype).copy()


def _read_complex(f, count):
    flat = _read_array(f, 2 * count, "<f8")
    return flat[0::2] + 1j * flat[1::2]


def _write_complex(f, arr):
    arr = np.ascontiguousarray(arr, dtype=np.complex128).ravel()
    inter = np.empty(2 * arr.size, dtype="<f8")
    inter[0::2] = arr.real
    inter[1::2] = arr.imag
    f.write(inter.tobytes())


def _check_magic(f, magic):
    got = f.read(4)
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")


# -- measurements -----------------------------------------------------------

def write_measurements(path, frames, m_f: int, m_a: int):
    "Write measurement frames (list of MeasurementFrame, step-major)."
    n_steps = len(frames)
    n_stations = frames[0].z.shape[0] if n_steps else 0
    with open(path, "wb") as f:
        f.write(MEAS_MAGIC)
        f.write(struct.pack("<IIIII", VERSION, n_stations, n_steps, m_f, m_a))
        for frame in frames:
            if frame.z.shape != (n_stations, m_f * m_a):
                raise ContainerError(f"frame {frame.k} has shape {frame.z.shape}")
            for j in range(n_stations):
                _write_complex(f, frame.z[j])


def read_measurements(path):
    "Return (frames, m_f, m_a); frames are MeasurementFrame with k = 1..K."
    from .scenario import MeasurementFrame

    with open(path, "rb") as f:
        _check_magic(f, MEAS_MAGIC)
        n_stations, n_steps, m_f, m_a = struct.unpack("<IIII", f.read(16))
        m = m_f * m_a
        frames = []
        for k in range(1, n_steps + 1):
            z = np.empty((n_stations, m), dtype=np.complex128)
            for j in range(n_stations):
                z[j] = _read_complex(f, m)
            frames.append(MeasurementFrame(k=k, z=z))
    return frames, m_f, m_a


# -- truth ------------------------------------------------------------------

def write_truth(path, truth):
    k_plus_1, state_dim = truth.mt_states.shape
    n_steps = k_plus_1 - 1
    n_stations = truth.los_flags.shape[1]
    with open(path, "wb") as f:
        f.write(TRUTH_MAGIC)
        f.write(struct.pack("<IIII", VERSION, n_steps, n_stations, state_dim))
        _write_array(f, truth.mt_states, "<f8")
        _write_array(f, truth.imu_orientation, "<f8")
        _write_array(f, truth.los_flags, "<u1")
        for positions, gammas in truth.anchors:
            f.write(struct.pack("<I", len(gammas)))
            _write_array(f, positions, "<f8")
            _write_array(f, gammas, "<f8")


def read_truth(path):
    from .scenario import ScenarioTruth

    with open(path, "rb") as f:
        _check_magic(f, TRUTH_MAGIC)
        n_steps, n_stations, state_dim = struct.unpack("<III", f.read(12))
        if state_dim != STATE_DIM:
            raise ContainerError(f"unexpected state dimension {state_dim}")
        states = _read_array(f, (n_steps + 1) * state_dim, "<f8").reshape(-1, state_dim)
        imu = _read_array(f, n_steps + 1, "<f8")
        flags = _read_array(f, n_steps * n_stations, "<u1").reshape(n_steps, n_stations)
        anchors = []
        for _ in range(n_stations):
            (count,) = struct.unpack("<I", f.read(4))
            positions = _read_array(f, 2 * count, "<f8").reshape(count, 2)
            gammas = _read_array(f, count, "<f8")
            anchors.append((positions, gammas))
    return ScenarioTruth(mt_states=states, imu_orientation=imu,
                         los_flags=flags.astype(np.int64), anchors=anchors)


# -- belief snapshots --------------------------------------------------------

def write_snapshots(path, snapshots):
    if not snapshots:
        raise ContainerError("no snapshots to write")
    n_subset = snapshots[0].mt.shape[0]
    n_stations = snapshots[0].gamma.shape[0]
    with open(path, "wb") as f:
        f.write(SNAP_MAGIC)
        f.write(struct.pack("<IIIII", VERSION, len(snapshots), n_stations,
                            n_subset, STATE_DIM))
        for snap in snapshots:
            f.write(struct.pack("<I", snap.k))
            _write_array(f, snap.mt, "<f8")
            _write_array(f, snap.gamma, "<f8")
            _write_array(f, snap.eta, "<f8")
            _write_array(f, snap.p_vis, "<f8")
            _write_array(f, snap.mt_mmse, "<f8")
            _write_array(f, snap.gamma_mmse, "<f8")
            _write_array(f, snap.eta_mmse, "<f8")


def read_snapshots(path):
    from .filtering import BeliefSnapshot

    with open(path, "rb") as f:
        _check_magic(f, SNAP_MAGIC)
        n_snaps, n_stations, n_subset, state_dim = struct.unpack("<IIII", f.read(16))
        if state_dim != STATE_DIM:
            raise ContainerError(f"unexpected state dimension {state_dim}")
        out = []
        for _ in range(n_snaps):
            (k,) = struct.unpack("<I", f.read(4))
            mt = _read_array(f, n_subset * state_dim, "<f8").reshape(n_subset, state_dim)
            gamma = _read_array(f, n_stations * n_subset, "<f8").reshape(n_stations, -1)
            eta = _read_array(f, n_stations * n_subset, "<f8").reshape(n_stations, -1)
            p_vis = _read_array(f, n_stations, "<f8")
            mt_mmse = _read_array(f, state_dim, "<f8")
            gamma_mmse = _read_array(f, n_stations, "<f8")
            eta_mmse = _read_array(f, n_stations, "<f8")
            out.append(BeliefSnapshot(k=k, mt=mt, gamma=gamma, eta=eta, p_vis=p_vis,
                                      mt_mmse=mt_mmse, gamma_mmse=gamma_mmse,
                                      eta_mmse=eta_mmse))
    return out


# -- neural-map checkpoints ---------------------------------------------------

def write_checkpoint(path, arch, theta, adam_state=None, calibration=None):
    from .signal import Calibration

    theta = np.asarray(theta, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<IIIII", arch.n_features, arch.n_enc, arch.hidden1,
                            arch.hidden2, 2))
        f.write(struct.pack("<dddd", arch.scene_extent, arch.pos_scale,
                            arch.bias_scale, arch.gamma_scale))
        f.write(struct.pack("<Q", theta.size))
        _write_array(f, theta, "<f8")
        flags = (1 if adam_state is not None else 0) | \
            (2 if calibration is not None else 0)
        f.write(struct.pack("<B", flags))
        if adam_state is not None:
            f.write(struct.pack("<Qdddd", adam_state.step, adam_state.lr,
                                adam_state.beta1, adam_state.beta2, adam_state.eps))
            _write_array(f, adam_state.m, "<f8")
            _write_array(f, adam_state.v, "<f8")
        if calibration is not None:
            assert isinstance(calibration, Calibration)
            m_f = calibration.w_f.shape[0]
            m_a = calibration.w_u.shape[0]
            f.write(struct.pack("<II", m_f, m_a))
            _write_complex(f, calibration.w_f)
            _write_complex(f, calibration.w_u)
            _write_array(f, calibration.delta_a, "<f8")


def read_checkpoint(path):
    """Return (arch, theta, adam_state or None, calibration or None)."""
    from .neuralmap import AdamState, MapArchitecture
    from .signal import Calibration

    with open(path, "rb") as f:
        _check_magic(f, CKPT_MAGIC)
        d, n_enc, h1, h2, dim = struct.unpack("<IIIII", f.read(20))
        if dim != 2:
            raise ContainerError(f"unexpected geometry dimension {dim}")
        extent, pos_scale, bias_scale, gamma_scale = struct.unpack("<dddd", f.read(32))
        arch = MapArchitecture(n_features=d, n_enc=n_enc, hidden1=h1, hidden2=h2,
                               scene_extent=extent, pos_scale=pos_scale,
                               bias_scale=bias_scale, gamma_scale=gamma_scale)
        (n_theta,) = struct.unpack("<Q", f.read(8))
        if n_theta != arch.n_params:
            raise ContainerError(
                f"parameter count {n_theta} does not match architecture "
                f"({arch.n_params})")
        theta = _read_array(f, n_theta, "<f8")
        (flags,) = struct.unpack("<B", f.read(1))
        adam_state = None
        calibration = None
        if flags & 1:
            step, lr, b1, b2, eps = struct.unpack("<Qdddd", f.read(40))
            m = _read_array(f, n_theta, "<f8")
            v = _read_array(f, n_theta, "<f8")
            adam_state = AdamState(step=step, lr=lr, beta1=b1, beta2=b2, eps=eps,
                                   m=m, v=v)
        if flags & 2:
            m_f, m_a = struct.unpack("<II", f.read(8))
            w_f = _read_complex(f, m_f)
            w_u = _read_complex(f, m_a)
            delta_a = _read_array(f, 2 * m_a, "<f8").reshape(m_a, 2)
            calibration = Calibration(w_f, w_u, delta_a)
    return arch, theta, adam_state, calibration


# -- CSV emitters -------------------------------------------------------------

def write_track_csv(path, estimates, n_stations):
    """Estimate trajectory: one row per step including the prior (k = 0).

    Columns: k, x, y, vx, vy, o, then per-station p, gamma, eta.
    """
    cols = ["k", "x", "y", "vx", "vy", "o"]
    for j in range(n_stations):
        cols += [f"p_{j}", f"gamma_{j}", f"eta_{j}"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for est in estimates:
            row = [str(est.k)] + [repr(float(v)) for v in est.mt]
            for j in range(n_stations):
                row += [repr(float(est.p_vis[j])), repr(float(est.gamma[j])),
                        repr(float(est.eta[j]))]
            f.write(",".join(row) + "\n")


def read_track_csv(path):
    "Return (ks, states (N,5), p (N,J), gamma (N,J), eta (N,J))."
    with open(path) as f:
        header = f.readline().strip().split(",")
        n_stations = sum(1 for c in header if c.startswith("p_"))
        rows = [line.strip().split(",") for line in f if line.strip()]
    data = np.array([[float(v) for v in row] for row in rows])
    ks = data[:, 0].astype(int)
    states = data[:, 1:6]
    per_bs = data[:, 6:].reshape(len(rows), n_stations, 3)
    return ks, states, per_bs[:, :, 0], per_bs[:, :, 1], per_bs[:, :, 2]


def write_training_log_csv(path, entries):
    "Training log rows: iter, phase, Q_before, Q_after, grad_norm, seconds."
    with open(path, "w") as f:
        f.write("iter,phase,Q_before,Q_after,grad_norm,seconds\n")
        for e in entries:
            f.write(f"{e.iteration},{e.phase},{float(e.q_before)!r},"
                    f"{float(e.q_after)!r},{float(e.grad_norm)!r},"
                    f"{float(e.seconds)!r}\n")
