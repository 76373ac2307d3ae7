"""Timing harness comparing the capacitance-matrix likelihood to the dense route.

Both paths start from identical particle batches and produce hypothesis-pair
log-likelihoods; the dense reference assembles and factorizes the full M x M
covariance per particle.  Rows report wall-clock nanoseconds per batch plus
the worst relative value disagreement, so the benchmark doubles as an
accuracy audit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .likelihood import CovarianceParams, FeatureBank, batch_log_likelihood, \
    dense_log_likelihood
from .signal import ArrayGeometry, Calibration, SignalConfig, joint_response, los_geometry


@dataclass
class BenchRow:
    m: int
    rank: int
    batch: int
    woodbury_ns: float
    dense_ns: float
    max_rel_err: float


def _make_case(m_f, m_a, n_features, batch, rng):
    cfg = SignalConfig(f_c=6e9, bandwidth=(m_f - 1) * 2e6, delta_f=2e6, m_a=m_a)
    geo = ArrayGeometry.ula(m_a, cfg.wavelength / 2)
    cal = Calibration.identity(cfg.m_f, m_a)
    bs = np.array([0.0, 25.0])
    center = np.array([0.0, 0.0])
    g = los_geometry(center, 0.0, bs)
    h = joint_response(g.delay, g.direction, cfg, geo, cal)
    eta = np.linalg.norm(h) ** 2 / 100.0
    if n_features:
        phi = rng.uniform(0, 2 * np.pi, n_features)
        fpos = center + np.column_stack([np.cos(phi), np.sin(phi)]) * \
            rng.uniform(8, 30, (n_features, 1))
        bank = FeatureBank(fpos, rng.uniform(0, 5e-9, n_features),
                           rng.uniform(0.05, 0.3, n_features))
    else:
        bank = FeatureBank.empty()
    positions = center + rng.normal(scale=1.0, size=(batch, 2))
    orientations = rng.uniform(-0.2, 0.2, batch)
    gammas = rng.uniform(0.5, 1.5, batch)
    etas = np.full(batch, eta)
    z = np.sqrt(eta / 2) * (rng.standard_normal(cfg.m_total) +
                            1j * rng.standard_normal(cfg.m_total))
    z = z + np.sqrt(0.5) * (rng.standard_normal() + 1j * rng.standard_normal()) * h
    return cfg, geo, cal, bs, bank, positions, orientations, gammas, etas, z


def _dense_batch(z, positions, orientations, gammas, etas, bank, bs, cfg, geo, cal,
                 sample_limit=None):
    "Dense hypothesis pairs, optionally only for the first sample_limit elements."
    n = len(positions) if sample_limit is None else min(sample_limit, len(positions))
    out = np.empty((n, 2))
    for i in range(n):
        common = dict(bs_position=bs, position=positions[i],
                      orientation=orientations[i], gamma_lo=gammas[i],
                      eta=etas[i], features=bank)
        out[i, 0] = dense_log_likelihood(z, CovarianceParams(los_present=0, **common),
                                         cfg, geo, cal)
        out[i, 1] = dense_log_likelihood(z, CovarianceParams(los_present=1, **common),
                                         cfg, geo, cal)
    return out


def bench_point(m_f, m_a, n_features, batch, rng, repeats=3, dense_subsample=None):
    "One benchmark row at M = m_f * m_a, rank n_features + 1."
    cfg, geo, cal, bs, bank, positions, orientations, gammas, etas, z = \
        _make_case(m_f, m_a, n_features, batch, rng)

    fast_times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        res = batch_log_likelihood(z, positions, orientations, gammas, etas, bank,
                                   bs, cfg, geo, cal)
        fast_times.append(time.perf_counter_ns() - t0)
    sub = dense_subsample or batch
    dense_times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        dense = _dense_batch(z, positions, orientations, gammas, etas, bank, bs,
                             cfg, geo, cal, sample_limit=sub)
        dense_times.append((time.perf_counter_ns() - t0) * (batch / sub))
    rel = np.max(np.abs(res.values[:sub] - dense) / np.abs(dense))
    return BenchRow(m=cfg.m_total, rank=n_features + 1, batch=batch,
                    woodbury_ns=float(np.median(fast_times)),
                    dense_ns=float(np.median(dense_times)),
                    max_rel_err=float(rel))


def loglog_slope(ms, times) -> float:
    "Least-squares slope of log(time) against log(M)."
    x = np.log(np.asarray(ms, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def write_bench_csv(path, rows):
    with open(path, "w") as f:
        f.write("M,R,batch,woodbury_ns,dense_ns,max_rel_err\n")
        for r in rows:
            f.write(f"{r.m},{r.rank},{r.batch},{r.woodbury_ns:.0f},"
                    f"{r.dense_ns:.0f},{r.max_rel_err!r}\n")
