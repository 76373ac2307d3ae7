"""Shared independent oracles for filter tests: grid-quadrature Bayes posterior."""

import numpy as np

from rfslam.likelihood import CovarianceParams, FeatureBank
from rfslam.signal import joint_response_batch, path_geometry_batch


def dense_ll_grid(z, positions, orientation, gamma, eta, bs, cfg, geo, cal):
    """Dense log-likelihood at many candidate positions (direct path only).

    Assembles the full covariance per grid point and goes through stock
    slogdet/solve; independent of the low-rank evaluation path.
    """
    tau, u = path_geometry_batch(positions, np.full(len(positions), orientation), bs)
    h = joint_response_batch(tau, u, cfg, geo, cal)
    m = cfg.m_total
    cov = eta * np.eye(m, dtype=np.complex128)[None, :, :] + \
        gamma * h[:, :, None] * np.conj(h[:, None, :])
    sign, logdet = np.linalg.slogdet(cov)
    sol = np.linalg.solve(cov, np.broadcast_to(z, (len(positions), m))[..., None])[..., 0]
    quad = np.real(np.einsum("nm,nm->n", np.conj(z)[None, :].repeat(len(positions), 0), sol))
    return -quad - logdet - m * np.log(np.pi)


def grid_posterior_mean(z, prior_mean, prior_std, orientation, gamma, eta, bs,
                        cfg, geo, cal, half_width=4.0, n=100):
    """Bayes posterior position mean on an n x n grid around the prior mean.

    Gaussian position prior, all other latents known; midpoint quadrature.
    """
    gx = np.linspace(prior_mean[0] - half_width * prior_std,
                     prior_mean[0] + half_width * prior_std, n)
    gy = np.linspace(prior_mean[1] - half_width * prior_std,
                     prior_mean[1] + half_width * prior_std, n)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    ll = dense_ll_grid(z, pts, orientation, gamma, eta, bs, cfg, geo, cal)
    log_prior = -np.sum((pts - prior_mean) ** 2, axis=1) / (2 * prior_std ** 2)
    log_post = ll + log_prior
    log_post -= log_post.max()
    w = np.exp(log_post)
    w /= w.sum()
    return w @ pts
