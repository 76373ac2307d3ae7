"""Desk-scale laboratory for direct SLAM on raw multi-antenna RF snapshots.

Submodules
----------
signal
    Frequency/array response vectors and path geometry.
scenario
    Ground-truth trajectories, virtual anchors, and synthetic measurements.
likelihood
    Identity-plus-low-rank Gaussian log-likelihoods and their sensitivities.
states
    Samplers for the latent state transitions and priors.
filtering
    Particle-based sum-product filter over terminal, visibility, and variances.
neuralmap
    Learned per-station multipath map (two small MLPs) with exact backprop.
learning
    Variational EM loop that fits the map (and optionally calibration).
metrics
    Tracking, visibility, and map-recovery scores.
"""

__version__ = "0.1.0"
