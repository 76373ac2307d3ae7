"""EM surrogate: value oracles, chained gradients, iteration mechanics."""

import numpy as np
import pytest

from rfslam.filtering import BeliefSnapshot, FilterConfig
from rfslam.learning import (
    LearnConfig,
    LearnProblem,
    e_step,
    em_iteration,
    learn_map,
    q_tilde,
    q_tilde_grad,
    segment_scheduler,
    supervised_condition,
)
from rfslam.likelihood import CovarianceParams, FeatureBank, dense_log_likelihood
from rfslam.neuralmap import AdamState, MapArchitecture, init_params, predict_map
from rfslam.scenario import Scenario, TrajectorySpec, simulate
from rfslam.signal import ArrayGeometry, Calibration, SignalConfig, joint_response, los_geometry
from rfslam.states import LosTransitionParams, MotionParams, NoiseTransitionParams, Priors


def toy_problem(k=2, n_stations=1, seed=0, supervised=False, wall=False):
    cfg = SignalConfig(f_c=6e9, bandwidth=14e6, delta_f=2e6, m_a=2)
    geo = ArrayGeometry.ula(2, cfg.wavelength / 2)
    cal = Calibration.identity(cfg.m_f, 2)
    bs = np.array([[0.0, 15.0], [12.0, -8.0]][:n_stations])
    traj = TrajectorySpec(waypoints=[[-3.0, 0.0], [3.0, 0.0]], speed=0.5, dt=1.0,
                          steps=k)
    g = los_geometry(np.zeros(2), 0.0, bs[0])
    h = joint_response(g.delay, g.direction, cfg, geo, cal)
    eta = np.linalg.norm(h) ** 2 / 300.0
    walls = [np.array([[-12.0, -6.0], [12.0, -6.0]])] if wall else []
    scn = Scenario(bs_positions=bs, trajectory=traj, walls=walls, los_gamma=1.0,
                   noise_eta=eta, seed=seed)
    truth, frames = simulate(scn, cfg, geo, cal)
    motion = MotionParams(dt=1.0, sigma_acc=0.05, sigma_o_walk=0.01, sigma_o_meas=0.02)
    los = LosTransitionParams(appearance_mean=1.0)
    noise = NoiseTransitionParams()
    priors = Priors(position_mean=np.array([-3.0, 0.0]), position_std=0.3,
                    velocity_mean=np.array([0.5, 0.0]), velocity_std=0.05,
                    orientation_mean=0.0, orientation_std=0.02,
                    gamma_mean=1.0, gamma_shape=2.0, eta_mean=eta, eta_shape=2.0)
    fcfg = FilterConfig(n_particles=120, n_birth=8, n_subset=6, seed=seed)
    arch = MapArchitecture(n_features=2, n_enc=1, hidden1=8, hidden2=8,
                           scene_extent=20.0, pos_scale=20.0, bias_scale=6e-8,
                           gamma_scale=0.2)
    problem = LearnProblem(frames=frames, imu_orientation=truth.imu_orientation,
                           bs_positions=bs, motion=motion, los=los, noise=noise,
                           priors=priors, fcfg=fcfg, cfg=cfg, geo=geo, arch=arch,
                           truth_states=truth.mt_states if supervised else None)
    return problem, cal, truth


def random_theta(problem, rng):
    return init_params(problem.arch, rng, bbox_min=[-10, -12], bbox_max=[12, 16],
                       gamma_hint=0.05) + 0.05 * rng.normal(size=problem.arch.n_params)


class TestSegmentScheduler:
    def test_full_window(self):
        assert segment_scheduler(10, 10) == [(1, 10)]
        assert segment_scheduler(10, None) == [(1, 10)]

    def test_truncated_tail(self):
        assert segment_scheduler(10, 4) == [(1, 4), (5, 8), (9, 10)]

    def test_exact_cover(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k = int(rng.integers(1, 60))
            k0 = int(rng.integers(1, 20))
            segs = segment_scheduler(k, k0)
            covered = [s for lo, hi in segs for s in range(lo, hi + 1)]
            assert covered == list(range(1, k + 1))


class TestQTilde:
    def test_single_term_cases(self):
        problem, cal, _ = toy_problem(k=1)
        rng = np.random.default_rng(1)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        bank = predict_map(problem.bs_positions[0], theta, problem.arch)
        snap = snaps[0]
        frame = problem.frames[0]
        for p_target, r in [(1.0, 1), (0.0, 0)]:
            forced = supervised_condition([snap], np.array(
                [snap.mt_mmse, snap.mt_mmse]))[0]
            forced.p_vis[0] = p_target
            cfgq = LearnConfig(use_mmse_points=True)
            ev = q_tilde([forced], [frame], theta, cal, problem, cfgq)
            params = CovarianceParams(
                bs_position=problem.bs_positions[0],
                position=forced.mt_mmse[0:2], orientation=forced.mt_mmse[4],
                los_present=r, gamma_lo=forced.gamma_mmse[0],
                eta=forced.eta_mmse[0], features=bank)
            want = dense_log_likelihood(frame.z[0], params, problem.cfg,
                                        problem.geo, cal)
            np.testing.assert_allclose(ev.value, want, rtol=1e-8)

    def test_matches_dense_oracle_sum(self):
        problem, cal, _ = toy_problem(k=2)
        rng = np.random.default_rng(2)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        ev = q_tilde(snaps, problem.frames, theta, cal, problem, LearnConfig())
        bank = predict_map(problem.bs_positions[0], theta, problem.arch)
        want = 0.0
        for snap in snaps:
            frame = problem.frames[snap.k - 1]
            n = snap.mt.shape[0]
            acc = 0.0
            for p_idx in range(n):
                common = dict(bs_position=problem.bs_positions[0],
                              position=snap.mt[p_idx, 0:2],
                              orientation=snap.mt[p_idx, 4],
                              gamma_lo=snap.gamma[0, p_idx],
                              eta=snap.eta[0, p_idx], features=bank)
                ll1 = dense_log_likelihood(frame.z[0], CovarianceParams(
                    los_present=1, **common), problem.cfg, problem.geo, cal)
                ll0 = dense_log_likelihood(frame.z[0], CovarianceParams(
                    los_present=0, **common), problem.cfg, problem.geo, cal)
                acc += snap.p_vis[0] * ll1 + (1 - snap.p_vis[0]) * ll0
            want += acc / n
        assert abs(ev.value - want) / abs(want) < 1e-8

    def test_per_step_decomposition(self):
        problem, cal, _ = toy_problem(k=3)
        rng = np.random.default_rng(3)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        ev = q_tilde(snaps, problem.frames, theta, cal, problem, LearnConfig())
        assert abs(sum(ev.per_step.values()) - ev.value) < 1e-12 * abs(ev.value)


class TestSupervisedCondition:
    def test_identity_substitution(self):
        problem, cal, truth = toy_problem(k=2, supervised=True)
        rng = np.random.default_rng(4)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        # Build truth equal to the filter's own posterior means.
        fake_truth = truth.mt_states.copy()
        for snap in snaps:
            fake_truth[snap.k] = snap.mt_mmse
        cfgq = LearnConfig(use_mmse_points=True)
        before = q_tilde(snaps, problem.frames, theta, cal, problem, cfgq).value
        conditioned = supervised_condition(snaps, fake_truth)
        after = q_tilde(conditioned, problem.frames, theta, cal, problem, cfgq).value
        assert after == pytest.approx(before, rel=1e-12)

    def test_truth_perturbation_moves_objective(self):
        problem, cal, truth = toy_problem(k=2, supervised=True)
        rng = np.random.default_rng(5)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig(supervised=True))
        cfgq = LearnConfig(use_mmse_points=True, supervised=True)
        base = q_tilde(snaps, problem.frames, theta, cal, problem, cfgq).value
        shifted_truth = truth.mt_states.copy()
        shifted_truth[:, 0] += 1.0
        shifted = supervised_condition(snaps, shifted_truth)
        moved = q_tilde(shifted, problem.frames, theta, cal, problem, cfgq).value
        assert abs(moved - base) > 1e-6 * abs(base)

    def test_missing_truth_rejected(self):
        problem, cal, truth = toy_problem(k=2, supervised=True)
        snap = BeliefSnapshot(k=5, mt=np.zeros((2, 5)), gamma=np.zeros((1, 2)),
                              eta=np.ones((1, 2)), p_vis=np.ones(1),
                              mt_mmse=np.zeros(5), gamma_mmse=np.ones(1),
                              eta_mmse=np.ones(1))
        with pytest.raises(ValueError):
            supervised_condition([snap], truth.mt_states)


class TestQTildeGrad:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_theta_gradient_matches_fd(self, seed):
        problem, cal, _ = toy_problem(k=2, seed=seed)
        rng = np.random.default_rng(50 + seed)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        cfgq = LearnConfig()
        ev = q_tilde_grad(snaps, problem.frames, theta, cal, problem, cfgq)
        assert abs(ev.value - q_tilde(snaps, problem.frames, theta, cal, problem,
                                      cfgq).value) < 1e-9 * abs(ev.value)
        h = 1e-6
        idx = rng.choice(theta.size, size=60, replace=False)
        fd = np.zeros(len(idx))
        for i, ix in enumerate(idx):
            tp, tm = theta.copy(), theta.copy()
            tp[ix] += h
            tm[ix] -= h
            fd[i] = (q_tilde(snaps, problem.frames, tp, cal, problem, cfgq).value -
                     q_tilde(snaps, problem.frames, tm, cal, problem, cfgq).value) / (2 * h)
        err = np.linalg.norm(ev.grad_theta[idx] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4

    def test_chi_gradient_matches_fd(self):
        problem, cal, _ = toy_problem(k=2, seed=7)
        rng = np.random.default_rng(60)
        theta = random_theta(problem, rng)
        snaps = e_step(problem, theta, cal, LearnConfig())
        cfgq = LearnConfig(learn_chi=True)
        ev = q_tilde_grad(snaps, problem.frames, theta, cal, problem, cfgq,
                          want_chi=True)
        chi0 = cal.pack()
        h = 1e-6
        fd = np.zeros(chi0.size)
        for i in range(chi0.size):
            cp, cm = chi0.copy(), chi0.copy()
            cp[i] += h
            cm[i] -= h
            fd[i] = (q_tilde(snaps, problem.frames, theta,
                             cal.unpack(cp, problem.cfg.m_f, problem.cfg.m_a),
                             problem, cfgq).value -
                     q_tilde(snaps, problem.frames, theta,
                             cal.unpack(cm, problem.cfg.m_f, problem.cfg.m_a),
                             problem, cfgq).value) / (2 * h)
        err = np.linalg.norm(ev.grad_chi - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4

    def test_zero_variance_feature_position_gradient_vanishes(self):
        problem, cal, _ = toy_problem(k=1)
        rng = np.random.default_rng(8)
        theta = random_theta(problem, rng)
        # Zero out the variance head so every feature power is exactly zero.
        from rfslam.neuralmap import split_params
        layers = split_params(theta, problem.arch)
        layers[5][0][:] = 0.0
        layers[5][1][:] = 0.0
        snaps = e_step(problem, theta, cal, LearnConfig())
        ev = q_tilde_grad(snaps, problem.frames, theta, cal, problem, LearnConfig())
        # Position heads live in layer 2; zero-power features contribute nothing.
        g_layers = split_params(ev.grad_theta, problem.arch)
        np.testing.assert_allclose(g_layers[2][0], 0.0, atol=1e-20)
        np.testing.assert_allclose(g_layers[2][1], 0.0, atol=1e-20)


class TestEmIteration:
    def test_zero_adam_steps_is_noop(self):
        problem, cal, _ = toy_problem(k=2)
        rng = np.random.default_rng(9)
        theta = random_theta(problem, rng)
        adam = AdamState.zeros(theta.size)
        cfgq = LearnConfig(adam_steps=0)
        new_theta, _, _, _, entries, _ = em_iteration(problem, theta, adam, cal,
                                                      None, cfgq)
        np.testing.assert_array_equal(new_theta, theta)
        assert entries[0].q_before == pytest.approx(entries[0].q_after, rel=1e-12)

    def test_learning_phase_does_not_decrease_objective(self):
        problem, cal, _ = toy_problem(k=3, wall=True)
        rng = np.random.default_rng(10)
        theta = random_theta(problem, rng)
        adam = AdamState.zeros(theta.size, lr=5e-3)
        cfgq = LearnConfig(adam_steps=40, use_mmse_points=True)
        _, _, _, _, entries, _ = em_iteration(problem, theta, adam, cal, None, cfgq)
        e = entries[0]
        assert e.q_after >= e.q_before - 1e-3 * abs(e.q_before)

    def test_training_log_rows(self):
        problem, cal, _ = toy_problem(k=2)
        rng = np.random.default_rng(11)
        theta = random_theta(problem, rng)
        cfgq = LearnConfig(em_iters=2, adam_steps=2, learn_chi=True,
                           use_mmse_points=True)
        _, _, log, _ = learn_map(problem, theta, cal, cfgq)
        assert len(log) == 2 * 2  # iterations x phases
        assert [e.phase for e in log] == ["theta", "chi", "theta", "chi"]
