"""Response-vector and path-geometry checks, including the IDFT range oracle."""

import numpy as np
import pytest

from rfslam.signal import (
    SPEED_OF_LIGHT as C,
    ArrayGeometry,
    Calibration,
    PathGeometry,
    SignalConfig,
    array_response,
    array_response_batch,
    feature_geometry,
    frequency_response,
    frequency_response_batch,
    joint_response,
    joint_response_batch,
    los_geometry,
    path_geometry_batch,
    rotation,
)


def make_cfg(m_f=64, delta_f=1e6, m_a=2, f_c=6e9):
    return SignalConfig(f_c=f_c, bandwidth=(m_f - 1) * delta_f, delta_f=delta_f, m_a=m_a)


@pytest.fixture
def cfg():
    return make_cfg()


@pytest.fixture
def cal(cfg):
    return Calibration.identity(cfg.m_f, cfg.m_a)


@pytest.fixture
def geo(cfg):
    return ArrayGeometry.ula(cfg.m_a, cfg.wavelength / 2)


class TestSignalConfig:
    def test_m_f_from_bandwidth(self):
        cfg = SignalConfig(f_c=6e9, bandwidth=100e6, delta_f=1e6, m_a=4)
        assert cfg.m_f == 101
        assert cfg.m_total == 404

    def test_d_max_positive(self, cfg):
        assert cfg.d_max == pytest.approx(C / cfg.delta_f)
        assert cfg.d_max > 0

    def test_freq_grid_symmetric(self, cfg):
        grid = cfg.freq_grid
        assert grid.shape == (cfg.m_f,)
        np.testing.assert_allclose(grid + grid[::-1], 0.0, atol=1e-6)
        np.testing.assert_allclose(np.diff(grid), cfg.delta_f)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            SignalConfig(f_c=6e9, bandwidth=0.5e6, delta_f=1e6, m_a=1)  # m_f < 2
        with pytest.raises(ValueError):
            SignalConfig(f_c=6e9, bandwidth=10e6, delta_f=1e6, m_a=0)
        with pytest.raises(ValueError):
            SignalConfig(f_c=6e9, bandwidth=10e6, delta_f=1e6, m_a=1,
                         baseband_spectrum=2.0 * np.ones(11))

    def test_unit_spectrum_accepted(self):
        phases = np.exp(1j * np.linspace(0, 1, 11))
        cfg = SignalConfig(f_c=6e9, bandwidth=10e6, delta_f=1e6, m_a=1,
                           baseband_spectrum=phases)
        np.testing.assert_allclose(np.abs(cfg.spectrum), 1.0)


class TestArrayGeometry:
    def test_ula_centered(self):
        geo = ArrayGeometry.ula(5, 0.025)
        np.testing.assert_allclose(geo.element_positions.mean(axis=0), 0.0, atol=1e-15)

    def test_rejects_uncentered(self):
        with pytest.raises(ValueError):
            ArrayGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]))


class TestFrequencyResponse:
    def test_full_ambiguity_collapses_phase(self, cfg, cal):
        # One full ambiguity: tau = d_max/c = 1/delta_f, so each phase term is
        # exp(-2j pi f_m / delta_f) with f_m/delta_f offset by integers.
        h = frequency_response(cfg.d_max / C, cfg, cal)
        phases = h / np.abs(h)
        np.testing.assert_allclose(phases, phases[0], atol=1e-9)

    def test_idft_peak_at_range(self, cal):
        # Independent oracle: with the path loss removed, the inverse DFT of
        # the response must peak at the bin nearest 100 m.
        cfg = make_cfg(m_f=64, delta_f=1e6, m_a=1)
        rng_m = 100.0
        h = frequency_response(rng_m / C, cfg, cal)
        h = h / np.abs(h)
        # Order samples as 0..m_f-1 frequencies for a plain IDFT.
        profile = np.abs(np.fft.ifft(np.fft.ifftshift(h)))
        expected_bin = int(round(rng_m * cfg.m_f * cfg.delta_f / C))
        assert np.argmax(profile) == expected_bin

    def test_magnitude_is_path_loss(self, cfg, cal):
        tau = 50.0 / C
        h = frequency_response(tau, cfg, cal)
        np.testing.assert_allclose(np.abs(h), C / (4 * np.pi * cfg.f_c * tau), rtol=1e-12)

    def test_rejects_nonpositive_delay(self, cfg, cal):
        with pytest.raises(ValueError):
            frequency_response(0.0, cfg, cal)
        with pytest.raises(ValueError):
            frequency_response(-1e-9, cfg, cal)

    def test_phase_linearity(self, cfg, cal):
        tau1, tau2 = 40.0 / C, 15.0 / C
        h12 = frequency_response(tau1 + tau2, cfg, cal)
        h1 = frequency_response(tau1, cfg, cal)
        shifted = h1 * np.exp(-2j * np.pi * cfg.freq_grid * tau2) * (tau1 / (tau1 + tau2))
        np.testing.assert_allclose(h12, shifted, rtol=1e-10)

    def test_ambiguity_distance(self, cfg, cal):
        tau = 30.0 / C
        h1 = frequency_response(tau, cfg, cal)
        h2 = frequency_response(tau + cfg.d_max / C, cfg, cal)
        # Same response up to the real path-loss ratio.
        ratio = h2 / h1
        np.testing.assert_allclose(ratio, ratio[0].real, atol=1e-9)


class TestArrayResponse:
    def test_broadside_is_ones(self, cfg, cal, geo):
        # Elements on the x-axis, direction along y: zero projections.
        h = array_response(np.array([0.0, 1.0]), geo, cal, cfg)
        np.testing.assert_allclose(h, 1.0, atol=1e-12)

    def test_quarter_wavelength_pair(self, cfg, cal):
        lam = cfg.wavelength
        geo = ArrayGeometry(np.array([[-lam / 4, 0.0], [lam / 4, 0.0]]))
        h = array_response(np.array([1.0, 0.0]), geo, cal, cfg)
        np.testing.assert_allclose(h, [np.exp(1j * np.pi / 2), np.exp(-1j * np.pi / 2)],
                                   atol=1e-12)

    def test_elementwise_oracle(self, cfg, cal):
        rng = np.random.default_rng(7)
        pos = rng.normal(size=(4, 2)) * 0.02
        pos -= pos.mean(axis=0)
        geo = ArrayGeometry(pos)
        phi = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(phi), np.sin(phi)])
        h = array_response(u, geo, cal.__class__.identity(cfg.m_f, 4), cfg)
        for m in range(4):
            want = np.exp(-1j * 2 * np.pi / cfg.wavelength * u @ pos[m])
            np.testing.assert_allclose(h[m], want, rtol=1e-12)

    def test_rejects_non_unit(self, cfg, cal, geo):
        with pytest.raises(ValueError):
            array_response(np.array([0.5, 0.5]), geo, cal, cfg)


class TestJointResponse:
    def test_single_antenna_reduces_to_frequency(self, cal):
        cfg = make_cfg(m_a=1)
        geo = ArrayGeometry(np.zeros((1, 2)))
        cal1 = Calibration.identity(cfg.m_f, 1)
        u = np.array([1.0, 0.0])
        np.testing.assert_allclose(joint_response(33.0 / C, u, cfg, geo, cal1),
                                   frequency_response(33.0 / C, cfg, cal1))

    def test_kronecker_layout(self, cal):
        cfg = make_cfg(m_f=2, delta_f=1e6, m_a=2)
        cal2 = Calibration.identity(2, 2)
        geo = ArrayGeometry.ula(2, cfg.wavelength / 2)
        u = np.array([np.cos(0.3), np.sin(0.3)])
        h_f = frequency_response(20.0 / C, cfg, cal2)
        a_u = array_response(u, geo, cal2, cfg)
        h = joint_response(20.0 / C, u, cfg, geo, cal2)
        for i in range(2):
            for k in range(2):
                np.testing.assert_allclose(h[i * 2 + k], h_f[i] * a_u[k], rtol=1e-12)

    def test_norm_product(self, cfg, cal, geo):
        u = np.array([np.cos(1.1), np.sin(1.1)])
        h = joint_response(42.0 / C, u, cfg, geo, cal)
        h_f = frequency_response(42.0 / C, cfg, cal)
        a_u = array_response(u, geo, cal, cfg)
        np.testing.assert_allclose(np.linalg.norm(h) ** 2,
                                   np.linalg.norm(h_f) ** 2 * np.linalg.norm(a_u) ** 2,
                                   rtol=1e-10)

    def test_calibration_scales_entries(self, cfg, geo):
        rng = np.random.default_rng(3)
        w_f = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.m_f)) * rng.uniform(0.5, 2, cfg.m_f)
        w_u = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.m_a))
        cal = Calibration(w_f, w_u, np.zeros((cfg.m_a, 2)))
        ident = Calibration.identity(cfg.m_f, cfg.m_a)
        u = np.array([0.0, 1.0])
        h = joint_response(21.0 / C, u, cfg, geo, cal)
        h0 = joint_response(21.0 / C, u, cfg, geo, ident)
        np.testing.assert_allclose(h, h0 * np.kron(w_f, w_u), rtol=1e-12)


class TestPathGeometry:
    def test_three_four_five(self):
        g = los_geometry(np.zeros(2), 0.0, np.array([3.0, 4.0]))
        assert g.delay == pytest.approx(5.0 / C)
        np.testing.assert_allclose(g.direction, [0.6, 0.8], atol=1e-15)

    def test_rotation_by_pi_negates(self):
        g = los_geometry(np.zeros(2), np.pi, np.array([3.0, 4.0]))
        np.testing.assert_allclose(g.direction, [-0.6, -0.8], atol=1e-12)

    def test_random_identities(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            p_mt = rng.normal(size=2) * 10
            p_bs = rng.normal(size=2) * 10
            if np.allclose(p_mt, p_bs):
                continue
            o = rng.uniform(-np.pi, np.pi)
            g = los_geometry(p_mt, o, p_bs)
            assert abs(np.linalg.norm(g.direction) - 1.0) < 1e-12
            assert g.delay * C == pytest.approx(np.linalg.norm(p_bs - p_mt))

    def test_coincident_raises(self):
        with pytest.raises(ValueError):
            los_geometry(np.ones(2), 0.0, np.ones(2))

    def test_feature_zero_bias_matches_los(self):
        p = np.array([1.0, -2.0])
        f = np.array([4.0, 2.0])
        a = feature_geometry(p, 0.4, f, 0.0)
        b = los_geometry(p, 0.4, f)
        assert a.delay == b.delay
        np.testing.assert_allclose(a.direction, b.direction)

    def test_feature_bias_additive(self):
        p = np.array([1.0, -2.0])
        f = np.array([4.0, 2.0])
        a = feature_geometry(p, 0.4, f, 10e-9)
        b = feature_geometry(p, 0.4, f, 0.0)
        assert a.delay - b.delay == pytest.approx(10e-9, rel=1e-12)

    def test_direction_validation(self):
        with pytest.raises(ValueError):
            PathGeometry(delay=1e-8, direction=np.array([1.0, 1.0]))


class TestBatchVariants:
    def test_match_scalar_ops(self, cfg, cal, geo):
        rng = np.random.default_rng(5)
        p_mt = rng.normal(size=(6, 2)) * 5
        o = rng.uniform(-np.pi, np.pi, size=6)
        target = np.array([12.0, -3.0])
        tau, u = path_geometry_batch(p_mt, o, target)
        h = joint_response_batch(tau, u, cfg, geo, cal)
        for i in range(6):
            g = los_geometry(p_mt[i], o[i], target)
            assert tau[i] == pytest.approx(g.delay)
            np.testing.assert_allclose(u[i], g.direction, atol=1e-14)
            np.testing.assert_allclose(h[i], joint_response(g.delay, g.direction, cfg, geo, cal),
                                       rtol=1e-12)

    def test_delay_floor(self, cfg, cal):
        tau, _ = path_geometry_batch(np.zeros((1, 2)), np.zeros(1), np.zeros(2))
        assert tau[0] == pytest.approx(1e-9)
        h = frequency_response_batch(np.array([0.0]), cfg, cal)
        assert np.all(np.isfinite(h))

    def test_batch_shapes(self, cfg, cal, geo):
        tau = np.full((3, 4), 1e-7)
        u = np.zeros((3, 4, 2))
        u[..., 0] = 1.0
        h = joint_response_batch(tau, u, cfg, geo, cal)
        assert h.shape == (3, 4, cfg.m_total)
        a = array_response_batch(u, geo, cal, cfg)
        assert a.shape == (3, 4, cfg.m_a)


def test_rotation_convention():
    # Counterclockwise: R(pi/2) maps +x to +y.
    np.testing.assert_allclose(rotation(np.pi / 2) @ [1.0, 0.0], [0.0, 1.0], atol=1e-15)
