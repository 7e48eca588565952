import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fscvqkd import _beam, kernels
from fscvqkd.channel import (
    BeamSample,
    ChannelEnsemble,
    DegenerateChannelError,
    EmptySelectionError,
    TurbulenceParams,
    effective_params,
    elliptic_beam_transmissivity,
    load_ensemble,
    moments,
    sample_ensemble,
    save_ensemble,
    turbulence_statistics,
)
from fscvqkd.strategies import cluster_index

DISTANCES = (1500.0, 2000.0, 3000.0, 3500.0)


def aperture_integral(x0, y0, w1, w2, phi, a):
    """Power of an elliptic Gaussian beam inside a centred circular aperture."""
    c, s = math.cos(phi), math.sin(phi)

    def intensity(y, x):
        u = (x - x0) * c + (y - y0) * s
        v = -(x - x0) * s + (y - y0) * c
        return 2 / (math.pi * w1 * w2) * math.exp(-2 * u * u / w1 ** 2 - 2 * v * v / w2 ** 2)

    val, _ = integrate.dblquad(intensity, -a, a, lambda x: -math.sqrt(a * a - x * x),
                               lambda x: math.sqrt(a * a - x * x), epsabs=1e-12, epsrel=1e-10)
    return val


def theta(w, w0=0.02):
    return 2 * math.log(w / w0)


class TestTurbulenceParams:
    def test_eta_m(self):
        assert TurbulenceParams(attenuation_db=1.25).eta_m == pytest.approx(10 ** -0.125)

    @pytest.mark.parametrize("field", ["wavelength", "w0", "aperture", "cn2", "distance"])
    def test_positive(self, field):
        with pytest.raises(ValueError):
            TurbulenceParams(**{field: 0.0})

    def test_negative_attenuation(self):
        with pytest.raises(ValueError):
            TurbulenceParams(attenuation_db=-1)


class TestTurbulenceStatistics:
    def test_scalars_high_precision(self):
        mpmath.mp.dps = 40
        p = TurbulenceParams(distance=1000.0)
        k = 2 * mpmath.pi / mpmath.mpf("809e-9")
        rytov = mpmath.mpf("1.23") * mpmath.mpf("1.5e-14") * k ** (mpmath.mpf(7) / 6) \
            * mpmath.mpf(1000) ** (mpmath.mpf(11) / 6)
        omega = k * mpmath.mpf("0.02") ** 2 / (2 * 1000)
        assert p.rytov == pytest.approx(float(rytov), rel=1e-13)
        assert p.fresnel == pytest.approx(float(omega), rel=1e-13)
        _, cov = turbulence_statistics(p)
        var_xy = mpmath.mpf("0.33") * mpmath.mpf("0.02") ** 2 * rytov * omega ** (-mpmath.mpf(7) / 6)
        assert cov[0, 0] == pytest.approx(float(var_xy), rel=1e-12)

    def test_weak_limit(self):
        p = TurbulenceParams(cn2=1e-40)
        mean, cov = turbulence_statistics(p)
        assert cov[0, 0] == pytest.approx(0, abs=1e-20)
        assert cov[2, 3] == pytest.approx(0, abs=1e-20)
        assert mean[2] == pytest.approx(math.log(1 / p.fresnel ** 2), rel=1e-12)

    def test_structure(self):
        mean, cov = turbulence_statistics(TurbulenceParams(distance=2000.0))
        assert mean[0] == mean[1] == 0
        assert mean[2] == mean[3]
        np.testing.assert_array_equal(cov[:2, 2:], 0)
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > 0


class TestEllipticBeamTransmissivity:
    def test_centred_equals_eta0(self):
        p = TurbulenceParams()
        s = BeamSample(0.0, 0.0, 0.3, -0.2, 0.4)
        w1, w2 = s.semi_axes(p.w0)
        got = elliptic_beam_transmissivity(s, p)
        assert got == pytest.approx(aperture_integral(0, 0, w1, w2, 0.4, p.aperture), abs=2e-3)

    def test_circular_centred_closed_form(self):
        p = TurbulenceParams()
        got = elliptic_beam_transmissivity(BeamSample(0, 0, 0, 0, 0), p)
        closed = 1 - math.exp(-2 * p.aperture ** 2 / p.w0 ** 2)
        assert got == pytest.approx(closed, rel=1e-14)
        assert got == pytest.approx(aperture_integral(0, 0, p.w0, p.w0, 0, p.aperture), abs=1e-9)

    @pytest.mark.parametrize("r0,tol", [(0.005, 5e-3), (0.02, 5e-3), (0.04, 5e-3), (0.06, 1e-2)])
    def test_circular_displaced_numeric(self, r0, tol):
        # the wandering law is an approximation; it is loosest beyond the aperture edge
        p = TurbulenceParams()
        got = elliptic_beam_transmissivity(BeamSample(r0, 0, 0, 0, 0), p)
        assert got == pytest.approx(aperture_integral(r0, 0, p.w0, p.w0, 0, p.aperture), abs=tol)

    def test_elliptic_numeric(self):
        # phi is measured from the displacement direction; the law is an
        # approximation whose error grows with eccentricity, so stay in the sampled range
        p = TurbulenceParams()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            w1 = rng.uniform(0.015, 0.07)
            w2 = w1 * rng.uniform(1, 1.5) ** rng.choice([-1, 1])
            phi, r, psi = rng.uniform(0, math.pi / 2), rng.uniform(0, 0.06), rng.uniform(0, 2 * math.pi)
            x0, y0 = r * math.cos(psi), r * math.sin(psi)
            got = elliptic_beam_transmissivity(BeamSample(x0, y0, theta(w1), theta(w2), phi), p)
            worst = max(worst, abs(got - aperture_integral(x0, y0, w1, w2, phi + psi, p.aperture)))
        assert worst < 0.03

    def test_large_aperture(self):
        p = TurbulenceParams(aperture=10.0)
        assert elliptic_beam_transmissivity(BeamSample(0.01, 0.01, 0.5, -0.3, 0.2), p) == \
            pytest.approx(1.0, abs=1e-12)

    def test_near_circular_continuous(self):
        p = TurbulenceParams()
        vals = [elliptic_beam_transmissivity(BeamSample(0.01, 0.0, d, -d, 0.3), p)
                for d in (0.0, 1e-12, 1e-8, 1e-5)]
        assert np.all(np.isfinite(vals))
        np.testing.assert_allclose(vals, vals[0], atol=1e-5)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, math.pi / 2 - 1e-9))
    def test_monotone_in_r0(self, t1, t2, phi):
        p = TurbulenceParams()
        r = np.linspace(0, 0.15, 40)
        eta = kernels.aperture_transmissivity(r, 0.0, t1, t2, phi, p.w0, p.aperture)
        assert np.all(np.diff(eta) <= 1e-15)

    def test_unit_interval_1e6_per_distance(self):
        for dist in DISTANCES:
            p = TurbulenceParams(distance=dist, attenuation_db=0.0)
            eta = sample_ensemble(p, 10 ** 6, seed=7).eta
            assert eta.min() >= 0 and eta.max() <= 1

    def test_bad_phi(self):
        with pytest.raises(ValueError):
            BeamSample(0, 0, 0, 0, math.pi / 2)


class TestBackends:
    def test_agreement(self):
        rng = np.random.default_rng(3)
        n = 100_000
        args = (rng.normal(0, 0.02, n), rng.normal(0, 0.02, n), rng.normal(0.5, 0.6, n),
                rng.normal(0.5, 0.6, n), rng.uniform(0, math.pi / 2, n))
        ref = _beam.aperture_transmissivity(*args, 0.02, 0.04)
        got = kernels.aperture_transmissivity(*args, 0.02, 0.04)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_backend_name(self):
        assert kernels.BACKEND in ("numpy", "cython")

    def test_lambert_w(self):
        from scipy.special import lambertw
        u = np.array([-30.0, -1.0, 0.0, 0.5, 3.0, 50.0, 700.0])
        w = _beam.lambertw_exp(u)
        np.testing.assert_allclose(w + np.log(w), u, rtol=1e-14, atol=1e-14)
        # exp(700) is still finite, so scipy can serve as a reference everywhere
        np.testing.assert_allclose(w, np.real(lambertw(np.exp(u))), rtol=1e-13)

    def test_shape_series_branch(self):
        mpmath.mp.dps = 50
        for x in (1e-6, 1e-3, 0.5, 1.9, 2.0, 2.1, 10.0):
            lam, lg = _beam.shape_log(np.array([x]))
            X = mpmath.mpf(x)
            e0 = mpmath.besseli(0, X) * mpmath.exp(-X)
            ref_lg = mpmath.log(2 * (1 - mpmath.exp(-X / 2)) / (1 - e0))
            ref_lam = 2 * X * mpmath.exp(-X) * mpmath.besseli(1, X) / (1 - e0) / ref_lg
            assert lg[0] == pytest.approx(float(ref_lg), rel=1e-12)
            assert lam[0] == pytest.approx(float(ref_lam), rel=1e-12)


class TestSampleEnsemble:
    def test_deterministic(self):
        p = TurbulenceParams()
        a = sample_ensemble(p, 1000, seed=5)
        b = sample_ensemble(p, 1000, seed=5)
        np.testing.assert_array_equal(a.eta, b.eta)
        assert not np.array_equal(a.eta, sample_ensemble(p, 1000, seed=6).eta)

    def test_scaled_by_eta_m(self):
        p = TurbulenceParams(attenuation_db=3.0)
        e = sample_ensemble(p, 2000, seed=1)
        assert e.eta_max <= p.eta_m

    @pytest.mark.parametrize("dist,mean,root", [(3500.0, 0.08, 0.27), (1500.0, 0.54, 0.73)])
    def test_reference_moments(self, dist, mean, root):
        m = moments(sample_ensemble(TurbulenceParams(distance=dist), 10_000, seed=1))
        assert m.mean_eta == pytest.approx(mean, rel=0.15)
        assert m.mean_sqrt == pytest.approx(root, rel=0.15)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            sample_ensemble(TurbulenceParams(), 0)


class TestMoments:
    def test_constant(self):
        m = moments(ChannelEnsemble(np.full(10, 0.5)))
        assert m.mean_sqrt == pytest.approx(0.70711, abs=1e-5)
        assert m.var_sqrt == 0
        assert effective_params(m, 7.0).eta_f == 0.5

    def test_two_point(self):
        m = moments(ChannelEnsemble([0.36, 0.64]))
        assert m.mean_eta == pytest.approx(0.5)
        assert m.mean_sqrt == pytest.approx(0.7)
        assert m.var_sqrt == pytest.approx(0.01)
        assert m.probability == 1

    def test_two_point_range(self):
        m = moments(ChannelEnsemble([0.36, 0.64]), 0.5, 1.0)
        assert m.probability == 0.5
        assert m.mean_eta == 0.64 and m.var_sqrt == 0 and m.eta_max == 0.64

    def test_empty(self):
        with pytest.raises(EmptySelectionError):
            moments(ChannelEnsemble([0.36, 0.64]), 0.7)

    def test_xi_model(self):
        e = ChannelEnsemble([0.2, 0.4], excess_noise=lambda eta: 0.1 * eta)
        m = moments(e)
        assert m.mean_eta_xi == pytest.approx((0.2 * 0.02 + 0.4 * 0.04) / 2)

    def test_invalid_samples(self):
        with pytest.raises(ValueError):
            ChannelEnsemble([0.5, 1.2])
        with pytest.raises(ValueError):
            ChannelEnsemble([])

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
    def test_invariants(self, xs):
        m = moments(ChannelEnsemble(xs))
        assert m.var_sqrt >= 0
        assert 0 <= m.mean_sqrt <= 1
        assert m.eta_max >= m.mean_eta - 1e-15
        assert m.var_sqrt == pytest.approx(m.mean_eta - m.mean_sqrt ** 2, abs=1e-12)

    def test_nested_thresholds(self):
        e = sample_ensemble(TurbulenceParams(distance=3500.0), 10_000, seed=1)
        ths = np.linspace(0, 0.95 * e.eta_max, 40)
        ms = [moments(e, t) for t in ths]
        assert all(b.mean_sqrt >= a.mean_sqrt for a, b in zip(ms, ms[1:]))
        assert all(b.probability <= a.probability for a, b in zip(ms, ms[1:]))

    @pytest.mark.parametrize("dist", DISTANCES)
    def test_post_selection_reduces_fluctuation(self, dist):
        e = sample_ensemble(TurbulenceParams(distance=dist), 10_000, seed=1)
        base = moments(e).var_sqrt
        for t in np.linspace(0, 0.95 * e.eta_max, 40)[1:]:
            assert moments(e, t).var_sqrt <= base

    @pytest.mark.parametrize("dist", DISTANCES)
    def test_cluster_partition(self, dist):
        e = sample_ensemble(TurbulenceParams(distance=dist), 10_000, seed=2)
        total = moments(e)
        for n in range(1, 9):
            _, idx = cluster_index(e, n)
            probs, means = [], []
            for j in range(n):
                sel = e.eta[idx == j]
                if sel.size:
                    probs.append(sel.size / len(e))
                    means.append(sel.mean())
            assert sum(probs) == pytest.approx(1.0, abs=1e-15)
            assert np.dot(probs, means) == pytest.approx(total.mean_eta, abs=1e-12)


class TestEffectiveParams:
    @pytest.mark.parametrize("eta,xi", [(0.5, 0.01), (0.123456789, 0.0), (0.9, 0.2)])
    @pytest.mark.parametrize("V", [1.0, 3.0, 40.0])
    def test_constant_channel_exact(self, eta, xi, V):
        ec = effective_params(moments(ChannelEnsemble(np.full(77, eta), excess_noise=xi)), V)
        assert ec.eta_f == eta
        assert ec.xi_f == xi

    def test_two_point(self):
        ec = effective_params(moments(ChannelEnsemble([0.36, 0.64], excess_noise=0.01)), 2.0)
        assert ec.eta_f == pytest.approx(0.49)
        assert ec.xi_f == pytest.approx(0.015 / 0.49)
        assert ec.xi_f == pytest.approx(0.030612, abs=1e-6)

    def test_xi_increasing_in_V(self):
        m = moments(ChannelEnsemble([0.36, 0.64]))
        xs = [effective_params(m, V).xi_f for V in (1, 2, 5, 20)]
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_degenerate(self):
        with pytest.raises(DegenerateChannelError):
            effective_params(moments(ChannelEnsemble([0.0, 0.0])), 2.0)

    def test_V_domain(self):
        with pytest.raises(ValueError):
            effective_params(moments(ChannelEnsemble([0.5])), 0.5)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        e = sample_ensemble(TurbulenceParams(distance=2000.0), 5000, seed=11)
        path = tmp_path / "ens.txt"
        save_ensemble(e, path)
        back = load_ensemble(path)
        assert back.seed == 11 and back.params == e.params and back.excess_noise == 0.01
        a, b = moments(e), moments(back)
        for f in ("mean_eta", "mean_sqrt", "var_sqrt", "mean_eta_xi", "eta_max"):
            assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-12)
        save_ensemble(back, tmp_path / "again.txt")
        assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()

    def test_header(self, tmp_path):
        path = tmp_path / "ens.txt"
        save_ensemble(ChannelEnsemble([0.25, 0.5], seed=3), path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# fscvqkd-ensemble")
        assert lines[1] == "# seed=3"
        assert lines[2].startswith("# params=")
        assert lines[-2:] == ["0.25", "0.5"]

    def test_bad_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("hello\n")
        with pytest.raises(ValueError):
            load_ensemble(path)
        path.write_text("# fscvqkd-ensemble v1\n0.5\nabc\n")
        with pytest.raises(ValueError, match=":3"):
            load_ensemble(path)

    def test_callable_noise_not_persisted(self, tmp_path):
        with pytest.raises(ValueError):
            save_ensemble(ChannelEnsemble([0.5], excess_noise=lambda e: e), tmp_path / "x.txt")
