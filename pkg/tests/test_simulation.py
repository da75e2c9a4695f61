import numpy as np
import pytest

from dticalib.rng import gaussian_pair, rng_from_key
from dticalib.simulation import (
    PhantomSpec,
    _axisym_eigenvalues,
    add_rician,
    fibonacci_directions,
    make_phantom,
    make_scheme,
    monte_carlo_oracle,
)
from dticalib.tensor import elements_to_matrices


def lapack_fa_md(elements):
    """Independent scalar path: LAPACK eigenvalues + direct FA formula."""
    lam = np.linalg.eigvalsh(elements_to_matrices(elements[None])[0])
    md = lam.mean()
    fa = np.sqrt(1.5 * np.sum((lam - md) ** 2) / np.sum(lam**2))
    return fa, md


class TestSchemes:
    def test_fibonacci_directions_unit(self):
        d = fibonacci_directions(64)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_make_scheme_layout(self):
        s = make_scheme(30, bvalue=1000.0, n_b0=2)
        assert len(s) == 32
        assert np.all(s.bvalues[:2] == 0.0)
        assert np.all(s.bvalues[2:] == 1000.0)


class TestGenerators:
    def test_prolate_hits_fa_target(self):
        scheme = make_scheme(12)
        spec = PhantomSpec(
            n_voxels=3, scheme=scheme, generator="prolate", fa_target=0.8,
            md=0.9e-3, orientation="uniform", snr_db=np.inf, seed=9,
        )
        for rec in make_phantom(spec):
            fa, md = lapack_fa_md(rec.truth.elements)
            assert fa == pytest.approx(0.8, abs=1e-6)
            assert md == pytest.approx(0.9e-3, abs=1e-9)

    def test_oblate_hits_fa_target(self):
        lam = _axisym_eigenvalues(0.5, 1.1e-3, prolate=False)
        assert lam[0] == lam[1] > lam[2] > 0
        fa, md = lapack_fa_md(np.array([lam[0], lam[1], lam[2], 0, 0, 0]))
        assert fa == pytest.approx(0.5, abs=1e-6)
        assert md == pytest.approx(1.1e-3, abs=1e-9)

    def test_oblate_cannot_reach_high_fa(self):
        # oblate family tops out at FA = 1/sqrt(2)
        with pytest.raises(ValueError):
            _axisym_eigenvalues(0.9, 1e-3, prolate=False)

    def test_random_spd_respects_range(self):
        scheme = make_scheme(10)
        spec = PhantomSpec(
            n_voxels=50, scheme=scheme, generator="random_spd",
            eig_range=(0.2e-3, 1.5e-3), snr_db=np.inf, seed=5,
        )
        for rec in make_phantom(spec):
            lam = np.linalg.eigvalsh(elements_to_matrices(rec.truth.elements[None])[0])
            assert lam.min() >= 0.2e-3 - 1e-12
            assert lam.max() <= 1.5e-3 + 1e-12

    def test_two_population_scales_second_half(self):
        scheme = make_scheme(10)
        spec = PhantomSpec(
            n_voxels=40, scheme=scheme, generator="two_population",
            eig_range=(0.3e-3, 1.0e-3), shift=1.8, snr_db=np.inf, seed=6,
        )
        recs = make_phantom(spec)
        assert [r.population for r in recs] == [0] * 20 + [1] * 20
        md_a = np.mean([lapack_fa_md(r.truth.elements)[1] for r in recs[:20]])
        md_b = np.mean([lapack_fa_md(r.truth.elements)[1] for r in recs[20:]])
        assert md_b > 1.4 * md_a

    def test_fixed_generator_requires_elements(self):
        scheme = make_scheme(10)
        spec = PhantomSpec(n_voxels=1, scheme=scheme, generator="fixed", seed=0)
        with pytest.raises(ValueError):
            make_phantom(spec)


class TestPhantomDeterminism:
    def test_infinite_snr_is_noiseless(self):
        scheme = make_scheme(14)
        spec = PhantomSpec(n_voxels=4, scheme=scheme, snr_db=np.inf, seed=2)
        for rec in make_phantom(spec):
            from dticalib.tensor import predict_signal

            assert np.array_equal(rec.signals, predict_signal(rec.truth, scheme))

    def test_same_seed_identical(self):
        scheme = make_scheme(14)
        spec = PhantomSpec(n_voxels=6, scheme=scheme, snr_db=25.0, seed=42)
        a, b = make_phantom(spec), make_phantom(spec)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.signals, rb.signals)
            assert np.array_equal(ra.truth.elements, rb.truth.elements)

    def test_snr_range_draws_per_voxel(self):
        scheme = make_scheme(14)
        spec = PhantomSpec(
            n_voxels=6, scheme=scheme, generator="fixed",
            elements=np.array([1e-3, 1e-3, 1e-3, 0, 0, 0]),
            orientation="fixed", snr_range=(10.0, 40.0), seed=1,
        )
        recs = make_phantom(spec)
        spreads = [np.std(r.signals) for r in recs]
        assert len(set(np.round(spreads, 12))) == len(recs)


class TestRicianNoise:
    def test_zero_noise_identity(self):
        rng = rng_from_key(0)
        s = np.array([0.0, 0.3, 1.0])
        assert np.array_equal(add_rician(s, np.inf, rng), s)

    def test_rayleigh_mean_at_zero_signal(self):
        # closed form: E|noise| of a zero signal is sigma * sqrt(pi/2)
        rng = rng_from_key(8)
        sigma = 10 ** (-25.0 / 20.0)
        draws = add_rician(np.zeros(1_000_000), 25.0, rng)
        expected = sigma * np.sqrt(np.pi / 2)
        assert abs(draws.mean() / expected - 1) < 0.01

    def test_second_moment_identity(self):
        # E[S_noisy^2] = S^2 + 2 sigma^2
        rng = rng_from_key(9)
        s, snr = 0.4, 22.0
        sigma = 10 ** (-snr / 20.0)
        draws = add_rician(np.full(1_000_000, s), snr, rng)
        expected = s**2 + 2 * sigma**2
        assert abs((draws**2).mean() / expected - 1) < 0.005

    def test_nonnegative(self):
        rng = rng_from_key(10)
        draws = add_rician(np.zeros(10_000), 3.0, rng)
        assert np.all(draws >= 0.0)

    def test_gaussian_pair_moments(self):
        rng = rng_from_key(11)
        a, b = gaussian_pair(rng, 500_000)
        for z in (a, b):
            assert abs(z.mean()) < 5e-3
            assert abs(z.std() - 1) < 5e-3
        assert abs(np.corrcoef(a, b)[0, 1]) < 5e-3


class TestMonteCarloOracle:
    def test_noiseless_bundle_is_zero(self):
        scheme = make_scheme(20)
        spec = PhantomSpec(n_voxels=1, scheme=scheme, snr_db=np.inf, seed=3)
        rec = make_phantom(spec)[0]
        bundle = monte_carlo_oracle(rec.truth, scheme, np.inf, n_realizations=100, seed=0)
        # identical replicates; the std of n equal floats still carries ulps
        assert bundle.sigma_fa < 1e-12
        assert bundle.sigma_md < 1e-15
        assert bundle.theta95 < 1e-5

    def test_converged_at_2000_realizations(self):
        scheme = make_scheme(30)
        spec = PhantomSpec(
            n_voxels=1, scheme=scheme, generator="prolate", fa_target=0.8,
            md=0.9e-3, snr_db=30.0, seed=19,
        )
        rec = make_phantom(spec)[0]
        a = monte_carlo_oracle(rec.truth, scheme, 30.0, n_realizations=2000, seed=1)
        b = monte_carlo_oracle(rec.truth, scheme, 30.0, n_realizations=4000, seed=1)
        assert abs(a.sigma_fa / b.sigma_fa - 1) < 0.05

    def test_sigma_fa_monotone_in_noise(self):
        scheme = make_scheme(30)
        spec = PhantomSpec(
            n_voxels=1, scheme=scheme, generator="prolate", fa_target=0.8,
            md=0.9e-3, snr_db=30.0, seed=23,
        )
        rec = make_phantom(spec)[0]
        noisy = monte_carlo_oracle(rec.truth, scheme, 20.0, n_realizations=800, seed=2)
        quiet = monte_carlo_oracle(rec.truth, scheme, 35.0, n_realizations=800, seed=2)
        assert noisy.sigma_fa > quiet.sigma_fa

    def test_deterministic_under_seed(self):
        scheme = make_scheme(20)
        spec = PhantomSpec(n_voxels=1, scheme=scheme, snr_db=28.0, seed=4)
        rec = make_phantom(spec)[0]
        a = monte_carlo_oracle(rec.truth, scheme, 28.0, n_realizations=200, seed=7)
        b = monte_carlo_oracle(rec.truth, scheme, 28.0, n_realizations=200, seed=7)
        assert (a.sigma_fa, a.sigma_md, a.theta95) == (b.sigma_fa, b.sigma_md, b.theta95)

    def test_rejects_tiny_realization_count(self):
        scheme = make_scheme(20)
        spec = PhantomSpec(n_voxels=1, scheme=scheme, snr_db=28.0, seed=4)
        rec = make_phantom(spec)[0]
        with pytest.raises(ValueError):
            monte_carlo_oracle(rec.truth, scheme, 28.0, n_realizations=50, seed=7)
