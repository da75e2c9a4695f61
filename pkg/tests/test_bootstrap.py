import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dticalib.bootstrap import (
    SaturatedLeverageError,
    TensorSampleSet,
    cone_angle_95,
    mean_dyadic,
    summarize_uncertainty,
    wild_bootstrap,
)
from dticalib.simulation import (
    PhantomSpec,
    _axisym_eigenvalues,
    make_phantom,
    make_scheme,
    monte_carlo_oracle,
)
from dticalib.tensor import DiffusionTensor, matrices_to_elements, predict_signal


def samples_from_axes(axes, scale=1e-3):
    """Prolate replicate tensors whose principal directions are `axes`."""
    axes = np.asarray(axes, dtype=np.float64)
    mats = scale * (
        np.einsum("ki,kj->kij", axes, axes) * 1.5 + 0.2 * np.eye(3)[None, :, :]
    )
    return TensorSampleSet(matrices_to_elements(mats), "monte_carlo_oracle")


class TestWildBootstrap:
    def test_noiseless_replicates_collapse(self):
        # residuals are ~1e-16 for noiseless input, so the collapse is
        # machine-precision rather than bitwise
        scheme = make_scheme(30)
        truth = DiffusionTensor([1.4e-3, 0.5e-3, 0.5e-3, 0.1e-3, 0, 0])
        samples = wild_bootstrap(predict_signal(truth, scheme), scheme, 200, seed=1)
        spread = samples.elements.max(axis=0) - samples.elements.min(axis=0)
        assert np.max(spread) < 1e-15
        bundle = summarize_uncertainty(samples)
        assert bundle.sigma_fa < 1e-12
        assert bundle.sigma_md < 1e-15
        assert bundle.theta95 < 1e-5

    def test_same_seed_bitwise_identical(self):
        scheme = make_scheme(30)
        rec = make_phantom(
            PhantomSpec(n_voxels=1, scheme=scheme, snr_db=25.0, seed=3)
        )[0]
        a = wild_bootstrap(rec.signals, scheme, 100, seed=9)
        b = wild_bootstrap(rec.signals, scheme, 100, seed=9)
        assert np.array_equal(a.elements, b.elements)
        c = wild_bootstrap(rec.signals, scheme, 100, seed=10)
        assert not np.array_equal(a.elements, c.elements)

    def test_single_b0_scheme_saturates(self):
        # one shell + one b=0 row: that row is an exact interpolation point
        scheme = make_scheme(30, n_b0=1)
        rec = make_phantom(
            PhantomSpec(n_voxels=1, scheme=scheme, snr_db=25.0, seed=3)
        )[0]
        with pytest.raises(SaturatedLeverageError, match="saturated leverage"):
            wild_bootstrap(rec.signals, scheme, 50, seed=0)

    def test_iterations_validated(self):
        scheme = make_scheme(30)
        with pytest.raises(ValueError):
            wild_bootstrap(np.full(len(scheme), 0.5), scheme, 1, seed=0)

    def test_tracks_monte_carlo_oracle(self):
        # prolate FA 0.8, 30 directions, SNR 30 dB: sigma(FA) within 30%
        scheme = make_scheme(30)
        spec = PhantomSpec(
            n_voxels=1, scheme=scheme, generator="prolate", fa_target=0.8,
            md=0.9e-3, orientation="uniform", snr_db=30.0, seed=12,
        )
        rec = make_phantom(spec)[0]
        wbs = summarize_uncertainty(wild_bootstrap(rec.signals, scheme, 1000, seed=5))
        orc = monte_carlo_oracle(rec.truth, scheme, 30.0, n_realizations=2000, seed=6)
        assert abs(wbs.sigma_fa / orc.sigma_fa - 1) <= 0.30


class TestMeanDyadic:
    def test_constant_axis(self):
        axes = np.tile([0.0, 0.0, 1.0], (30, 1))
        axis = mean_dyadic(samples_from_axes(axes))
        assert abs(axis[2]) == pytest.approx(1.0, abs=1e-10)

    def test_sign_mixture_kills_nothing(self):
        axes = np.tile([0.0, 0.0, 1.0], (30, 1))
        axes[::2] *= -1.0
        axis = mean_dyadic(samples_from_axes(axes))
        assert abs(axis[2]) == pytest.approx(1.0, abs=1e-10)

    def test_cone_of_directions(self):
        # 10-degree cone around z: the dyadic axis lands within 1 degree
        rng = np.random.default_rng(77)
        k = 1000
        ang = np.radians(rng.uniform(0, 10, k))
        az = rng.uniform(0, 2 * np.pi, k)
        axes = np.stack(
            [np.sin(ang) * np.cos(az), np.sin(ang) * np.sin(az), np.cos(ang)], axis=1
        )
        axis = mean_dyadic(samples_from_axes(axes))
        assert np.degrees(np.arccos(abs(axis[2]))) < 1.0


class TestConeAngle:
    def test_identical_axes_zero(self):
        axes = np.tile([0.0, 1.0, 0.0], (25, 1))
        assert cone_angle_95(samples_from_axes(axes)) == 0.0

    def test_fixed_ring_gives_its_angle(self):
        # axes exactly 10 degrees off z with symmetric azimuths
        az = np.linspace(0, 2 * np.pi, 36, endpoint=False)
        ang = np.radians(10.0)
        axes = np.stack(
            [np.sin(ang) * np.cos(az), np.sin(ang) * np.sin(az), np.full(36, np.cos(ang))],
            axis=1,
        )
        assert cone_angle_95(samples_from_axes(axes)) == pytest.approx(10.0, abs=1e-6)

    def test_isotropic_axes_match_closed_form(self):
        # uniform directions: angle CDF is 1 - cos(a), so the 95th
        # percentile is arccos(0.05) = 87.134 degrees
        rng = np.random.default_rng(123)
        axes = rng.normal(size=(10_000, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        theta = cone_angle_95(samples_from_axes(axes))
        assert theta == pytest.approx(np.degrees(np.arccos(0.05)), abs=0.5)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_sign_flip_invariance_exact(self, seed):
        rng = np.random.default_rng(seed)
        axes = rng.normal(size=(40, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        flipped = axes * np.where(rng.random(40) < 0.5, -1.0, 1.0)[:, None]
        assert cone_angle_95(samples_from_axes(axes)) == cone_angle_95(
            samples_from_axes(flipped)
        )
        a1 = mean_dyadic(samples_from_axes(axes))
        a2 = mean_dyadic(samples_from_axes(flipped))
        assert abs(np.dot(a1, a2)) == pytest.approx(1.0, abs=1e-12)


class TestSummarize:
    def test_identical_pair_gives_zero_bundle(self):
        t = DiffusionTensor([1.2e-3, 0.4e-3, 0.4e-3, 0, 0, 0])
        samples = TensorSampleSet(np.stack([t.elements, t.elements]), "mc_dropout")
        bundle = summarize_uncertainty(samples)
        assert bundle.sigma_fa == 0.0 and bundle.sigma_md == 0.0 and bundle.theta95 == 0.0

    def test_two_point_fa_std(self):
        # FA values {0.4, 0.6}: population std is exactly 0.1
        e1 = np.diag(_axisym_eigenvalues(0.4, 0.9e-3, prolate=True))
        e2 = np.diag(_axisym_eigenvalues(0.6, 0.9e-3, prolate=True))
        samples = TensorSampleSet(matrices_to_elements(np.stack([e1, e2])), "mc_dropout")
        bundle = summarize_uncertainty(samples)
        assert bundle.sigma_fa == pytest.approx(0.1, abs=1e-9)

    def test_requires_two_replicates(self):
        t = DiffusionTensor([1e-3, 1e-3, 1e-3, 0, 0, 0])
        with pytest.raises(ValueError):
            summarize_uncertainty(TensorSampleSet(t.elements[None], "mc_dropout"))

    def test_matches_streaming_oracle(self):
        # two-pass numpy std against an incremental Welford accumulation
        scheme = make_scheme(30)
        rec = make_phantom(PhantomSpec(n_voxels=1, scheme=scheme, snr_db=28.0, seed=4))[0]
        samples = wild_bootstrap(rec.signals, scheme, 1000, seed=2)
        from dticalib.tensor import eigh3_batch, elements_to_matrices, fa_md_from_eigenvalues

        fa, md = fa_md_from_eigenvalues(eigh3_batch(elements_to_matrices(samples.elements))[0])
        bundle = summarize_uncertainty(samples)
        for values, got in ((fa, bundle.sigma_fa), (md, bundle.sigma_md)):
            mean, m2 = 0.0, 0.0
            for i, v in enumerate(values, start=1):
                delta = v - mean
                mean += delta / i
                m2 += delta * (v - mean)
            assert got == pytest.approx(np.sqrt(m2 / len(values)), abs=1e-12)


class TestNoiseMonotonicity:
    def test_sigma_fa_grows_with_noise(self):
        # median over 100 voxels: sigma(FA) at 20 dB >= at 35 dB
        scheme = make_scheme(30)
        medians = {}
        for snr in (20.0, 35.0):
            spec = PhantomSpec(
                n_voxels=100, scheme=scheme, generator="prolate", fa_target=0.8,
                md=0.9e-3, orientation="uniform", snr_db=snr, seed=31,
            )
            vals = [
                summarize_uncertainty(
                    wild_bootstrap(r.signals, scheme, 300, seed=100 + v)
                ).sigma_fa
                for v, r in enumerate(make_phantom(spec))
            ]
            medians[snr] = np.median(vals)
        assert medians[20.0] >= medians[35.0]

    def test_cone_shrinks_with_anisotropy(self):
        # high-FA prolate voxels have tighter orientation cones
        scheme = make_scheme(30)
        medians = {}
        for fa in (0.15, 0.8):
            spec = PhantomSpec(
                n_voxels=30, scheme=scheme, generator="prolate", fa_target=fa,
                md=0.9e-3, orientation="uniform", snr_db=25.0, seed=37,
            )
            vals = [
                summarize_uncertainty(
                    wild_bootstrap(r.signals, scheme, 300, seed=500 + v)
                ).theta95
                for v, r in enumerate(make_phantom(spec))
            ]
            medians[fa] = np.median(vals)
        assert medians[0.8] < medians[0.15]
