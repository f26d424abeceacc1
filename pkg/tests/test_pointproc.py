import numpy as np
import pytest

from oracle_values import TAIL_RATIO_X03, TOP_WEIGHT_PD05
from rostlab.errors import RostError
from rostlab.pointproc import (
    FiniteDiscrete, MassPartition, PointMass, StandardNormal, estimate_pd_x, mark_partition, marked_shift,
    remainder_mean, sample_pd, sample_power_tail_poisson,
)
from rostlab.streams import replica_rng


class TestMassPartition:
    def test_valid(self):
        mp = MassPartition(np.array([0.5, 0.3, 0.1]), remainder_mass=0.1)
        assert mp.total_mass == pytest.approx(1.0)
        assert mp.is_proper
        assert len(mp.top(2)) == 2

    def test_rejects_increasing(self):
        with pytest.raises(RostError):
            MassPartition(np.array([0.3, 0.5]))

    def test_rejects_excess_mass(self):
        with pytest.raises(RostError):
            MassPartition(np.array([0.6, 0.5]))

    def test_weights_are_read_only(self):
        mp = MassPartition(np.array([0.6, 0.4]))
        with pytest.raises(ValueError):
            mp.weights[0] = 0.1


class TestPoissonSampler:
    def test_descending_and_positive(self, rng):
        eta = sample_power_tail_poisson(0.5, 1000, rng)
        assert np.all(np.diff(eta) <= 0) and eta[-1] > 0

    def test_invalid_x(self, rng):
        for x in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(RostError):
                sample_power_tail_poisson(x, 10, rng)

    def test_count_above_level_is_poisson(self):
        # atoms above s have Poisson(s^-x) counts: mean 0.5 at x=0.5, s=4
        x, s, n = 0.5, 4.0, 10_000
        counts = np.array([(sample_power_tail_poisson(x, 20, replica_rng(5, "tail", i)) >= s).sum()
                           for i in range(n)])
        mean = s**-x
        assert abs(counts.mean() - mean) < 3 * np.sqrt(mean / n)
        assert abs(counts.var(ddof=1) - mean) < 0.05

    def test_tail_sum_is_negligible_at_small_x(self):
        r = []
        for i in range(200):
            eta = sample_power_tail_poisson(0.3, 10_000, replica_rng(6, "ratio", i))
            r.append(eta[5000:].sum() / eta[:5000].sum())
        assert np.mean(r) < 0.05
        assert np.mean(r) == pytest.approx(TAIL_RATIO_X03, rel=0.25)

    def test_remainder_mean_matches_integral(self):
        x, last = 0.5, 1e-4
        # int_0^last s * x s^(-x-1) ds
        assert remainder_mean(x, last) == pytest.approx(x / (1 - x) * last ** (1 - x))


class TestSamplePd:
    def test_proper_with_remainder(self, rng):
        mp = sample_pd(0.5, 1000, rng)
        assert mp.total_mass == pytest.approx(1.0, abs=1e-12)
        assert 0 < mp.remainder_mass < 0.05
        assert mp.tail_index == 0.5

    def test_mean_top_weight_matches_exact_value(self):
        n = 3000
        top = np.array([sample_pd(0.5, 10_000, replica_rng(9, "top", i)).weights[0] for i in range(n)])
        assert abs(top.mean() - TOP_WEIGHT_PD05) < 3 * top.std(ddof=1) / np.sqrt(n)


class TestEstimator:
    @pytest.mark.parametrize("x", [0.3, 0.5, 0.7])
    def test_slope_recovers_x(self, x):
        est = [estimate_pd_x(sample_pd(x, 10_000, replica_rng(2, f"fit{x}", i)), (100, 10_000), n_boot=0).x_hat
               for i in range(20)]
        assert np.mean(est) == pytest.approx(x, rel=0.05)

    def test_single_replica_within_band(self):
        hits = [abs(estimate_pd_x(sample_pd(0.7, 10_000, replica_rng(3, "band", i)), (100, 10_000),
                                  n_boot=0).x_hat - 0.7) <= 0.05 for i in range(40)]
        assert np.mean(hits) >= 0.95

    def test_bootstrap_stderr(self, rng):
        fit = estimate_pd_x(sample_pd(0.5, 2000, rng), (10, 2000), n_boot=50, rng=rng)
        assert 0 < fit.stderr < 0.1

    def test_digamma_regressor(self, rng):
        fit = estimate_pd_x(sample_pd(0.5, 2000, rng), (1, 200), n_boot=0, regressor="digamma")
        assert 0.3 < fit.x_hat < 0.8

    def test_too_few_ranks(self, rng):
        with pytest.raises(RostError):
            estimate_pd_x(sample_pd(0.5, 100, rng), (1, 5), n_boot=0)

    def test_flat_weights_rejected(self):
        with pytest.raises(RostError):
            estimate_pd_x(np.full(50, 0.01), (1, 50), n_boot=0)


class TestNoiseLaws:
    def test_expectations(self):
        assert StandardNormal().expect(lambda k: np.exp(k)) == pytest.approx(np.exp(0.5), rel=1e-12)
        assert PointMass(2.0).expect(lambda k: k**2) == 4.0
        fd = FiniteDiscrete((0.0, 1.0), (0.25, 0.75))
        assert fd.expect(lambda k: k) == pytest.approx(0.75)

    def test_bad_probabilities(self):
        with pytest.raises(RostError):
            FiniteDiscrete((0.0, 1.0), (0.5, 0.6))


class TestMarkedShift:
    def test_prediction_gaussian_moments(self, rng):
        x = 0.5
        mp = mark_partition(sample_pd(x, 500, rng), [0.5, 0.5], rng)
        res = marked_shift(mp, lambda c, k: np.exp((c + 1.0) * k), StandardNormal(), rng)
        # E[e^{x lam k}] = e^{x^2 lam^2 / 2}
        a, b = np.exp(x**2 / 2), np.exp(x**2 * 4 / 2)
        assert res.predicted_mark_law == pytest.approx([a / (a + b), b / (a + b)], rel=1e-10)
        assert res.predicted_mark_law[1] / res.predicted_mark_law[0] == pytest.approx(np.exp(3 * x**2 / 2))

    def test_identical_multipliers_keep_prior(self, rng):
        mp = mark_partition(sample_pd(0.5, 200, rng), [0.2, 0.3, 0.5], rng)
        res = marked_shift(mp, lambda c, k: np.exp(k), StandardNormal(), rng)
        assert np.array_equal(res.predicted_mark_law, np.array([0.2, 0.3, 0.5]))

    def test_marks_follow_atoms(self, rng):
        mp = mark_partition(sample_pd(0.5, 100, rng), [0.5, 0.5], rng)
        res = marked_shift(mp, lambda c, k: np.exp(k), StandardNormal(), rng)
        assert np.array_equal(res.partition.marks[res.permutation], mp.marks)
        assert res.partition.base.total_mass == pytest.approx(1.0, abs=1e-12)

    def test_infinite_moment_rejected(self, rng):
        mp = mark_partition(sample_pd(0.5, 50, rng), [1.0], rng)
        with pytest.raises(RostError):
            marked_shift(mp, lambda c, k: np.exp(k**2), StandardNormal(), rng)

    def test_top_mark_frequency(self):
        x, n = 0.5, 3000
        top = []
        for i in range(n):
            g = replica_rng(4, "mark", i)
            mp = mark_partition(sample_pd(x, 300, g), [0.5, 0.5], g)
            res = marked_shift(mp, lambda c, k: np.exp((c + 1.0) * k), StandardNormal(), g)
            top.append(res.partition.marks[0])
        pred = res.predicted_mark_law[1]
        assert abs(np.mean(top) - pred) < 3 * np.sqrt(pred * (1 - pred) / n)
