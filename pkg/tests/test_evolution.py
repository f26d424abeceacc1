import numpy as np
import pytest
from scipy import stats

from oracle_values import C_LOGCOSH, G1_LOGCOSH, LOGCOSH_MEAN, LOGCOSH_SD, P1_LOGCOSH, SWAP_PROBABILITY
from rostlab.errors import RostError, StructuralError
from rostlab.evolution import (
    FREE, EvolutionConfig, c_psi, c_psi_derivative_check, dense_factor, evolve, evolve_partition_free,
    g_moment, hat_q, make_psi, psi_tilde, sample_field_dense,
)
from rostlab.overlap import OverlapMatrix, Rost
from rostlab.pointproc import MassPartition, sample_pd
from rostlab.rpc import RpcSpec, pd_rost, sample_rpc
from rostlab.streams import replica_rng

LOGCOSH = make_psi("logcosh")
LOGCOSH_N = make_psi("logcosh", normalized=True)


def two_atoms(q=0.5):
    return Rost(MassPartition(np.array([0.6, 0.4])), OverlapMatrix.constant(2, q))


class TestPsi:
    def test_aliases(self):
        assert make_psi("log-cosh") == make_psi("log_cosh") == LOGCOSH

    def test_logcosh_is_stable_for_large_arguments(self):
        assert LOGCOSH(np.array([800.0]))[0] == pytest.approx(800 - np.log(2))

    def test_normalisation_constants(self):
        assert LOGCOSH_N.shift == pytest.approx(LOGCOSH_MEAN, abs=1e-12)
        assert LOGCOSH_N.norm == pytest.approx(LOGCOSH_SD, abs=1e-12)
        m, m2 = LOGCOSH_N.moments()
        assert m == pytest.approx(0.0, abs=1e-12) and m2 == pytest.approx(1.0, abs=1e-12)

    def test_tabulated_matches_linear(self):
        z = np.linspace(-3, 3, 13)
        t = make_psi("tabulated", table=(z, 2 * z))
        assert t(np.array([0.25, 5.0])) == pytest.approx([0.5, 10.0])

    def test_unknown_kind(self):
        with pytest.raises(RostError):
            make_psi("cubic")


class TestMoments:
    def test_g_one_logcosh(self):
        assert g_moment(LOGCOSH, 1.0) == pytest.approx(G1_LOGCOSH, abs=1e-10)

    def test_g_linear_closed_form(self):
        assert g_moment(make_psi("linear", 0.7), 2.0) == pytest.approx(np.exp(0.98), rel=1e-12)

    def test_g_diverges(self):
        with pytest.raises(RostError):
            g_moment(make_psi("tabulated", table=((-1.0, 0.0, 1.0), (1.0, 0.0, 1.0))), 1e6)


class TestPsiTilde:
    def test_linear_closed_form(self):
        psi = make_psi("linear", 2.0)
        assert psi_tilde(psi, 0.5, 0.64, np.sqrt(0.64) * 1.0) == pytest.approx(0.98, abs=1e-12)

    def test_logcosh_oracle(self):
        assert psi_tilde(LOGCOSH, 0.5, 0.5, 0.3) == pytest.approx(P1_LOGCOSH, abs=1e-10)

    def test_rho_one_is_pointwise(self):
        assert psi_tilde(LOGCOSH, 0.5, 1.0, 0.3) == pytest.approx(0.5 * np.log(np.cosh(0.3)))

    def test_vectorised(self):
        y = np.array([[0.1, 0.2], [0.3, 0.4]])
        out = psi_tilde(LOGCOSH, 0.5, 0.5, y)
        assert out.shape == (2, 2)
        assert out[1, 0] == pytest.approx(P1_LOGCOSH, abs=1e-10)


class TestCovariance:
    @pytest.mark.parametrize("q", sorted(C_LOGCOSH))
    def test_oracle_values(self, q):
        assert c_psi(LOGCOSH_N, q) == pytest.approx(C_LOGCOSH[q], abs=1e-8)

    def test_endpoints(self):
        assert c_psi(LOGCOSH_N, 0.0) == pytest.approx(0.0, abs=1e-10)
        assert c_psi(LOGCOSH_N, 1.0) == pytest.approx(1.0, abs=1e-8)

    def test_requires_normalised(self):
        with pytest.raises(RostError):
            c_psi(LOGCOSH, 0.5)

    @pytest.mark.parametrize("q", [0.1, 0.3, 0.5])
    def test_derivative_identity(self, q):
        assert c_psi_derivative_check(LOGCOSH_N, q, 1e-3) < 1e-5

    def test_hat_q_decays_to_identity(self):
        h = hat_q(OverlapMatrix.constant(3, 0.8), 32, LOGCOSH_N)
        assert np.max(np.abs(h.offdiag())) < 0.02
        assert np.all(np.diag(h.entries) == 1.0)

    def test_hat_q_r2(self):
        h = hat_q(OverlapMatrix.constant(2, 0.8), 2, LOGCOSH_N)
        assert h.entries[0, 1] == pytest.approx(C_LOGCOSH[0.64], abs=1e-8)


class TestDenseField:
    def test_constant_correlation(self):
        q = OverlapMatrix.constant(4, 0.5)
        f = sample_field_dense(q, 2, np.random.default_rng(1), size=20_000)
        c = np.corrcoef(f, rowvar=False)
        assert np.max(np.abs(c[np.triu_indices(4, 1)] - 0.25)) < 3 * (1 - 0.25**2) / np.sqrt(20_000) * 1.5

    def test_matches_tree_field(self):
        spec = RpcSpec((0.3, 0.6), (0.3, 0.7), (3, 4))
        r, tree = sample_rpc(spec, replica_rng(11, "tree", 0))
        d = sample_field_dense(r.q, 1, np.random.default_rng(2), size=10_000)
        assert np.max(np.abs(np.cov(d, rowvar=False) - r.q.entries)) < 0.05

    def test_indefinite_raises(self):
        with pytest.raises(StructuralError):
            dense_factor(OverlapMatrix.constant(3, -0.9), 1)

    def test_jitter_handles_singular(self):
        lf = dense_factor(OverlapMatrix.constant(3, 1.0), 1)
        assert np.allclose(lf @ lf.T, np.ones((3, 3)), atol=1e-6)


class TestEvolve:
    def test_conjugation_is_exact(self, rng):
        r, _ = sample_rpc(RpcSpec((0.3, 0.6), (0.2, 0.6), (8, 40), keep=120), rng)
        q0 = r.q.entries.copy()
        res = evolve(r, EvolutionConfig(LOGCOSH, r=2), rng)
        assert np.array_equal(res.evolved.q.entries, q0[np.ix_(res.origin, res.origin)])
        assert np.array_equal(res.permutation[res.origin], np.arange(r.n))

    def test_mass_and_order(self, rng):
        r = pd_rost(sample_pd(0.5, 300, rng), 0.3)
        res = evolve(r, EvolutionConfig(make_psi("linear"), r=1, steps=3), rng)
        w = res.evolved.xi.weights
        assert np.all(np.diff(w) <= 0)
        assert w.sum() + res.evolved.xi.remainder_mass == pytest.approx(1.0, abs=1e-12)

    def test_constant_psi_is_identity(self, rng):
        r = two_atoms()
        res = evolve(r, EvolutionConfig(make_psi("linear", 0.0)), rng)
        assert np.array_equal(res.evolved.xi.weights, r.xi.weights)
        assert np.array_equal(res.origin, [0, 1])

    def test_tree_and_dense_samplers_agree_in_law(self):
        spec = RpcSpec((0.3, 0.6), (0.3, 0.7), (4, 30))
        base, _ = sample_rpc(spec, replica_rng(1, "base", 0))
        tops = {}
        for mode in ("tree", "dense"):
            cfg = EvolutionConfig(make_psi("linear"), r=1, field_sampler=mode)
            tops[mode] = [evolve(base, cfg, replica_rng(2, mode, i)).evolved.xi.weights[0] for i in range(1500)]
        assert stats.ks_2samp(tops["tree"], tops["dense"]).pvalue > 0.001

    def test_swap_probability(self):
        cfg = EvolutionConfig(make_psi("linear"), r=1)
        r = two_atoms(0.5)
        n = 20_000
        swaps = np.mean([evolve(r, cfg, replica_rng(3, "swap", i)).origin[0] == 1 for i in range(n)])
        assert abs(swaps - SWAP_PROBABILITY) < 3 * np.sqrt(SWAP_PROBABILITY * (1 - SWAP_PROBABILITY) / n)

    def test_free_evolution_ignores_overlaps(self, rng):
        res = evolve(two_atoms(0.99), EvolutionConfig(make_psi("linear"), r=FREE), rng)
        assert res.evolved.q.entries[0, 1] == 0.99

    def test_increment_history(self, rng):
        cfg = EvolutionConfig(make_psi("linear"), steps=4, record_increments=True)
        res = evolve(two_atoms(), cfg, rng)
        assert res.increment_history.shape == (4, 2)
        assert res.increments == pytest.approx(res.increment_history.sum(axis=0))

    def test_bad_config(self):
        with pytest.raises(RostError):
            EvolutionConfig(LOGCOSH, r=0)
        with pytest.raises(RostError):
            EvolutionConfig(LOGCOSH, steps=0)


class TestFreePartition:
    def test_tracking_is_consistent(self, rng):
        mp = sample_pd(0.5, 200, rng)
        out, origin, hist = evolve_partition_free(mp, make_psi("linear"), 3, rng, track=True)
        expected = np.log(mp.weights[origin]) + hist.sum(axis=0)[origin]
        diffs = np.log(out.weights) - expected
        assert np.ptp(diffs) < 1e-9  # common normaliser only

    def test_pd_is_preserved_by_free_evolution(self):
        before = [sample_pd(0.5, 400, replica_rng(5, "b", i)).weights[0] for i in range(1500)]
        after = [evolve_partition_free(sample_pd(0.5, 400, replica_rng(5, "a", i)), LOGCOSH, 1,
                                       replica_rng(5, "e", i)).weights[0] for i in range(1500)]
        assert stats.ks_2samp(before, after).pvalue > 0.001
