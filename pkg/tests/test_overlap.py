import numpy as np
import pytest

from oracle_values import W2_MASS, W2_MASS_SE
from rostlab.errors import RostError, StructuralError
from rostlab.overlap import (
    OverlapMatrix, Rost, apply_monotone, extract_directing, monotone_map, overlap_histogram,
    paintbox_blocks, q_factorize, schur_power, state_space, ultrametric_check, validate_rost,
)
from rostlab.pointproc import MassPartition
from rostlab.rpc import RpcSpec, sample_rpc
from rostlab.streams import replica_rng


def six_point():
    """Group A = {0, 1}, B1 = {2, 3}, B2 = {4, 5}."""
    q = np.zeros((6, 6))
    q[0, 1] = 0.5
    q[2, 3] = 0.7
    q[4, 5] = 0.9
    q[np.ix_([2, 3], [4, 5])] = 0.2
    q = np.maximum(q, q.T)
    np.fill_diagonal(q, 1.0)
    return q


def uniform_rost(q):
    n = q.shape[0]
    return Rost(MassPartition(np.full(n, 1.0 / n)), OverlapMatrix(q))


class TestValidation:
    def test_constant_negative_is_not_psd(self):
        q = OverlapMatrix.constant(3, -0.9)
        assert q.min_eigenvalue == pytest.approx(-0.8)
        rep = validate_rost(uniform_rost(q.entries))
        assert not rep.valid
        assert any("positive semidefinite" in p for p in rep.issues)

    def test_entry_range(self):
        a = np.eye(2)
        a[0, 1] = a[1, 0] = 1.2
        rep = validate_rost(uniform_rost(a), check_psd=False)
        assert any("entry-range" in p for p in rep.issues)

    def test_valid_rpc(self, rng):
        r, _ = sample_rpc(RpcSpec((0.3, 0.6), (0.2, 0.6), (10, 50), keep=100), rng)
        assert validate_rost(r).valid

    def test_dimension_mismatch_is_reported(self):
        rep = validate_rost(Rost(MassPartition(np.array([0.5, 0.5])), OverlapMatrix.constant(3, 0.1)))
        assert not rep.valid and not rep.dimension_ok

    def test_csv_round_trip(self):
        q = OverlapMatrix(six_point())
        assert np.array_equal(OverlapMatrix.from_csv(q.to_csv()).entries, q.entries)


class TestSchur:
    def test_constant_cube(self):
        p = schur_power(OverlapMatrix.constant(3, 0.9), 3)
        assert p.entries[0, 1] == pytest.approx(0.729)
        assert p.min_eigenvalue == pytest.approx(0.271)

    def test_power_one_is_identity_map(self):
        q = OverlapMatrix(six_point())
        assert np.array_equal(schur_power(q, 1).entries, q.entries)

    def test_rejects_nonpositive_power(self):
        with pytest.raises(RostError):
            schur_power(OverlapMatrix.constant(2, 0.1), 0)


class TestMonotone:
    def test_square_keeps_ultrametric(self, rng):
        r, _ = sample_rpc(RpcSpec((0.3, 0.6), (0.2, 0.6), (10, 50), keep=80), rng)
        t = apply_monotone(r.q, monotone_map("square"))
        vals = set(np.unique(t.offdiag()).round(12))
        assert vals <= {0.04, 0.36}
        assert ultrametric_check(t).ok

    def test_even_map_rejects_negative(self):
        with pytest.raises(RostError):
            apply_monotone(OverlapMatrix.constant(2, -0.1), monotone_map("square"))

    def test_odd_identity_accepts_negative(self):
        t = apply_monotone(OverlapMatrix.constant(2, -0.1), monotone_map("identity"))
        assert t.entries[0, 1] == -0.1


class TestUltrametric:
    def test_rpc_is_ultrametric(self, rng):
        for k in (1, 2, 3):
            spec = RpcSpec((0.3, 0.5, 0.7)[:k], (0.1, 0.4, 0.8)[:k], (6, 8, 30)[:k], keep=150)
            r, _ = sample_rpc(spec, rng)
            assert ultrametric_check(r.q, 0.0).ok

    def test_detects_violation(self):
        a = np.array([[1, 0.8, 0.1], [0.8, 1, 0.8], [0.1, 0.8, 1]])
        v = ultrametric_check(OverlapMatrix(a))
        assert not v.ok and v.n_violations > 0
        assert v.worst_excess == pytest.approx(0.7)


class TestStateSpace:
    def test_rpc_indecomposable(self, rng):
        spec = RpcSpec((0.3, 0.6), (0.2, 0.6), (10, 200), keep=300)
        r, _ = sample_rpc(spec, rng)
        ss = state_space(r.q)
        assert ss.global_values == (0.2, 0.6)
        assert ss.indecomposable

    def test_six_point_factorization(self):
        fac = q_factorize(uniform_rost(six_point()))
        assert len(fac.factors) == 3
        assert fac.rounds == 2  # tags already differ across A, B1, B2; the second pass confirms
        groups = sorted(tuple(f.indices.tolist()) for f in fac.factors)
        assert groups == [(0, 1), (2, 3), (4, 5)]
        assert sum(f.mass_share for f in fac.factors) == pytest.approx(1.0)
        for f in fac.factors:
            assert state_space(f.rost.q).indecomposable

    def test_nested_split_needs_a_second_pass(self):
        # B1 and B2 share the global row set {0.2, 0.7, 0.9} and separate only inside B
        q = six_point()
        q[np.ix_([0, 1], [2, 3])] = 0.9
        q[np.ix_([0, 1], [4, 5])] = 0.7
        q = np.triu(q) + np.triu(q, 1).T
        fac = q_factorize(uniform_rost(q))
        assert sorted(tuple(f.indices.tolist()) for f in fac.factors) == [(0, 1), (2, 3), (4, 5)]
        assert fac.rounds == 3

    def test_indecomposable_is_its_own_factor(self, rng):
        r, _ = sample_rpc(RpcSpec((0.5,), (0.3,), (50,)), rng)
        fac = q_factorize(r)
        assert len(fac.factors) == 1 and fac.rounds == 1


class TestPaintbox:
    def test_blocks_are_level_one_families(self, rng):
        r, tree = sample_rpc(RpcSpec((0.3, 0.6), (0.2, 0.6), (10, 100), keep=200), rng)
        pb = paintbox_blocks(r.q, weights=r.xi.weights)
        fam = tree.level_partitions[1]
        lab = pb.labels(r.n)
        # same block iff same level-one family
        assert np.array_equal(lab[:, None] == lab[None, :], fam[:, None] == fam[None, :])
        assert pb.densities.sum() == pytest.approx(1.0)

    def test_non_transitive_relation(self):
        a = np.array([[1, 0.8, 0.1], [0.8, 1, 0.8], [0.1, 0.8, 1]])
        with pytest.raises(StructuralError):
            paintbox_blocks(OverlapMatrix(a))


class TestDirecting:
    def test_rescaled_values(self, rng):
        r, _ = sample_rpc(RpcSpec((0.4, 0.8), (0.2, 0.6), (20, 300), keep=400), rng)
        d = extract_directing(r)
        assert d.scale == 0.6
        vals = np.unique(d.q_tilde.offdiag())
        assert np.all(vals == 0.2 / 0.6)
        assert d.xi_tilde.total_mass == pytest.approx(1.0)
        assert d.mass_weights.sum() == pytest.approx(1.0)

    def test_rejects_zero_top_overlap(self):
        with pytest.raises(RostError):
            extract_directing(uniform_rost(np.eye(3)))


class TestHistogram:
    def test_fast_path_matches_dense(self, rng):
        r, _ = sample_rpc(RpcSpec((0.3, 0.6), (0.2, 0.6), (10, 100), keep=200), rng)
        fast = overlap_histogram(r)
        _ = r.q  # materialise the matrix
        dense = overlap_histogram(Rost(r.xi, r.q))
        assert fast.values == pytest.approx(dense.values)
        assert fast.masses == pytest.approx(dense.masses, abs=1e-12)

    def test_level_mass_matches_oracle(self):
        spec = RpcSpec((0.4, 0.8), (0.2, 0.6), (60, 1000), keep=1000)
        n = 300
        m = np.array([overlap_histogram(sample_rpc(spec, replica_rng(4, "w2", i))[0]).mass_at(0.6)
                      for i in range(n)])
        se = np.hypot(m.std(ddof=1) / np.sqrt(n), W2_MASS_SE)
        assert abs(m.mean() - W2_MASS) < 3 * se
