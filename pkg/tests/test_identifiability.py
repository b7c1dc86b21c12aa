import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treereg.identifiability import (
    SingularMatrixError,
    SparsityPattern,
    check_assumptions,
    find_nonzero_permutation,
    fit_linear_map,
    is_perm_scaling,
    l0_norm,
    mixing_verdict,
    normalize_rows_maxabs,
)
from treereg.verification import random_one_sparse_delta, random_perm_scaling


class TestL0Norm:
    def test_zero_matrix(self):
        assert l0_norm(np.zeros((4, 3))) == 0

    def test_identity(self):
        assert l0_norm(np.eye(5)) == 5

    def test_tolerance_cutoff(self):
        m = np.array([[1e-9, 0.5]])
        assert l0_norm(m, tol=1e-6) == 1
        assert l0_norm(m, tol=0.0) == 2

    def test_negative_tol_rejected(self):
        with pytest.raises(ValueError):
            l0_norm(np.eye(2), tol=-1.0)


class TestSparsityPattern:
    def test_zero_matrix_empty(self):
        assert len(SparsityPattern.of(np.zeros((3, 3)))) == 0

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25)
    def test_monotone_in_tol(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(4, 4)) * (rng.random((4, 4)) < 0.6)
        lo = SparsityPattern.of(m, tol=0.01)
        hi = SparsityPattern.of(m, tol=0.5)
        assert hi.indices <= lo.indices


class TestCheckAssumptions:
    def test_one_sparse_and_sufficient(self):
        report = check_assumptions(np.array([[1.0, 0], [0, 2.0], [3.0, 0]]))
        assert report.one_sparse
        assert report.sufficient_perturbations
        assert report.witness_arcs == (0, 1)
        assert report.violating_rows == ()

    def test_dense_row_violates_one_sparse(self):
        report = check_assumptions(np.array([[1.0, 1.0], [0, 2.0]]))
        assert not report.one_sparse
        assert report.violating_rows == (0,)

    def test_untouched_column_violates_sufficiency(self):
        report = check_assumptions(np.array([[1.0, 0], [2.0, 0]]))
        assert report.one_sparse
        assert not report.sufficient_perturbations
        assert report.witness_arcs == (0, None)


class TestFindNonzeroPermutation:
    def test_identity(self):
        assert find_nonzero_permutation(np.eye(4)) == (0, 1, 2, 3)

    def test_anti_diagonal(self):
        assert find_nonzero_permutation(np.fliplr(np.eye(4))) == (3, 2, 1, 0)

    def test_random_invertible_six_by_six_matches_brute_force(self):
        rng = np.random.default_rng(0)
        found = 0
        while found < 60:
            l = rng.normal(size=(6, 6))
            l[rng.random((6, 6)) < 0.5] = 0.0
            if abs(np.linalg.det(l)) < 1e-9:
                continue
            found += 1
            perm = find_nonzero_permutation(l)
            assert all(abs(l[i, perm[i]]) > 1e-6 for i in range(6))
            brute = [
                p for p in itertools.permutations(range(6))
                if all(abs(l[i, p[i]]) > 1e-6 for i in range(6))
            ]
            assert perm in brute

    def test_singular_pattern_reported(self):
        l = np.array([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(SingularMatrixError):
            find_nonzero_permutation(l)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            find_nonzero_permutation(np.ones((2, 3)))


class TestIsPermScaling:
    def test_diagonal(self):
        assert is_perm_scaling(np.diag([2.0, -1.0]))

    def test_upper_triangular_is_not(self):
        assert not is_perm_scaling(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_random_construction(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert is_perm_scaling(random_perm_scaling(5, rng))

    def test_learned_tolerance_after_row_normalization(self):
        l = np.array([[5.0, 0.3], [0.1, -2.0]])
        scaled = normalize_rows_maxabs(l)
        assert is_perm_scaling(scaled, tol=0.1)


class TestMixingVerdict:
    def test_sparsity_increasing_mixing_vacuous(self):
        delta = np.array([[1.0, 0], [0, 2.0], [3.0, 0]])
        l = np.array([[1.0, 1.0], [0.0, 1.0]])
        v = mixing_verdict(delta, l)
        assert np.array_equal(delta @ l, [[1, 1], [0, 2], [3, 3]])
        assert v.assumptions_hold
        assert v.l0_delta == 3 and v.l0_mixed == 5
        assert not v.sparsity_nonincreasing
        assert not v.perm_scaling
        assert v.implication_holds  # vacuously

    def test_perm_scaling_preserves_and_satisfies(self):
        delta = np.array([[1.0, 0], [0, 2.0], [3.0, 0]])
        l = np.diag([5.0, -2.0]) @ np.array([[0.0, 1.0], [1.0, 0.0]])
        v = mixing_verdict(delta, l)
        assert v.l0_mixed == 3
        assert v.sparsity_nonincreasing
        assert v.perm_scaling
        assert v.implication_holds
        assert v.lost_per_column == (0, 0) and v.gained_per_column == (0, 0)

    def test_two_sparse_counterexample_outside_assumptions(self):
        # a row with linearly dependent support lets a genuine mixing cancel
        # a non-zero: sparsity does not increase, but the one-per-row
        # assumption fails, so the implication is not claimed
        delta = np.array([[1.0, -1.0], [0.0, 2.0]])
        l = np.array([[1.0, 1.0], [0.0, 1.0]])
        v = mixing_verdict(delta, l)
        assert np.array_equal(delta @ l, [[1, 0], [0, 2]])
        assert not v.assumptions_hold
        assert v.sparsity_nonincreasing
        assert not v.perm_scaling
        assert v.implication_holds  # vacuous: premise fails

    def test_one_sparse_columns_never_lose_nonzeros(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            delta = random_one_sparse_delta(10, 4, rng)
            l = rng.normal(size=(4, 4))
            if np.linalg.cond(l) > 1e8:
                continue
            v = mixing_verdict(delta, l)
            assert v.lost_per_column == (0, 0, 0, 0)
            # column-wise monotonicity under the matched permutation
            mixed = delta @ l
            for i in range(4):
                src = l0_norm(delta[:, [v.column_permutation[i]]])
                dst = l0_norm(mixed[:, [i]])
                assert dst >= src

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30)
    def test_perm_scaling_preserves_l0_for_any_matrix(self, seed):
        rng = np.random.default_rng(seed)
        delta = rng.normal(size=(6, 4)) * (rng.random((6, 4)) < 0.5)
        l = random_perm_scaling(4, rng)
        assert l0_norm(delta @ l) == l0_norm(delta)

    def test_json_serializable(self):
        delta = np.array([[1.0, 0], [0, 2.0]])
        v = mixing_verdict(delta, np.eye(2))
        parsed = json.loads(v.to_json())
        assert parsed["perm_scaling"] is True
        assert parsed["implication_holds"] is True

    def test_singular_l_rejected(self):
        delta = np.array([[1.0, 0], [0, 2.0]])
        with pytest.raises(SingularMatrixError):
            mixing_verdict(delta, np.zeros((2, 2)))


class TestFitLinearMap:
    def test_identity(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(50, 4))
        l_hat, resid = fit_linear_map(z, z)
        assert np.allclose(l_hat, np.eye(4), atol=1e-10)
        assert resid < 1e-12

    def test_recovers_inverse_of_mixing(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(80, 4))
        a = rng.normal(size=(4, 4))
        z_hat = z @ a.T
        l_hat, resid = fit_linear_map(z_hat, z)
        assert resid < 1e-9
        assert np.allclose(l_hat, np.linalg.inv(a), atol=1e-8)

    def test_rank_deficient_rejected(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(30, 3))
        z_hat = z.copy()
        z_hat[:, 2] = z_hat[:, 0]
        with pytest.raises(Exception):
            fit_linear_map(z_hat, z)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            fit_linear_map(np.zeros((3, 4)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            fit_linear_map(np.zeros((2, 4)), np.zeros((2, 4)))
