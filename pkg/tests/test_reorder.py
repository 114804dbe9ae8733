"""Router, assignment, and permutation tests. The permutation suite checks
bijectivity, grouping, stability (against a brute-force stable sort), and
the exact restore round trip; gradient contracts are checked against
central finite differences."""

import numpy as np
import pytest

from semamil import autodiff as ad
from semamil.autodiff import Tensor
from semamil.reorder import (Assignment, Permutation, RouterParams, assign,
                             apply_permutation, build_permutation,
                             restore_order, router_auxiliary_loss,
                             router_forward)


def identity_router(d: int, n_clusters: int) -> RouterParams:
    W1 = np.zeros((d, d))
    np.fill_diagonal(W1, 1.0)
    W2 = np.zeros((n_clusters, d))
    np.fill_diagonal(W2, 1.0)
    return RouterParams(W1=Tensor(W1), W2=Tensor(W2))


class TestRouter:
    def test_zero_input_zero_output(self):
        params = identity_router(3, 2)
        out = router_forward(params, np.zeros((5, 3)))
        assert np.all(out.data == 0.0)

    def test_identity_weights_apply_gelu(self):
        params = identity_router(2, 2)
        out = router_forward(params, np.array([[1.0, -1.0]]))
        np.testing.assert_allclose(out.data[0],
                                   [0.8413447460685429, -0.15865525393145707],
                                   atol=1e-12)

    def test_single_row(self):
        params = identity_router(2, 2)
        out = router_forward(params, np.array([[0.5, 0.25]]))
        assert out.shape == (1, 2)

    def test_shape_mismatch_rejected(self):
        params = identity_router(3, 2)
        with pytest.raises(ValueError):
            router_forward(params, np.zeros((5, 4)))


class TestAssign:
    def test_uniform_row_ties_to_lowest(self):
        a = assign(np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(a.P.data[0], [0.5, 0.5])
        assert a.c[0] == 0

    def test_softmax_closed_form(self):
        a = assign(np.array([[10.0, 0.0]]))
        expected = np.exp([10.0, 0.0]) / np.exp([10.0, 0.0]).sum()
        np.testing.assert_allclose(a.P.data[0], expected, rtol=1e-12)
        assert a.P.data[0, 0] == pytest.approx(0.9999546, abs=1e-6)
        assert a.c[0] == 0

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        a = assign(rng.normal(0, 3, (40, 6)))
        np.testing.assert_allclose(a.P.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(a.c, a.P.data.argmax(axis=1))

    def test_gumbel_deterministic_per_seed(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(0, 1, (10, 4))
        a = assign(Z, mode="gumbel", tau=0.7, seed=99)
        b = assign(Z, mode="gumbel", tau=0.7, seed=99)
        assert np.array_equal(a.P.data, b.P.data)
        assert np.array_equal(a.c, b.c)
        c = assign(Z, mode="gumbel", tau=0.7, seed=100)
        assert not np.array_equal(a.P.data, c.P.data)

    def test_gumbel_needs_positive_tau(self):
        with pytest.raises(ValueError):
            assign(np.zeros((2, 2)), mode="gumbel", tau=0.0)

    def test_gumbel_grad_matches_finite_differences(self):
        """dP/dZ in gumbel mode, rel err < 1e-5 at float64."""
        rng = np.random.default_rng(5)
        Z = Tensor(rng.normal(0, 1, (6, 4)), requires_grad=True)
        w = rng.normal(0, 1, (6, 4))
        ad.tsum(ad.mul(assign(Z, mode="gumbel", tau=0.5, seed=3).P, w)).backward()
        eps = 1e-6
        numeric = np.zeros_like(Z.data)
        flat, nflat = Z.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float((assign(Tensor(Z.data), mode="gumbel", tau=0.5, seed=3).P.data * w).sum())
            flat[i] = orig - eps
            lo = float((assign(Tensor(Z.data), mode="gumbel", tau=0.5, seed=3).P.data * w).sum())
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        rel = np.abs(Z.grad - numeric).max() / np.abs(numeric).max()
        assert rel < 1e-5


def brute_force_stable_argsort(c):
    """Oracle: decorate-sort-undecorate with the index as tiebreaker."""
    return np.array([i for _, i in sorted((v, i) for i, v in enumerate(c))])


class TestPermutation:
    def test_worked_example(self):
        perm = build_permutation([2, 0, 1, 0])
        assert perm.pi.tolist() == [1, 3, 2, 0]
        assert perm.pi_inv.tolist() == [3, 0, 2, 1]
        assert np.array_equal(perm.pi_inv[perm.pi], np.arange(4))

    def test_all_equal_gives_identity(self):
        perm = build_permutation([3, 3, 3, 3, 3])
        assert perm.pi.tolist() == [0, 1, 2, 3, 4]

    def test_two_element_swap_self_inverse(self):
        perm = build_permutation([1, 0])
        assert perm.pi.tolist() == [1, 0]
        assert perm.pi_inv.tolist() == [1, 0]

    def test_random_suite_bijectivity_grouping_stability(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            L = int(rng.integers(1, 257))
            c = rng.integers(0, rng.integers(1, 9), size=L)
            perm = build_permutation(c)
            assert np.array_equal(np.sort(perm.pi), np.arange(L))
            grouped = c[perm.pi]
            assert np.all(np.diff(grouped) >= 0)
            assert np.array_equal(perm.pi, brute_force_stable_argsort(c))

    def test_apply_and_restore_roundtrip_exact(self):
        rng = np.random.default_rng(7)
        X = rng.normal(0, 1, (31, 5))
        perm = build_permutation(rng.integers(0, 4, size=31))
        assert np.array_equal(restore_order(apply_permutation(X, perm), perm), X)

    def test_apply_rows_moved(self):
        X = np.array([[1.0, 1], [2, 2], [3, 3]])
        out = apply_permutation(X, np.array([2, 0, 1]))
        assert out.tolist() == [[3, 3], [1, 1], [2, 2]]

    def test_identity_noop(self):
        X = np.arange(12.0).reshape(4, 3)
        assert np.array_equal(apply_permutation(X, np.arange(4)), X)

    def test_non_bijection_rejected(self):
        with pytest.raises(ValueError):
            apply_permutation(np.zeros((3, 2)), np.array([0, 0, 2]))
        with pytest.raises(ValueError):
            Permutation(pi=np.array([0, 0]), pi_inv=np.array([0, 1]))

    def test_backward_moves_gradient_rows(self):
        """Hard permutation backward = constant rearrangement by pi_inv."""
        rng = np.random.default_rng(9)
        X = Tensor(rng.normal(0, 1, (6, 3)), requires_grad=True)
        perm = build_permutation(rng.integers(0, 3, size=6))
        w = rng.normal(0, 1, (6, 3))
        ad.tsum(ad.mul(apply_permutation(X, perm), w)).backward()
        assert np.array_equal(X.grad, w[perm.pi_inv])


class TestAuxiliaryLoss:
    def test_sharp_balanced_assignment_is_minimal(self):
        # one-hot rows spread evenly over clusters: entropy ~ 0, KL ~ 0
        P_sharp = Tensor(np.where(np.eye(4, dtype=bool)[[0, 1, 2, 3]], 1 - 3e-12, 1e-12))
        sharp = float(router_auxiliary_loss(P_sharp).data)
        P_flat = Tensor(np.full((4, 4), 0.25))
        flat = float(router_auxiliary_loss(P_flat).data)
        P_collapsed = Tensor(np.where(np.eye(4, dtype=bool)[[0, 0, 0, 0]], 1 - 3e-12, 1e-12))
        collapsed = float(router_auxiliary_loss(P_collapsed).data)
        assert sharp < flat and sharp < collapsed

    def test_gradient_flows_to_router(self):
        rng = np.random.default_rng(3)
        params = RouterParams(
            W1=Tensor(rng.normal(0, 1, (4, 3)), requires_grad=True),
            W2=Tensor(rng.normal(0, 1, (5, 4)), requires_grad=True))
        Z = router_forward(params, rng.normal(0, 1, (7, 3)))
        router_auxiliary_loss(assign(Z).P).backward()
        assert params.W1.grad is not None and np.abs(params.W1.grad).max() > 0
