import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflow import kernels as K


def rng(seed=0):
    return np.random.default_rng(seed)


class TestGemmAcc:
    def test_identity_left(self):
        b = rng().random((2, 2))
        assert np.array_equal(K.gemm_acc(np.zeros((2, 2)), np.eye(2), b), b)

    def test_2x2_hand_value(self):
        # scalar triple loop gives [[19, 22], [43, 50]]
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        got = K.gemm_acc(np.zeros((2, 2)), a, b)
        assert np.array_equal(got, np.array([[19.0, 22.0], [43.0, 50.0]]))

    def test_negative_sign_cancels(self):
        got = K.gemm_acc(np.eye(2), np.eye(2), np.eye(2), sign=-1)
        assert np.array_equal(got, np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(K.KernelError):
            K.gemm_acc(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


class TestTrsm:
    def test_identity(self):
        b = rng(1).random((3, 2))
        assert np.allclose(K.trsm_tile(np.eye(3), b), b)

    def test_2x2_hand_value(self):
        l = np.array([[2.0, 0.0], [1.0, 1.0]])
        b = np.array([[2.0], [2.0]])
        assert np.allclose(K.trsm_tile(l, b), np.array([[1.0], [1.0]]))

    def test_singular_rejected(self):
        with pytest.raises(K.KernelError):
            K.trsm_tile(np.array([[0.0, 0.0], [1.0, 1.0]]), np.eye(2))

    def test_residual_bound(self):
        g = rng(2)
        l = np.tril(g.random((6, 6))) + 6 * np.eye(6)
        b = g.random((6, 4))
        x = K.trsm_tile(l, b)
        assert np.linalg.norm(l @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_trsmt_right_transposed_solve(self):
        g = rng(3)
        l = np.tril(g.random((4, 4))) + 4 * np.eye(4)
        b = g.random((4, 4))
        x = K.trsmt_tile(b, l)
        assert np.linalg.norm(x @ l.T - b) <= 1e-10 * np.linalg.norm(b)


class TestSyrk:
    def test_zero_update(self):
        c = rng(4).random((3, 3))
        assert np.array_equal(K.syrk_acc(c, np.zeros((3, 3))), c)

    def test_identity_cancels(self):
        assert np.array_equal(K.syrk_acc(np.eye(2), np.eye(2)), np.zeros((2, 2)))

    def test_matches_gemm_composition(self):
        g = rng(5)
        c, a = g.random((3, 3)), g.random((3, 3))
        assert np.array_equal(K.syrk_acc(c, a), K.gemm_acc(c, a, a.T, sign=-1))


class TestChol:
    def test_identity(self):
        assert np.array_equal(K.chol_tile(np.eye(3)), np.eye(3))

    def test_2x2_hand_value(self):
        a = np.array([[4.0, 2.0], [2.0, 5.0]])
        assert np.allclose(K.chol_tile(a), np.array([[2.0, 0.0], [1.0, 2.0]]))

    def test_indefinite_rejected(self):
        with pytest.raises(K.KernelError):
            K.chol_tile(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_factor_roundtrip(self):
        g = rng(6)
        l = np.tril(g.random((5, 5))) + 5 * np.eye(5)
        a = l @ l.T
        got = K.chol_tile(a)
        assert np.linalg.norm(got @ got.T - a) <= 1e-10 * np.linalg.norm(a)


class TestFlash:
    def test_single_tile_matches_dense(self):
        g = rng(7)
        q, k, v = g.standard_normal((3, 4)), g.standard_normal((5, 4)), g.standard_normal((5, 4))
        s = (q @ k.T) / np.sqrt(4)
        state = K.flash_update(K.flash_init(3, 4), s, v)
        assert K.rel_error(K.softmax_fin(state), K.oracle_attention(q, k, v)) <= 1e-12

    def test_zero_mass_tile_keeps_state(self):
        g = rng(8)
        q, k, v = g.standard_normal((2, 3)), g.standard_normal((4, 3)), g.standard_normal((4, 3))
        state = K.softmax_step(K.flash_init(2, 3), q, k, v)
        dead = K.flash_update(state, np.full((2, 4), -1e6), g.standard_normal((4, 3)))
        assert K.rel_error(K.softmax_fin(dead), K.softmax_fin(state)) <= 1e-12

    def test_two_tile_split_matches_one_tile(self):
        g = rng(9)
        q, k, v = g.standard_normal((3, 4)), g.standard_normal((6, 4)), g.standard_normal((6, 4))
        one = K.softmax_step(K.flash_init(3, 4), q, k, v)
        two = K.softmax_step(K.flash_init(3, 4), q, k[:3], v[:3])
        two = K.softmax_step(two, q, k[3:], v[3:])
        assert K.rel_error(K.softmax_fin(two), K.softmax_fin(one)) <= 1e-12

    @given(st.integers(1, 4), st.lists(st.integers(1, 3), min_size=1, max_size=4),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_tiling_invariance(self, d, splits, seed):
        g = rng(seed)
        nk = sum(splits)
        q, k, v = g.standard_normal((2, d)), g.standard_normal((nk, d)), g.standard_normal((nk, d))
        state = K.flash_init(2, d)
        at = 0
        for width in splits:
            state = K.softmax_step(state, q, k[at:at + width], v[at:at + width])
            at += width
        assert K.rel_error(K.softmax_fin(state), K.oracle_attention(q, k, v)) <= 1e-12


class TestOracles:
    def test_matmul_identity(self):
        x = rng(10).random((4, 4))
        assert np.allclose(K.oracle_matmul(np.eye(4), x), x)

    def test_matmul_vs_numpy(self):
        g = rng(11)
        a, b = g.random((8, 6)), g.random((6, 4))
        assert K.rel_error(K.oracle_matmul(a, b), a @ b) <= 1e-13

    def test_blocked_matmul_vs_dense(self):
        g = rng(12)
        a, b = g.random((8, 8)), g.random((8, 8))
        assert K.rel_error(K.oracle_matmul_blocked(a, b, 2), K.oracle_matmul(a, b)) <= 1e-13

    def test_trsm_residual(self):
        g = rng(13)
        l = np.tril(g.random((8, 8))) + 8 * np.eye(8)
        b = g.random((8, 8))
        x = K.oracle_trsm(l, b)
        assert np.linalg.norm(l @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_cholesky_recovers_factor(self):
        g = rng(14)
        l = np.tril(g.random((6, 6))) + 6 * np.eye(6)
        got = K.oracle_cholesky(l @ l.T)
        assert K.rel_error(got, l) <= 1e-10

    def test_prefix_sum(self):
        a = rng(15).random((6, 3))
        got = K.oracle_prefix_sum(a)
        assert np.allclose(got[3], a[:4].sum(axis=0))


class TestBlockedUnblockedAgreement:
    @pytest.mark.parametrize("n,tile", [(2, 2), (4, 2), (4, 4), (3, 1)])
    def test_tiled_cholesky_composition(self, n, tile):
        # compose tile kernels along the panel recurrence and compare with the
        # dense factorization
        g = rng(16 + n + tile)
        dim = n * tile
        m = g.random((dim, dim))
        a = m @ m.T + dim * np.eye(dim)
        lgot = np.zeros_like(a)

        def blk(mat, i, j):
            return mat[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile]

        for j in range(n):
            acc = np.zeros((tile, tile))
            for k in range(j):
                acc = K.syrk_step(acc, blk(lgot, j, k))
            ljj = K.chol_tile(blk(a, j, j) - acc)
            blk(lgot, j, j)[:] = ljj
            for i in range(j + 1, n):
                acc = np.zeros((tile, tile))
                for k in range(j):
                    acc = K.gemm_acc(acc, blk(lgot, i, k), blk(lgot, j, k).T)
                blk(lgot, i, j)[:] = K.trsmt_tile(blk(a, i, j) - acc, ljj)
        assert K.rel_error(lgot, K.oracle_cholesky(a)) <= 1e-10

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_gemm_chain_bitwise_vs_blocked_oracle(self, n, tile, seed):
        g = rng(seed)
        dim = n * tile
        a, b = g.random((dim, dim)), g.random((dim, dim))
        blocked = K.oracle_matmul_blocked(a, b, tile)
        # replay the same chain through gemm_acc: must be bit-identical
        c = np.zeros((dim, dim))
        for i in range(0, dim, tile):
            for j in range(0, dim, tile):
                acc = np.zeros((tile, tile))
                for k in range(0, dim, tile):
                    acc = K.gemm_acc(acc, a[i:i + tile, k:k + tile], b[k:k + tile, j:j + tile])
                c[i:i + tile, j:j + tile] = acc
        assert np.array_equal(c, blocked)
