import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_grad, grad_of
from lrcnet import autodiff as ad
from lrcnet import layers as L
from lrcnet.gradcheck import rel_error


def intra_oracle(S, filters):
    """Windowed convolution over scales written out loop by loop.

    S: [M, T, D]. Each bank holds F filters of window h; filter f reads
    weight W[i * D + d, f] for scale offset i and channel d.
    """
    M, T, D = S.shape
    out = []
    for j in range(M):
        row = []
        for W, b in filters:
            W, b = W.data, b.data
            h = W.shape[0] // D
            for f in range(W.shape[1]):
                c = []
                for a in range(T - h + 1):
                    acc = 0.0
                    for i in range(h):
                        for d in range(D):
                            acc += W[i * D + d, f] * S[j, a + i, d]
                    c.append(max(acc + b[f], 0.0))
                row.append(max(c))
        out.append(row)
    return np.array(out)


def inter_oracle(R, V):
    M, D = R.shape
    out = np.zeros((M, D))
    for j in range(M):
        num = np.zeros(D)
        den = 0.0
        for b in range(M):
            num += V[j, b] * R[b]
            den += V[j, b]
        out[j] = num / den
    return out


def sequential_mean(R):
    """Column mean with rows added strictly in order, then one division."""
    acc = R[0].copy()
    for row in R[1:]:
        acc += row
    return acc / len(R)


def random_filters(rng, D, kinds):
    filters = L.init_intra_filters(rng, D, kinds)
    for _, b in filters:
        b.data[...] = rng.uniform(-0.5, 0.5, b.shape)
    return filters


class TestIntra:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.data(), st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, M, T, D, data, seed):
        r = np.random.default_rng(seed)
        kinds = data.draw(st.integers(1, T))
        filters = random_filters(r, D, kinds)
        S = r.standard_normal((M, T, D))
        got = L.intra_region_encode(S, filters).data
        assert got.shape == (M, D)
        np.testing.assert_allclose(got, intra_oracle(S, filters), rtol=0, atol=1e-12)

    def test_filter_counts(self):
        assert L.filter_counts(8, 2) == [4, 4]
        assert L.filter_counts(10, 4) == [4, 2, 2, 2]
        assert L.filter_counts(3, 4) == [3, 0, 0, 0]
        assert [W.shape for W, _ in L.init_intra_filters(np.random.default_rng(0), 6, 3)] == \
            [(6, 2), (12, 2), (18, 2)]

    def test_single_scale(self, rng):
        filters = random_filters(rng, 4, 1)
        S = rng.standard_normal((3, 1, 4))
        W, b = filters[0]
        np.testing.assert_allclose(L.intra_region_encode(S, filters).data,
                                   np.maximum(S[:, 0] @ W.data + b.data, 0), rtol=0, atol=1e-15)

    def test_one_hot_is_scale_max(self, rng):
        S = rng.uniform(0, 1, (2, 3, 4))
        W = np.zeros((4, 1))
        W[2, 0] = 1
        filters = [(ad.Tensor(W), ad.Tensor(np.zeros(1)))]
        assert np.array_equal(L.intra_region_encode(S, filters).data[:, 0], S[:, :, 2].max(axis=1))

    def test_window_too_large(self, rng):
        with pytest.raises(ValueError):
            L.intra_region_encode(rng.standard_normal((2, 1, 4)), random_filters(rng, 4, 2))

    def test_batched_leading_dims(self, rng):
        filters = random_filters(rng, 4, 3)
        S = rng.standard_normal((2, 5, 3, 4))
        got = L.intra_region_encode(S, filters).data
        for i in range(2):
            np.testing.assert_allclose(got[i], intra_oracle(S[i], filters), rtol=0, atol=1e-12)

    def test_grad(self, rng):
        filters = random_filters(rng, 3, 3)
        ws = [t.data for pair in filters for t in pair]
        S = rng.standard_normal((2, 3, 3))

        def fn(s, *flat):
            f = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
            return ad.sum_reduce(L.intra_region_encode(s, f))

        for a, f in zip(grad_of(fn, S, *ws), fd_grad(fn, S, *ws)):
            assert rel_error(a, f) < 1e-5


class TestInter:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 8), st.floats(0, 50), st.integers(0, 2**32 - 1))
    def test_oracle_and_convexity(self, M, D, gamma, seed):
        r = np.random.default_rng(seed)
        R = r.standard_normal((M, D))
        P = r.uniform(-1, 1, (M, 3))
        U = ((P[:, None] - P[None]) ** 2).sum(-1)
        V = np.exp(-gamma * U)
        got = L.inter_region_encode(R, V).data
        np.testing.assert_allclose(got, inter_oracle(R, V), rtol=0, atol=1e-12)
        assert (got >= R.min(axis=0) - 1e-12).all() and (got <= R.max(axis=0) + 1e-12).all()

    def test_identity_exact(self, rng):
        R = rng.standard_normal((7, 5))
        assert np.array_equal(L.inter_region_encode(R, np.eye(7)).data, R)

    def test_gamma_zero_exact_mean(self, rng):
        for M in (1, 2, 3, 7, 9, 64):
            for D in (1, 5):
                R = rng.standard_normal((M, D))
                got = L.inter_region_encode(R, np.ones((M, M))).data
                assert np.array_equal(got, np.broadcast_to(sequential_mean(R), got.shape))
                exact = [math.fsum(c) / M for c in R.T]
                np.testing.assert_allclose(got[0], exact, rtol=0, atol=1e-15 * M)

    def test_two_regions(self):
        e = math.exp(-1)
        got = L.inter_region_encode(np.eye(2), np.array([[1, e], [e, 1]])).data
        np.testing.assert_allclose(got[0], [1 / (1 + e), e / (1 + e)], rtol=0, atol=1e-15)
        np.testing.assert_allclose(got[0], [0.7311, 0.2689], atol=5e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.inter_region_encode(np.ones((3, 2)), np.ones((2, 2)))

    def test_grad(self, rng):
        V = np.exp(-rng.uniform(0, 2, (4, 4)))
        V = (V + V.T) / 2
        fn = lambda x: ad.sum_reduce(ad.scale(L.inter_region_encode(x, V), np.arange(12.0).reshape(4, 3)))
        x = rng.standard_normal((4, 3))
        a, = grad_of(fn, x)
        f, = fd_grad(fn, x)
        assert rel_error(a, f) < 1e-5


class TestFallback:
    def test_single_scale(self, rng):
        S = rng.standard_normal((3, 1, 4))
        for mode in ("mean", "max", "concat"):
            assert np.array_equal(L.aggregate_fallback(S, mode).data, S[:, 0])

    def test_max(self):
        assert L.aggregate_fallback(np.array([[[1.0, 5.0], [3.0, 2.0]]]), "max").data.tolist() == [[3, 5]]

    def test_mean_equals_max_identical_scales(self, rng):
        S = np.repeat(rng.standard_normal((3, 1, 4)), 4, axis=1)
        assert np.array_equal(L.aggregate_fallback(S, "mean").data, L.aggregate_fallback(S, "max").data)

    def test_concat_width(self, rng):
        assert L.aggregate_fallback(rng.standard_normal((3, 4, 5)), "concat").shape == (3, 20)

    def test_unknown(self, rng):
        with pytest.raises(ValueError):
            L.aggregate_fallback(rng.standard_normal((3, 4, 5)), "median")


class TestPointNet:
    def layers(self, rng, cin=3):
        ls = L.init_mlp(rng, cin, [8, 16])
        for _, b in ls:
            b.data[...] = rng.uniform(-0.2, 0.2, b.shape)
        return ls

    def test_single_point(self, rng):
        ls = self.layers(rng)
        p = rng.standard_normal((2, 1, 3))
        assert np.array_equal(L.pointnet_layer(p, ls).data, L.mlp(p[:, 0], ls).data)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_permutation_and_duplication(self, K, seed):
        r = np.random.default_rng(seed)
        ls = self.layers(r)
        p = r.standard_normal((3, K, 3))
        base = L.pointnet_layer(p, ls).data
        assert np.array_equal(base, L.pointnet_layer(p[:, r.permutation(K)], ls).data)
        dup = np.concatenate([p, p[:, r.integers(0, K, 3)]], axis=1)
        assert np.array_equal(base, L.pointnet_layer(dup, ls).data)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            L.pointnet_layer(rng.standard_normal((2, 4, 5)), self.layers(rng))


class TestGlobal:
    def test_pools(self, rng):
        ls = L.init_mlp(rng, 4, [6, 10])
        x = rng.standard_normal((5, 4))
        mean = L.global_pointnet(x, ls, "mean").data
        total = L.global_pointnet(x, ls, "sum").data
        np.testing.assert_allclose(total, 5 * mean, rtol=1e-13)
        assert L.global_pointnet(x, ls).shape == (10,)

    def test_single_row_and_duplicate(self, rng):
        ls = L.init_mlp(rng, 4, [6])
        x = rng.standard_normal((1, 4))
        for pool in ("max", "mean", "sum"):
            assert np.array_equal(L.global_pointnet(x, ls, pool).data, L.mlp(x, ls).data[0])
        y = rng.standard_normal((4, 4))
        assert np.array_equal(L.global_pointnet(y, ls).data,
                              L.global_pointnet(np.vstack([y, y[2:3]]), ls).data)

    def test_unknown(self, rng):
        with pytest.raises(ValueError):
            L.global_pointnet(rng.standard_normal((2, 4)), L.init_mlp(rng, 4, [3]), "min")


class TestPropagation:
    def test_coincident_copies(self, rng):
        src = rng.standard_normal((1, 4, 3))
        feats = rng.standard_normal((1, 4, 5))
        out = L.feature_propagation(src[:, [2]], src, feats).data
        assert np.array_equal(out[0, 0], feats[0, 2])

    def test_constant_features(self, rng):
        v = rng.standard_normal(5)
        feats = np.broadcast_to(v, (1, 6, 5)).copy()
        out = L.feature_propagation(rng.standard_normal((1, 9, 3)), rng.standard_normal((1, 6, 3)), feats).data
        np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), rtol=0, atol=1e-14)

    def test_two_sources(self, rng):
        src = np.array([[[1.0, 0, 0], [-2.0, 0, 0]]])
        f = rng.standard_normal((1, 2, 3))
        out = L.feature_propagation(np.zeros((1, 1, 3)), src, f, k=2).data[0, 0]
        np.testing.assert_allclose(out, 0.8 * f[0, 0] + 0.2 * f[0, 1], rtol=0, atol=1e-12)

    def test_skip_concat(self, rng):
        skip = rng.standard_normal((1, 7, 2))
        out = L.feature_propagation(rng.standard_normal((1, 7, 3)), rng.standard_normal((1, 3, 3)),
                                    rng.standard_normal((1, 3, 4)), skip).data
        assert out.shape == (1, 7, 6) and np.array_equal(out[..., 4:], skip)

    def test_grad(self, rng):
        t, s = rng.standard_normal((1, 6, 3)), rng.standard_normal((1, 4, 3))
        fn = lambda f: ad.sum_reduce(ad.scale(L.feature_propagation(t, s, f), np.arange(12.0).reshape(1, 6, 2)))
        x = rng.standard_normal((1, 4, 2))
        a, = grad_of(fn, x)
        f, = fd_grad(fn, x)
        assert rel_error(a, f) < 1e-5

    def test_empty_sources(self):
        with pytest.raises(ValueError):
            L.feature_propagation(np.zeros((1, 2, 3)), np.zeros((1, 0, 3)), np.zeros((1, 0, 2)))


class TestHead:
    def test_eval_deterministic(self, rng):
        ls = L.init_mlp(rng, 8, [6, 5, 4])
        g = rng.standard_normal(8)
        a = L.classification_head(g, ls, training=False).data
        assert np.array_equal(a, L.classification_head(g, ls, training=False).data)

    def test_zero_weights(self, rng):
        ls = L.init_mlp(rng, 8, [6, 5, 4])
        for W, b in ls:
            W.data[...] = 0
        ls[-1][1].data[...] = [1, 2, 3, 4]
        assert L.classification_head(rng.standard_normal(8), ls).data.tolist() == [1, 2, 3, 4]

    def test_dropout_only_in_training(self, rng):
        ls = L.init_mlp(rng, 8, [64, 64, 4])
        g = rng.uniform(0.5, 1, 8)
        a = L.classification_head(g, ls, True, np.random.default_rng(0)).data
        b = L.classification_head(g, ls, True, np.random.default_rng(1)).data
        assert not np.array_equal(a, b)

    def test_grad(self, rng):
        ls = L.init_mlp(rng, 5, [6, 4, 3])
        for _, b in ls:
            b.data[...] = rng.uniform(-0.3, 0.3, b.shape)
        flat = [t.data for pair in ls for t in pair]

        def fn(g, *f):
            pairs = [(f[i], f[i + 1]) for i in range(0, len(f), 2)]
            return ad.softmax_cross_entropy(ad.reshape(L.classification_head(g, pairs), (1, 3)), [1])

        g = rng.standard_normal(5)
        for a, f in zip(grad_of(fn, g, *flat), fd_grad(fn, g, *flat)):
            assert rel_error(a, f) < 1e-5
