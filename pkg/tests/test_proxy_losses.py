import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from reference import proxy_anchor_hardness_grad

from metric_forge import gradcheck as gc
from metric_forge.core import EmbeddingBatch, l2_normalize_rows
from metric_forge.errors import (
    DimensionMismatch,
    KOutOfRange,
    MissingProxy,
    NonPositiveTemperature,
    NoPositive,
    NotNormalized,
)
from metric_forge.proxy_losses import (
    ProxyGmlConfig,
    ProxySet,
    init_proxies,
    nca_loss,
    proxy_anchor_loss,
    proxygml_loss,
    proxygml_select,
    proxynca_loss,
    proxynca_pp_loss,
)

LOG2 = 0.6931471805599453


def proxy_set(vectors, m=1):
    vectors = np.asarray(vectors, dtype=np.float64)
    return ProxySet(vectors, np.repeat(np.arange(vectors.shape[0] // m), m))


def random_case(seed, b=6, c=5, d=4, m=1):
    rng = np.random.default_rng(seed)
    f = l2_normalize_rows(rng.standard_normal((b, d)))
    labels = rng.integers(0, c, b)
    return EmbeddingBatch(f, labels), init_proxies(c, d, m, rng)


def rotation(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q


class TestProxySet:
    def test_layout_and_norm(self):
        ps = init_proxies(3, 4, per_class=2, rng=0)
        assert ps.num_classes == 3 and ps.M == 2
        np.testing.assert_array_equal(ps.proxy_class, [0, 0, 1, 1, 2, 2])
        assert np.allclose(np.linalg.norm(ps.vectors, axis=1), 1.0, atol=1e-12)

    def test_invariants(self):
        with pytest.raises(ValueError):
            ProxySet(np.eye(3), [0, 0, 1])
        with pytest.raises(NotNormalized):
            ProxySet(2 * np.eye(2), [0, 1])

    def test_dimension_mismatch(self):
        batch = EmbeddingBatch(np.eye(3), [0, 1, 0])
        with pytest.raises(DimensionMismatch):
            proxynca_loss(batch, proxy_set(np.eye(2)))


class TestNca:
    def test_two_same_class(self):
        assert nca_loss(EmbeddingBatch(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0])).value == 0.0

    def test_equidistant(self):
        f = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])
        out = nca_loss(EmbeddingBatch(f, [0, 0, 1]))
        assert abs(out.value - LOG2) < 1e-12
        assert out.aux["skipped"] == 1

    def test_no_positive(self):
        with pytest.raises(NoPositive):
            nca_loss(EmbeddingBatch(np.eye(3), [0, 1, 2]))

    def test_gradcheck(self):
        assert all(r.passed for r in gc.check_all({"nca": gc.default_registry()["nca"]}, range(3), 1e-5))


class TestProxyNca:
    def test_coincident_with_orthogonal_negative(self):
        batch = EmbeddingBatch(np.array([[1.0, 0.0]]), [0])
        assert abs(proxynca_loss(batch, proxy_set(np.eye(2))).value - (-2.0)) < 1e-12

    def test_equidistant_two_classes(self):
        batch = EmbeddingBatch(l2_normalize_rows(np.array([[1.0, 1.0]])), [0])
        assert abs(proxynca_loss(batch, proxy_set(np.eye(2))).value) < 1e-12

    def test_missing_proxy(self):
        batch = EmbeddingBatch(np.array([[1.0, 0.0]]), [2])
        with pytest.raises(MissingProxy):
            proxynca_loss(batch, proxy_set(np.eye(2)))
        with pytest.raises(MissingProxy):
            proxynca_pp_loss(batch, proxy_set(np.eye(2)))

    @pytest.mark.parametrize("name", ["proxynca", "proxynca_pp"])
    def test_gradcheck_both_blocks(self, name):
        reports = gc.check_all({name: gc.default_registry()[name]}, range(5), 1e-5)
        assert all(r.passed for r in reports), [r.row() for r in reports if not r.passed]

    def test_rotation_invariance(self):
        batch, ps = random_case(1)
        q = rotation(batch.dim, 2)
        rb = EmbeddingBatch(batch.data @ q, batch.labels)
        rp = ps.with_vectors(ps.vectors @ q)
        assert abs(proxynca_loss(batch, ps).value - proxynca_loss(rb, rp).value) < 1e-9
        assert abs(proxynca_pp_loss(batch, ps, 0.3).value - proxynca_pp_loss(rb, rp, 0.3).value) < 1e-9

    def test_duplicate_sample_no_leakage(self):
        batch, ps = random_case(3)
        dup = EmbeddingBatch(np.vstack([batch.data, batch.data[:1]]), np.append(batch.labels, batch.labels[0]))
        for fn in (proxynca_loss, proxynca_pp_loss):
            base, more = fn(batch, ps), fn(dup, ps)
            b = batch.size
            first = fn(EmbeddingBatch(batch.data[:1], batch.labels[:1]), ps).value
            assert abs(more.value * (b + 1) - (base.value * b + first)) < 1e-9


class TestProxyNcaPP:
    def test_uniform_is_log_c(self):
        batch = EmbeddingBatch(np.array([[0.0, 0.0, 1.0]]), [1])
        ps = proxy_set(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))
        assert abs(proxynca_pp_loss(batch, ps, 0.7).value - math.log(4)) < 1e-12

    def test_temperature_monotone(self):
        batch = EmbeddingBatch(l2_normalize_rows(np.array([[1.0, 0.2]])), [0])
        ps = proxy_set(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
        vals = [proxynca_pp_loss(batch, ps, t).value for t in (1.0, 0.5, 0.25)]
        assert vals[0] > vals[1] > vals[2] > 0

    def test_nonpositive_temperature(self):
        batch, ps = random_case(0)
        with pytest.raises(NonPositiveTemperature):
            proxynca_pp_loss(batch, ps, 0.0)

    @settings(max_examples=40)
    @given(st.integers(0, 2**31), st.floats(0.05, 5.0))
    def test_nonnegative(self, seed, t):
        batch, ps = random_case(seed)
        assert proxynca_pp_loss(batch, ps, t).value >= 0.0

    def test_convergence_order(self):
        # central differences: halving h cuts the error about 4x
        batch, ps = random_case(4)
        f = batch.data
        fn = lambda x: proxynca_pp_loss(EmbeddingBatch(x, batch.labels), ps, 0.5).value  # noqa: E731
        exact = proxynca_pp_loss(batch, ps, 0.5).grad_embeddings
        errs = [np.max(np.abs(gc.finite_diff(fn, [f], h)[0] - exact)) for h in (1e-2, 5e-3)]
        assert 2.5 < errs[0] / errs[1] < 6.0


class TestProxyAnchor:
    def test_single_positive_at_delta(self):
        delta = 0.1
        batch = EmbeddingBatch(np.array([[delta, math.sqrt(1 - delta**2)]]), [0])
        out = proxy_anchor_loss(batch, proxy_set(np.array([[1.0, 0.0]])), alpha=32.0, delta=delta)
        assert abs(out.value - LOG2) < 1e-12

    def test_empty_sets_contribute_zero(self):
        # proxy 1 has no positives; its negative term is still present
        batch = EmbeddingBatch(np.array([[1.0, 0.0]]), [0])
        ps = proxy_set(np.eye(2))
        out = proxy_anchor_loss(batch, ps, alpha=2.0, delta=0.1)
        pos = math.log1p(math.exp(-2.0 * (1.0 - 0.1)))
        neg = math.log1p(math.exp(2.0 * (0.0 + 0.1)))
        assert abs(out.value - (pos / 1 + neg / 2)) < 1e-12

    def test_matches_hardness_closed_form(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            batch, ps = random_case(int(rng.integers(2**31)), b=8, c=4)
            out = proxy_anchor_loss(batch, ps, 32.0, 0.1)
            ref = proxy_anchor_hardness_grad(batch.data @ ps.vectors.T, batch.labels, 32.0, 0.1)
            scale = max(1.0, np.abs(ref).max())
            assert np.max(np.abs(out.aux["grad_similarity"] - ref)) <= 1e-9 * scale

    def test_negative_similarity_monotone(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            batch, ps = random_case(int(rng.integers(2**31)), b=6, c=3)
            out = proxy_anchor_loss(batch, ps, 32.0, 0.1)
            neg = batch.labels[:, None] != np.arange(3)[None, :]
            assert np.all(out.aux["grad_similarity"][neg] >= 0.0)

    def test_gradcheck(self):
        reports = gc.check_all({"pa": gc.default_registry()["proxy_anchor"]}, range(5), 1e-6)
        assert all(r.passed for r in reports)


class TestProxyGmlSelect:
    def test_k_equals_m(self):
        rng = np.random.default_rng(0)
        pc = np.repeat(np.arange(3), 2)
        labels = np.array([0, 2, 1])
        sel = proxygml_select(rng.standard_normal((6, 3)), labels, pc, ProxyGmlConfig(2, 0.0, 2))
        for i, y in enumerate(labels):
            assert sorted(sel[i]) == np.flatnonzero(pc == y).tolist()

    def test_full_selection(self):
        rng = np.random.default_rng(1)
        pc = np.repeat(np.arange(3), 2)
        sel = proxygml_select(rng.standard_normal((6, 4)), [0, 1, 2, 0], pc, ProxyGmlConfig(6, 0.0, 2))
        assert all(sorted(r) == list(range(6)) for r in sel.tolist())

    def test_matches_argsort_oracle(self):
        # M=2, C=3, K=4, with a tie between proxies 2 and 4
        s = np.array([[0.9], [-0.5], [0.3], [0.8], [0.3], [0.1]])
        pc = np.repeat(np.arange(3), 2)
        sel = proxygml_select(s, [0], pc, ProxyGmlConfig(4, 0.0, 2))
        others = [j for j in range(6) if pc[j] != 0]
        ranked = sorted(others, key=lambda j: (-s[j, 0], j))
        assert sel[0].tolist() == [0, 1] + ranked[:2]
        assert sel[0].tolist() == [0, 1, 3, 2]

    def test_k_out_of_range(self):
        pc = np.repeat(np.arange(3), 2)
        with pytest.raises(KOutOfRange):
            proxygml_select(np.zeros((6, 1)), [0], pc, ProxyGmlConfig(1, 0.0, 2))
        with pytest.raises(KOutOfRange):
            proxygml_select(np.zeros((6, 1)), [0], pc, ProxyGmlConfig(7, 0.0, 2))

    @settings(max_examples=50)
    @given(st.integers(0, 2**31), st.integers(1, 3), st.integers(2, 5), st.data())
    def test_always_contains_own_proxies(self, seed, m, c, data):
        k = data.draw(st.integers(m, m * c))
        rng = np.random.default_rng(seed)
        pc = np.repeat(np.arange(c), m)
        labels = rng.integers(0, c, 5)
        s = rng.standard_normal((m * c, 5))
        sel = proxygml_select(s, labels, pc, ProxyGmlConfig(k, 0.0, m))
        assert sel.shape == (5, k)
        for i, y in enumerate(labels):
            assert set(np.flatnonzero(pc == y)) <= set(sel[i].tolist())
            assert len(set(sel[i].tolist())) == k


class TestProxyGmlLoss:
    def test_reduces_to_softmax_ce(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            batch, ps = random_case(int(rng.integers(2**31)), b=7, c=4)
            out = proxygml_loss(batch, ps, ProxyGmlConfig(4, 0.0, 1))
            s = batch.data @ ps.vectors.T
            ref = np.mean([-s[i, y] + math.log(sum(math.exp(v) for v in s[i])) for i, y in enumerate(batch.labels)])
            assert abs(out.value - ref) < 1e-9

    def test_single_class(self):
        batch = EmbeddingBatch(l2_normalize_rows(np.array([[1.0, 0.3], [0.2, 1.0]])), [0, 0])
        out = proxygml_loss(batch, proxy_set(np.array([[1.0, 0.0]])), ProxyGmlConfig(1, 0.0, 1))
        assert out.aux["ce"] == 0.0

    def test_masked_rows(self):
        batch, ps = random_case(6, b=5, c=3, m=2)
        out = proxygml_loss(batch, ps, ProxyGmlConfig(3, 0.3, 2))
        prob, mask = out.aux["probabilities"], out.aux["class_mask"]
        np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(prob[~mask] == 0.0)
        assert np.all(mask[np.arange(5), batch.labels])

    def test_gradcheck_m2_c3_k3(self):
        reports = gc.check_all({"gml": gc.default_registry()["proxygml"]}, range(5), 1e-5)
        assert all(r.passed for r in reports), [r.row() for r in reports]

    def test_m_mismatch(self):
        batch, ps = random_case(7, c=3, m=2)
        with pytest.raises(ValueError):
            proxygml_loss(batch, ps, ProxyGmlConfig(3, 0.3, 1))
