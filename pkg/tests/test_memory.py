import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memorynet import arraydiff as ad
from memorynet.arraydiff import Tensor, grad_check
from memorynet.errors import ConfigurationError, DegenerateInputError, DimensionError
from memorynet.memory import (
    MemoryConfig,
    PrototypeBank,
    address,
    cosine_similarity,
    hierarchical_read,
    init_bank,
    read,
    summarize,
)

from oracles import address_loops, hierarchical_read_loops, read_loops, summarize_loops


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestConfig:
    def test_derived_counts(self):
        cfg = MemoryConfig(P=3, I=2, S=2, N_c=4, C=5, B=2)
        assert (cfg.n_part, cfg.n_ins, cfg.n_sem) == (48, 16, 8)

    @pytest.mark.parametrize("field", ["P", "I", "S", "N_c", "C", "B"])
    def test_rejects_zero(self, field):
        with pytest.raises(ConfigurationError):
            MemoryConfig(**{field: 0})


class TestAddress:
    def test_single_prototype(self):
        q = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(address(Tensor(q), Tensor([[1.0, 2.0, 3.0]])).data, np.ones((4, 1)))

    def test_orthogonal_pair(self):
        w = address(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]])).data[0]
        e = math.e
        np.testing.assert_allclose(w, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
        np.testing.assert_allclose(w, [0.7311, 0.2689], atol=5e-5)

    def test_identical_prototypes_uniform(self):
        m = np.tile([0.3, -0.2, 0.5], (5, 1))
        w = address(Tensor(np.random.default_rng(1).normal(size=(3, 3))), Tensor(m)).data
        np.testing.assert_allclose(w, 0.2, atol=1e-15)

    def test_zero_query_identifies_row(self):
        q = np.ones((4, 2))
        q[2] = 0.0
        with pytest.raises(DegenerateInputError) as info:
            address(Tensor(q), Tensor(np.eye(2)))
        assert info.value.row == 2

    def test_zero_prototype_rejected(self):
        with pytest.raises(DegenerateInputError):
            address(Tensor(np.ones((1, 2))), Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_guarded_zero_query_is_uniform(self):
        w = address(Tensor(np.zeros((1, 2))), Tensor(np.eye(2)), eps=1e-12).data
        np.testing.assert_allclose(w, 0.5)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            address(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))

    def test_matches_loops(self):
        rng = np.random.default_rng(4)
        q, m = rng.normal(size=(7, 8)), rng.normal(size=(16, 8))
        np.testing.assert_allclose(address(Tensor(q), Tensor(m)).data, address_loops(q, m), rtol=0, atol=1e-12)


class TestRead:
    def test_one_hot_selects(self):
        m = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(read(Tensor([[0.0, 0.0, 1.0, 0.0]]), Tensor(m)).data[0], m[2])

    def test_uniform_is_midpoint(self):
        a, b = np.array([1.0, 4.0]), np.array([3.0, -2.0])
        np.testing.assert_allclose(read(Tensor([[0.5, 0.5]]), Tensor(np.stack([a, b]))).data[0], (a + b) / 2)

    def test_matches_loops(self):
        rng = np.random.default_rng(5)
        w, m = rng.dirichlet(np.ones(4), size=3), rng.normal(size=(4, 2))
        np.testing.assert_allclose(read(Tensor(w), Tensor(m)).data, read_loops(w, m), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            read(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSummarize:
    def test_identical_rows(self):
        r = [0.2, -1.0, 3.0]
        np.testing.assert_allclose(summarize(Tensor([r, r, r]), 3).data, [r])

    def test_hand_mean(self):
        np.testing.assert_array_equal(summarize(Tensor([[1.0, 0.0], [3.0, 2.0]]), 2).data, [[2.0, 1.0]])

    def test_zero(self):
        np.testing.assert_array_equal(summarize(Tensor(np.zeros((6, 2))), 3).data, 0.0)

    def test_alpha_scales(self):
        m = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_allclose(summarize(Tensor(m), 2, alpha=0.5).data, summarize_loops(m, 2, 0.5), atol=1e-15)

    def test_block_must_divide(self):
        with pytest.raises(ConfigurationError):
            summarize(Tensor(np.ones((5, 2))), 2)


class TestHierarchicalRead:
    def test_degenerate_hierarchy(self):
        cfg = MemoryConfig(P=1, I=1, S=1, N_c=1, C=3, B=1)
        p = np.array([[[0.6, 0.0, -0.8]]])
        bank = PrototypeBank(cfg, Tensor(p))
        q = np.random.default_rng(0).normal(size=(5, 3))
        for y in hierarchical_read(Tensor(q), bank):
            np.testing.assert_allclose(y.data, np.tile(p[0, 0], (5, 1)), atol=1e-15)

    def test_query_on_prototype_is_dominated_by_it(self):
        cfg = MemoryConfig(P=2, I=1, S=1, N_c=1, C=2, B=1)
        m = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        bank = PrototypeBank(cfg, Tensor(m))
        y_part, _, _ = hierarchical_read(Tensor([[1.0, 0.0]]), bank)
        e = math.e
        # closed form: weights (e, 1) / (e + 1)
        np.testing.assert_allclose(y_part.data[0], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
        assert y_part.data[0, 0] > 0.5

    def test_matches_straight_line_oracle(self):
        cfg = MemoryConfig(P=2, I=2, S=2, N_c=1, C=4, B=2)
        bank = init_bank(cfg, seed=11)
        q = np.random.default_rng(12).normal(size=(4, 4))
        got = hierarchical_read(Tensor(q), bank)
        want = hierarchical_read_loops(q, bank.part_metric.data, cfg.P, cfg.I)
        for g, w in zip(got, want):
            np.testing.assert_allclose(g.data, w, rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        bank = init_bank(MemoryConfig(C=4), 0)
        with pytest.raises(DimensionError):
            hierarchical_read(Tensor(np.ones((3, 5))), bank)

    def test_gradient_into_part_metric(self):
        cfg = MemoryConfig(P=2, I=2, S=1, N_c=2, C=3, B=2)
        bank = init_bank(cfg, 3)
        q = Tensor(np.random.default_rng(3).normal(size=(6, 3)))
        wts = np.random.default_rng(4).normal(size=(18, 3))

        def fn(metric):
            ys = hierarchical_read(q, PrototypeBank(cfg, metric))
            return ad.sum(ad.mul(ad.concat(list(ys), axis=0), Tensor(wts)))

        assert grad_check(fn, bank.part_metric.data) <= 1e-4


class TestInitBank:
    def test_deterministic(self):
        cfg = MemoryConfig(P=3, I=2, C=5)
        np.testing.assert_array_equal(init_bank(cfg, 9).part_metric.data, init_bank(cfg, 9).part_metric.data)

    def test_unit_rows(self):
        bank = init_bank(MemoryConfig(P=4, I=3, S=2, N_c=2, C=6, B=2), 1)
        np.testing.assert_allclose(np.linalg.norm(bank.part_metric.data, axis=-1), 1.0, atol=1e-12)

    def test_seeds_differ(self):
        cfg = MemoryConfig()
        assert np.any(init_bank(cfg, 0).part_metric.data != init_bank(cfg, 1).part_metric.data)

    def test_shape(self):
        cfg = MemoryConfig(P=2, I=3, S=1, N_c=2, C=4, B=2)
        assert init_bank(cfg, 0).part_metric.shape == (2, 12, 4)


nonzero_rows = st.integers(0, 2**32 - 1)


@settings(max_examples=250, deadline=None)
@given(seed=nonzero_rows, q=st.integers(1, 6), n=st.integers(1, 16), c=st.integers(1, 8))
def test_address_read_invariants(seed, q, n, c):
    rng = np.random.default_rng(seed)
    queries = rng.normal(size=(q, c))
    metric = rng.normal(size=(n, c))
    w = address(Tensor(queries), Tensor(metric)).data
    assert np.all((w > 0) & (w < 1) | (n == 1))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)
    cos = cosine_similarity(Tensor(queries), Tensor(metric)).data
    assert np.all(np.abs(cos) <= 1 + 1e-12)
    y = read(Tensor(w), Tensor(metric)).data
    assert np.all(y >= metric.min(axis=0) - 1e-12) and np.all(y <= metric.max(axis=0) + 1e-12)
    scale = rng.uniform(1e-3, 1e3)
    np.testing.assert_allclose(address(Tensor(scale * queries), Tensor(metric)).data, w, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=nonzero_rows, rows=st.integers(1, 4), block=st.integers(1, 4), alpha=st.floats(0.1, 3.0))
def test_summarize_is_linear(seed, rows, block, alpha):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, rows * block, 3))
    lhs = summarize(Tensor(a + b), block, alpha).data
    rhs = summarize(Tensor(a), block, alpha).data + summarize(Tensor(b), block, alpha).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
