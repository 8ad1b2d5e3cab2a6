import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabembed import diffcore as dc
from tabembed.diffcore import Tensor
from tabembed.embed_cat import (
    CatDeepParams,
    CategoricalEmbedder,
    HashingConfig,
    IdTable,
    PrecomputedCache,
    binary_encode,
    binary_width,
    categorical_param_extras,
    deep_transform_cat,
    hash_buckets,
    hash_embed,
    identify,
    onehot_encode,
    param_count_categorical,
    precompute_table,
)
from tabembed.errors import ConfigError, OutOfVocabularyError
from tabembed.train import Adam

from fdcheck import gradcheck


def has_collision(buckets):
    return len(np.unique(buckets)) < len(buckets)


class TestEncoders:
    def test_onehot_example(self):
        np.testing.assert_array_equal(onehot_encode(2, 4).data, [0, 0, 1, 0])

    def test_binary_example(self):
        assert binary_width(5) == 3
        np.testing.assert_array_equal(binary_encode(5, 5).data, [1, 0, 1])
        np.testing.assert_array_equal(binary_encode(4, 5).data, [1, 0, 0])

    @pytest.mark.parametrize("v,width", [(1, 1), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (4096, 12)])
    def test_binary_width(self, v, width):
        assert binary_width(v) == width

    def test_onehot_reserved_is_zero(self):
        np.testing.assert_array_equal(onehot_encode(3, 3).data, np.zeros(3))

    @pytest.mark.parametrize("x", [-1, 6, 2.5])
    def test_out_of_range(self, x):
        with pytest.raises(OutOfVocabularyError):
            binary_encode(x, 5)

    def test_digits_round_trip(self, rng):
        v = 1000
        x = rng.integers(0, v, 50)
        bits = binary_encode(x, v).data
        powers = 2 ** np.arange(binary_width(v) - 1, -1, -1)
        np.testing.assert_array_equal(bits @ powers, x)

    def test_injective_exhaustive(self):
        for v in range(1, 4097):
            codes = binary_encode(np.arange(v + 1), v).data.astype(np.int64)
            assert codes.shape[1] == binary_width(v)
            as_int = codes @ (1 << np.arange(codes.shape[1] - 1, -1, -1))
            assert len(np.unique(as_int[:v])) == v, v
        for v in itertools.chain(range(1, 257), [1000, 4096]):
            codes = onehot_encode(np.arange(v), v).data
            # a single 1 at position i for each index i: distinct by construction
            np.testing.assert_array_equal(codes.sum(axis=1), 1.0)
            np.testing.assert_array_equal(codes.argmax(axis=1), np.arange(v))


class TestIdentify:
    def test_first_row(self, rng):
        table = IdTable.create(5, 2, rng)
        np.testing.assert_array_equal(identify(0, table).data, table.entries.data[0])

    def test_hand_filled(self):
        table = IdTable(Tensor(np.arange(12.0).reshape(6, 2)))
        np.testing.assert_array_equal(identify(3, table).data, [6.0, 7.0])
        assert table.cardinality == 5

    def test_out_of_vocabulary(self, rng):
        with pytest.raises(OutOfVocabularyError):
            identify(6, IdTable.create(5, 2, rng))

    def test_rows_distinct_after_init(self):
        table = IdTable.create(4096, 2, np.random.default_rng(0))
        assert len(np.unique(table.entries.data, axis=0)) == 4097


class TestDeepTransformCat:
    def test_zero_weights(self, rng):
        params = CatDeepParams.create(2, 8, rng)
        for p in params.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(deep_transform_cat(Tensor(rng.normal(size=2)), params).data, np.zeros(8))

    def test_single_affine_hand_set(self, rng):
        params = CatDeepParams.create(2, 3, rng, hidden=[])
        layer = params.ffn.layers[0]
        layer.weight.data[...] = [[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]]
        layer.bias.data[...] = [0.5, 0.0, -1.0]
        out = deep_transform_cat(Tensor(np.array([2.0, -4.0])), params).data
        np.testing.assert_array_equal(out, [2 - 8 + 0.5, 4.0, 6 - 2 - 1])

    def test_width_mismatch(self, rng):
        with pytest.raises(ConfigError):
            deep_transform_cat(Tensor(np.ones(3)), CatDeepParams.create(2, 8, rng))

    def test_gradient(self, rng):
        table = IdTable.create(7, 2, rng)
        params = CatDeepParams.create(2, 5, rng, hidden=[6])
        x = np.array([0, 3, 3, 6, 7])
        w = rng.normal(size=(5, 5))
        ps = [table.entries, *params.parameters()]
        assert gradcheck(lambda: (deep_transform_cat(identify(x, table), params) * w).sum(), ps) < 1e-4


class TestHashing:
    def test_deterministic(self):
        x = np.arange(1000)
        np.testing.assert_array_equal(hash_buckets(x, 17, 64), hash_buckets(x, 17, 64))

    def test_range(self):
        b = hash_buckets(np.arange(10_000), 3, 37)
        assert b.min() >= 0 and b.max() < 37

    def test_seeds_differ(self):
        x = np.arange(2000)
        agree = np.mean(hash_buckets(x, 1, 64) == hash_buckets(x, 2, 64))
        assert agree < 0.05

    def test_roughly_uniform(self):
        counts = np.bincount(hash_buckets(np.arange(64_000), 5, 64), minlength=64)
        assert counts.min() > 800 and counts.max() < 1200

    def test_pigeonhole_example(self, rng):
        cfg = HashingConfig.create(3, 4, 2, rng, master_seed=9)
        for b in cfg.buckets(np.arange(10)):
            assert has_collision(b)

    def test_collision_every_table_exhaustive(self):
        cfg = HashingConfig.create(2, 1, 1, np.random.default_rng(0), master_seed=0)
        for v in range(2, 4097):
            for v_hat in sorted({1, v // 2, v - 1}):
                for seed in cfg.seeds:
                    assert has_collision(hash_buckets(np.arange(v), seed, v_hat)), (v, v_hat)

    def test_single_table_is_lookup(self, rng):
        cfg = HashingConfig.create(1, 4096, 3, rng, master_seed=1)
        x = np.arange(10)
        b = cfg.buckets(x)[0]
        assert not has_collision(b)
        np.testing.assert_array_equal(hash_embed(x, cfg).data, cfg.tables[0].data[b])

    def test_weighted_mean(self, rng):
        cfg = HashingConfig.create(3, 8, 4, rng)
        cfg.agg_weights.data[...] = [0.0, np.log(2.0), np.log(5.0)]
        x = 11
        rows = [t.data[b] for t, b in zip(cfg.tables, cfg.buckets(x))]
        expected = (rows[0] + 2 * rows[1] + 5 * rows[2]) / 8
        np.testing.assert_allclose(hash_embed(x, cfg).data, expected, rtol=1e-13)

    def test_gradient(self, rng):
        cfg = HashingConfig.create(2, 4, 3, rng)
        cfg.agg_weights.data[...] = rng.normal(size=2)
        x = np.arange(6)
        w = rng.normal(size=(6, 3))
        assert gradcheck(lambda: (hash_embed(x, cfg) * w).sum(), cfg.parameters()) < 1e-4

    def test_param_count(self):
        assert param_count_categorical("hashing", 1000, 8, k=2, v_hat=16) == 256
        assert categorical_param_extras("hashing", 8, k=2) == {"agg_weights": 2}


class TestEmbedder:
    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            CategoricalEmbedder("bloom", 10, 8)

    def test_deep_zero_ffn(self, rng):
        emb = CategoricalEmbedder("deep", 20, 8, rng)
        for p in emb.deep.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(emb(np.arange(21)).data, np.zeros((21, 8)))

    def test_deep_requires_small_id_dim(self):
        with pytest.raises(ConfigError):
            CategoricalEmbedder("deep", 10, 4, id_dim=4)

    @pytest.mark.parametrize("method", ["onehot", "binary", "lookup", "hashing", "deep"])
    def test_pure_function_of_index(self, rng, method):
        emb = CategoricalEmbedder(method, 50, 8, rng)
        x = rng.integers(0, 50, 30)
        first = emb(x).data
        assert first.shape == (30, emb.dim)
        np.testing.assert_array_equal(first, emb(x).data)
        np.testing.assert_allclose(first[0], emb(int(x[0])).data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("method", ["lookup", "hashing", "deep"])
    def test_out_of_vocabulary(self, rng, method):
        emb = CategoricalEmbedder(method, 5, 8, rng)
        emb(5)
        with pytest.raises(OutOfVocabularyError):
            emb(6)

    def test_lookup_reserved_row(self, rng):
        emb = CategoricalEmbedder("lookup", 5, 4, rng)
        assert emb.table.shape == (6, 4)
        np.testing.assert_array_equal(emb(5).data, emb.table.data[5])


class TestParamCount:
    def test_examples(self):
        assert param_count_categorical("lookup", 1000, 16) == 16000
        assert param_count_categorical("deep", 1000, 16, d_hat=4, hidden=[]) == 4080
        assert param_count_categorical("onehot", 1000, 16) == 0
        assert param_count_categorical("binary", 1000, 16) == 0

    def test_compression_ratio(self):
        ratio = param_count_categorical("deep", 1000, 16, d_hat=4, hidden=[]) / 16000
        assert ratio == pytest.approx(0.255)

    def test_default_deep(self):
        # d_hat = 2, hidden width 16 with ExU, linear output
        n_w = (2 * 16 + 16 + 2 * 16) + (16 * 16 + 16)
        assert param_count_categorical("deep", 100, 16) == 100 * 2 + n_w

    def test_unknown_and_nonpositive(self):
        with pytest.raises(ConfigError):
            param_count_categorical("bloom", 10, 8)
        with pytest.raises(ConfigError):
            param_count_categorical("lookup", 0, 8)

    @pytest.mark.parametrize("v,d,d_hat", list(itertools.product([10, 1000, 10_000], [8, 16], [2, 4])))
    def test_deep_matches_allocation(self, v, d, d_hat):
        emb = CategoricalEmbedder("deep", v, d, np.random.default_rng(0), id_dim=d_hat)
        allocated = sum(p.size for p in emb.parameters())
        assert emb.param_count() + sum(emb.param_extras().values()) == allocated
        assert emb.param_extras() == {"oov_row": d_hat}

    @pytest.mark.parametrize("method", ["onehot", "binary", "lookup", "hashing"])
    def test_baselines_match_allocation(self, method):
        emb = CategoricalEmbedder(method, 300, 8, np.random.default_rng(0), k=3, v_hat=32)
        allocated = sum(p.size for p in emb.parameters())
        assert emb.param_count() + sum(emb.param_extras().values()) == allocated


class TestPrecompute:
    def test_rows_match(self, rng):
        emb = CategoricalEmbedder("deep", 100, 8, rng)
        cache = precompute_table(emb)
        on_the_fly = emb.compute(np.arange(100)).data
        assert np.max(np.abs(cache.table - on_the_fly)) <= 1e-12
        for i in range(100):
            assert np.max(np.abs(cache.table[i] - emb.compute(i).data)) <= 1e-12

    def test_non_deep_rejected(self, rng):
        with pytest.raises(ConfigError):
            precompute_table(CategoricalEmbedder("lookup", 10, 8, rng))

    def test_hit_counter(self, rng):
        emb = CategoricalEmbedder("deep", 10, 8, rng)
        cache = PrecomputedCache.empty(emb)
        cache.fetch(3, emb)
        assert (cache.hits, cache.misses) == (0, 1)
        cache.fetch(3, emb)
        assert (cache.hits, cache.misses) == (1, 1)

    def test_lazy_matches_full(self, rng):
        emb = CategoricalEmbedder("deep", 30, 8, rng)
        lazy = PrecomputedCache.empty(emb)
        x = rng.integers(0, 31, 80)
        np.testing.assert_allclose(lazy.fetch(x, emb), emb.compute(x).data, rtol=0, atol=1e-12)
        assert not lazy.filled[np.setdiff1d(np.arange(30), x)].any()

    def test_embedder_reads_cache_without_grad(self, rng):
        emb = CategoricalEmbedder("deep", 10, 8, rng)
        emb.cache = precompute_table(emb)
        emb.cache.table[4] = 123.0
        with dc.no_grad():
            assert np.all(emb(4).data == 123.0)
        assert not np.all(emb(4).data == 123.0)

    def test_stale_after_update(self, rng):
        emb = CategoricalEmbedder("deep", 10, 8, rng)
        cache = precompute_table(emb)
        cache.check(emb)
        opt = Adam(emb.parameters(), lr=0.1)
        with dc.Tape() as tape:
            loss = dc.tsum(emb(np.arange(10)))
        dc.backward(loss, tape)
        opt.step()
        assert cache.is_stale(emb)
        with pytest.raises(Exception, match="stale"):
            cache.check(emb)
        fresh = cache.fetch(np.arange(10), emb)
        assert cache.rebuilds == 1 and not cache.is_stale(emb)
        np.testing.assert_allclose(fresh, emb.compute(np.arange(10)).data, rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=40))
    def test_fetch_any_order(self, xs):
        emb = CategoricalEmbedder("deep", 20, 8, np.random.default_rng(3))
        cache = PrecomputedCache.empty(emb)
        x = np.array(xs)
        np.testing.assert_allclose(cache.fetch(x, emb), emb.compute(x).data, rtol=0, atol=1e-12)
        assert cache.hits + cache.misses == len(xs)
