import numpy as np
import pytest

from retnet import numerics as nx
from retnet.attention import (
    KVCache,
    attention,
    attn_decode_step,
    attn_lm_forward,
    init_attention_params,
    new_cache,
)
from retnet.model import InputError, ModelConfig


@pytest.fixture(scope="module")
def model():
    config = ModelConfig(layers=2, d_model=32, heads=4, vocab_size=16, max_positions=256, seed=4)
    return config, init_attention_params(config)


class TestAttention:
    def test_single_token(self, rng):
        q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
        np.testing.assert_allclose(attention(q, k, v), v)

    def test_identical_keys_give_uniform_weights(self, rng):
        q = rng.normal(size=(5, 4))
        k = np.tile(rng.normal(size=(1, 4)), (5, 1))
        v = np.eye(5)
        w = attention(q, k, v)
        want = np.tril(np.ones((5, 5))) / np.arange(1, 6)[:, None]
        np.testing.assert_allclose(w, want, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        q, k = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
        w = attention(q, k, np.eye(9))
        assert np.abs(w.sum(-1) - 1).max() <= 1e-12
        assert np.all(np.triu(w, 1) == 0)

    def test_suffix_queries(self, rng):
        q, k, v = (rng.normal(size=(8, 4)) for _ in range(3))
        np.testing.assert_allclose(attention(q[5:], k, v), attention(q, k, v)[5:], atol=1e-13)

    def test_more_queries_than_keys(self, rng):
        with pytest.raises(nx.DimensionError):
            attention(np.ones((3, 2)), np.ones((2, 2)), np.ones((2, 2)))


class TestModel:
    def test_incremental_matches_full(self, model, rng):
        config, params = model
        tokens = rng.integers(0, 16, 50)
        cache = new_cache(config, capacity=4)
        rows = []
        for t in tokens:
            cache, logits = attn_decode_step(cache, t, params, config)
            rows.append(logits)
        np.testing.assert_allclose(np.array(rows), attn_lm_forward(tokens, params, config), atol=1e-9)

    def test_causality_exact(self, model, rng):
        config, params = model
        tokens = rng.integers(0, 16, 20)
        edited = tokens.copy()
        edited[9] = (edited[9] + 1) % 16
        a, b = attn_lm_forward(tokens, params, config), attn_lm_forward(edited, params, config)
        np.testing.assert_array_equal(a[:9], b[:9])

    def test_cache_grows_one_per_step(self, model):
        config, params = model
        cache = new_cache(config, capacity=2)
        for t in range(1, 12):
            cache, _ = attn_decode_step(cache, t % 16, params, config)
            assert cache.length == t
            assert cache.nbytes == config.layers * 2 * config.d_model * t * 8

    def test_position_limit(self, model):
        config, params = model
        cache = new_cache(config)
        cache.lengths = [config.max_positions] * config.layers
        with pytest.raises(InputError):
            attn_decode_step(cache, 0, params, config)


def test_cache_growth_keeps_contents(rng):
    cache = KVCache(1, 2, 3, np.float64, capacity=1)
    ks, vs = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    for i in range(5):
        k, v = cache.append(0, ks[:, i : i + 1], vs[:, i : i + 1])
    np.testing.assert_array_equal(k, ks)
    np.testing.assert_array_equal(v, vs)
