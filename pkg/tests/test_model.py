from dataclasses import replace

import numpy as np
import pytest

from retnet import autodiff as ad
from retnet.model import (
    DecodeState,
    InputError,
    ModelConfig,
    ModelParams,
    block_forward,
    decode_step,
    greedy_generate,
    init_params,
    lm_forward,
    param_shapes,
)
from retnet.retention import ParameterError


@pytest.fixture(scope="module")
def small():
    config = ModelConfig(layers=2, d_model=32, heads=4, vocab_size=16, seed=3)
    return config, init_params(config)


class TestConfig:
    def test_ffn_default(self):
        assert ModelConfig(d_model=48, heads=4).ffn_dim == 96

    @pytest.mark.parametrize(
        "kw", [dict(d_model=30, heads=4), dict(d_model=12, heads=4), dict(layers=0), dict(vocab_size=1), dict(precision=16)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_odd_head_dim_is_a_parameter_error(self):
        with pytest.raises(ParameterError):
            ModelConfig(d_model=12, heads=4)


class TestInit:
    def test_deterministic(self):
        c = ModelConfig(seed=11)
        a, b = init_params(c).named(), init_params(c).named()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_seeds_differ(self):
        a = init_params(ModelConfig(seed=1)).named()
        b = init_params(ModelConfig(seed=2)).named()
        assert not np.array_equal(a["blocks.0.msr.wq"], b["blocks.0.msr.wq"])

    def test_embedding_std(self):
        p = init_params(ModelConfig(d_model=64, heads=4, vocab_size=256, seed=0))
        assert abs(p.embedding.std() / 64**-0.5 - 1) < 0.10

    def test_xavier_bounds(self, small):
        config, params = small
        w = params.blocks[0].w1
        bound = np.sqrt(6 / (config.d_model + config.ffn_dim))
        assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound

    def test_shapes_and_order(self, small):
        config, params = small
        named = params.named()
        assert list(named) == list(param_shapes(config))
        assert all(named[k].shape == s for k, s in param_shapes(config).items())

    def test_from_named_roundtrip(self, small):
        config, params = small
        again = ModelParams.from_named(config, params.named())
        assert all(a is b for a, b in zip(again.named().values(), params.named().values()))

    def test_trainable_names(self, small):
        config, params = small
        names = params.trainable_names(config)
        assert not any(n.endswith(("gammas", "theta")) for n in names)
        both = replace(config, trainable_theta=True, trainable_gamma=True)
        assert len(params.trainable_names(both)) == len(names) + 2 * config.layers

    def test_precision(self):
        p = init_params(ModelConfig(precision=32))
        assert all(v.dtype == np.float32 for v in p.named().values())


class TestBlock:
    def zeroed(self, params):
        named = {k: (np.zeros_like(v) if k.split(".")[-1].startswith("w") else v) for k, v in params.named().items()}
        return named

    def test_zero_weights_identity(self, small, rng):
        config, params = small
        named = self.zeroed(params)
        zp = ModelParams.from_named(config, named)
        x = rng.normal(size=(7, config.d_model))
        out, _ = block_forward(x, zp.blocks[0], config)
        np.testing.assert_array_equal(out, x)

    def test_residuals_are_wired(self, small, rng):
        config, params = small
        x = rng.normal(size=(7, config.d_model))
        with_res, _ = block_forward(x, params.blocks[0], config)
        without, _ = block_forward(x, params.blocks[0], config, residual=False)
        assert np.abs(with_res - without).max() > 1e-3


class TestForward:
    def test_shapes(self, small):
        config, params = small
        assert lm_forward([1, 2, 3], params, config).shape == (3, 16)
        assert lm_forward(np.ones((2, 5), dtype=int), params, config).shape == (2, 5, 16)

    def test_single_token(self, small):
        config, params = small
        assert lm_forward([4], params, config).shape == (1, 16)

    @pytest.mark.parametrize("mode,b", [("recurrent", None), ("chunkwise", 1), ("chunkwise", 7), ("chunkwise", 50)])
    def test_modes_agree(self, small, rng, mode, b):
        config, params = small
        tokens = rng.integers(0, 16, 50)
        par = lm_forward(tokens, params, config)
        np.testing.assert_allclose(lm_forward(tokens, params, config, mode, b), par, atol=1e-9)

    def test_causality_exact(self, small, rng):
        config, params = small
        tokens = rng.integers(0, 16, 30)
        edited = tokens.copy()
        edited[17] = (edited[17] + 5) % 16
        a, b = lm_forward(tokens, params, config), lm_forward(edited, params, config)
        np.testing.assert_array_equal(a[:17], b[:17])
        assert not np.array_equal(a[17], b[17])

    def test_batch_rows_independent(self, small, rng):
        config, params = small
        tokens = rng.integers(0, 16, (3, 12))
        out = lm_forward(tokens, params, config)
        np.testing.assert_allclose(out[1], lm_forward(tokens[1], params, config), atol=1e-12)

    @pytest.mark.parametrize("tokens", [[16], [-1], [[[1]]]])
    def test_bad_tokens(self, small, tokens):
        config, params = small
        with pytest.raises(InputError):
            lm_forward(tokens, params, config)

    def test_too_long(self, small):
        config, params = small
        with pytest.raises(InputError):
            lm_forward(np.zeros(9, dtype=int), params, replace(config, max_positions=8))

    def test_differentiable(self, small, rng):
        config, params = small
        tokens = rng.integers(0, 16, (2, 6))
        loss, grads = ad.value_and_grad(
            lambda p: ad.sum_all(lm_forward(tokens, ModelParams.from_named(config, p), config)),
            params.named(),
        )
        assert np.isfinite(loss) and set(grads) == set(params.named())


class TestDecode:
    def test_matches_parallel(self, small, rng):
        config, params = small
        tokens = rng.integers(0, 16, 40)
        state = DecodeState.fresh(config)
        rows = []
        for t in tokens:
            state, logits = decode_step(state, t, params, config)
            rows.append(logits)
        np.testing.assert_allclose(np.array(rows), lm_forward(tokens, params, config), atol=1e-9)
        assert state.position == 40

    def test_state_size_constant(self, small, rng):
        config, params = small
        tokens = rng.integers(0, 16, 1000)
        state = DecodeState.fresh(config)
        sizes = {}
        for i, t in enumerate(tokens, 1):
            state, _ = decode_step(state, t, params, config)
            if i in (10, 1000):
                sizes[i] = state.nbytes
        assert sizes[10] == sizes[1000]

    def test_position_limit(self, small):
        config, params = small
        cfg = replace(config, max_positions=2)
        state = DecodeState.fresh(cfg)
        state, _ = decode_step(state, 1, params, cfg)
        state, _ = decode_step(state, 1, params, cfg)
        with pytest.raises(InputError):
            decode_step(state, 1, params, cfg)

    def test_bad_token(self, small):
        config, params = small
        with pytest.raises(InputError):
            decode_step(DecodeState.fresh(config), 99, params, config)


class TestGenerate:
    def test_deterministic(self, small):
        config, params = small
        a = greedy_generate([1, 2, 3], 12, params, config)
        assert a == greedy_generate([1, 2, 3], 12, params, config)
        assert len(a) == 15 and a[:3] == [1, 2, 3]

    @pytest.mark.parametrize("mode", ["parallel", "chunkwise"])
    def test_modes_agree(self, small, mode):
        config, params = small
        assert greedy_generate([5, 0], 8, params, config, mode) == greedy_generate([5, 0], 8, params, config)

    def test_argmax_ties_pick_lowest(self, small):
        config, params = small
        named = dict(params.named())
        named["embedding"] = np.zeros_like(named["embedding"])
        flat = ModelParams.from_named(config, named)
        assert greedy_generate([0], 3, flat, config) == [0, 0, 0, 0]

    def test_empty_prompt(self, small):
        config, params = small
        with pytest.raises(InputError):
            greedy_generate([], 3, params, config)
