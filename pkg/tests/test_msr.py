import numpy as np
import pytest

from retnet import numerics as nx
from retnet.msr import ContractError, MsrParams, head_gammas, msr_forward
from retnet.retention import RetentionState, XPos, retention_parallel, xpos_apply


def make_params(rng, d=32, h=4, zero=False):
    hd = d // h

    def w():
        return np.zeros((d, d)) if zero else rng.normal(size=(d, d)) / np.sqrt(d)

    return MsrParams(
        wq=w(), wk=w(), wv=w(), wg=w(), wo=w(),
        gn_scale=rng.normal(size=d) if not zero else np.ones(d),
        gn_shift=rng.normal(size=d) * 0.1 if not zero else np.zeros(d),
        gammas=head_gammas(h),
        theta=XPos.default(hd).theta,
        heads=h,
    )


def fresh(p, lead=()):
    return RetentionState.fresh(p.head_dim, lead + (p.heads,))


class TestHeadGammas:
    def test_one(self, golden):
        assert head_gammas(1).tolist() == golden["head_gammas_1"]

    def test_three(self, golden):
        np.testing.assert_allclose(head_gammas(3), golden["head_gammas_3"], atol=1e-9)

    @pytest.mark.parametrize("h", range(1, 17))
    def test_range_and_order(self, h):
        g = head_gammas(h)
        assert np.all((g > 0) & (g < 1))
        assert np.all(np.diff(g) > 0)


class TestForward:
    def test_zero_weights(self, rng):
        p = make_params(rng, zero=True)
        out, _ = msr_forward(rng.normal(size=(10, 32)), p)
        np.testing.assert_array_equal(out, 0.0)

    @pytest.mark.parametrize("b", [1, 5, 16, 64])
    def test_modes_agree(self, rng, b):
        p = make_params(rng)
        x = rng.normal(size=(64, 32))
        par, _ = msr_forward(x, p, "parallel")
        rec, s_rec = msr_forward(x, p, "recurrent", fresh(p))
        chk, s_chk = msr_forward(x, p, "chunkwise", chunk_len=b)
        np.testing.assert_allclose(rec, par, atol=1e-9)
        np.testing.assert_allclose(chk, par, atol=1e-9)
        np.testing.assert_allclose(s_chk.s, s_rec.s, atol=1e-9)
        assert s_rec.position == s_chk.position == 64

    def test_modes_agree_stabilized(self, rng):
        p = make_params(rng)
        x = rng.normal(size=(40, 32))
        par, _ = msr_forward(x, p, stabilized=True)
        rec, _ = msr_forward(x, p, "recurrent", fresh(p), stabilized=True)
        chk, _ = msr_forward(x, p, "chunkwise", chunk_len=7, stabilized=True)
        np.testing.assert_allclose(rec, par, atol=1e-9)
        np.testing.assert_allclose(chk, par, atol=1e-9)

    def test_batched(self, rng):
        p = make_params(rng)
        x = rng.normal(size=(3, 12, 32))
        out, _ = msr_forward(x, p)
        for i in range(3):
            np.testing.assert_allclose(out[i], msr_forward(x[i], p)[0], atol=1e-12)
        rec, _ = msr_forward(x, p, "recurrent", fresh(p, (3,)))
        np.testing.assert_allclose(rec, out, atol=1e-9)

    def test_single_head_reduction(self, rng):
        p = make_params(rng, d=8, h=1)
        x = rng.normal(size=(9, 8))
        out, _ = msr_forward(x, p)
        xp = XPos(8, p.theta)
        q, k, v = (xpos_apply(x @ p.wq, xp), xpos_apply(x @ p.wk, xp), x @ p.wv)
        y = retention_parallel(q, k, v, 0.96875)
        y = nx.group_norm(y, 1, scale=p.gn_scale, shift=p.gn_shift)
        want = (nx.swish(x @ p.wg) * y) @ p.wo
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_head_permutation_symmetry(self, rng):
        # permuting heads (weights, decays, norm params) permutes nothing visible
        d, h = 16, 4
        p = make_params(rng, d=d, h=h)
        p.gammas = np.array([0.9, 0.8, 0.95, 0.7])
        perm = np.array([2, 0, 3, 1])
        cols = np.concatenate([np.arange(i * 4, i * 4 + 4) for i in perm])
        q = MsrParams(
            wq=p.wq[:, cols], wk=p.wk[:, cols], wv=p.wv[:, cols], wg=p.wg[:, cols], wo=p.wo[cols],
            gn_scale=p.gn_scale[cols], gn_shift=p.gn_shift[cols], gammas=p.gammas[perm],
            theta=p.theta, heads=h,
        )
        x = rng.normal(size=(11, d))
        np.testing.assert_allclose(msr_forward(x, q)[0], msr_forward(x, p)[0], atol=1e-12)

    def test_recurrent_needs_state(self, rng):
        with pytest.raises(ContractError):
            msr_forward(rng.normal(size=(3, 32)), make_params(rng), "recurrent")

    def test_chunkwise_needs_length(self, rng):
        with pytest.raises(ContractError):
            msr_forward(rng.normal(size=(3, 32)), make_params(rng), "chunkwise")

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            msr_forward(rng.normal(size=(3, 32)), make_params(rng), "sideways")

    def test_width_mismatch(self, rng):
        with pytest.raises(nx.DimensionError):
            msr_forward(rng.normal(size=(3, 31)), make_params(rng))

    def test_streaming_recurrent(self, rng):
        p = make_params(rng)
        x = rng.normal(size=(30, 32))
        full, _ = msr_forward(x, p)
        a, s = msr_forward(x[:13], p, "recurrent", fresh(p))
        b, s = msr_forward(x[13:], p, "chunkwise", s, chunk_len=4)
        np.testing.assert_allclose(np.vstack([a, b]), full, atol=1e-9)
