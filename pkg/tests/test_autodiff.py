import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retnet import autodiff as ad
from retnet.harness.verify import PRIMITIVE_GRAD_TOL, primitive_gradcheck_errors


class TestTape:
    def test_identity_matmul(self, rng):
        tape = ad.Tape()
        b = rng.normal(size=(3, 2))
        out = ad.matmul(tape.constant(np.eye(3)), tape.leaf(b))
        np.testing.assert_array_equal(out.value, b)

    def test_three_op_chain_is_a_topological_suffix(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(2, 2)))
        before = len(tape)
        y = ad.gelu(x)
        z = ad.hadamard(y, x)
        w = ad.sum_all(z)
        assert len(tape) == before + 3
        assert [n.kind for n in tape.nodes[before:]] == ["gelu", "hadamard", "sum"]
        for node in (y, z, w):
            assert all(p < node.id for p in node.parents)

    def test_replay_is_bit_identical(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(3, 4)))
        w = tape.leaf(rng.normal(size=(4, 4)))
        h = ad.group_norm(ad.swish(ad.matmul(x, w)), 2, np.ones(4), np.zeros(4))
        ad.cross_entropy(h, np.array([0, 1, 3]), np.array([True, True, False]))
        replayed = tape.replay()
        for node, val in zip(tape.nodes, replayed):
            np.testing.assert_array_equal(node.value, val)

    def test_plain_arrays_skip_the_tape(self, rng):
        a = rng.normal(size=(2, 2))
        assert isinstance(ad.gelu(a), np.ndarray)

    def test_nodes_from_other_tapes_rejected(self):
        a, b = ad.Tape().leaf(np.ones((2, 2))), ad.Tape().leaf(np.ones((2, 2)))
        with pytest.raises(ad.ContractError):
            ad.add(a, b)

    def test_unknown_op(self):
        with pytest.raises(ad.ContractError):
            ad.Tape().record("no-such-op", np.ones(2))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(3, 5)))
        grads = tape.backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads[x.id], np.ones((3, 5)))

    def test_square(self, rng):
        tape = ad.Tape()
        xv = rng.normal(size=(4,))
        x = tape.leaf(xv)
        grads = tape.backward(ad.sum_all(ad.hadamard(x, x)))
        np.testing.assert_allclose(grads[x.id], 2 * xv, rtol=1e-15)

    def test_non_scalar_loss(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ad.ContractError):
            tape.backward(ad.gelu(x))

    def test_unreachable_leaf_gets_zeros(self):
        tape = ad.Tape()
        x, y = tape.leaf(np.ones(3)), tape.leaf(np.ones((2, 2)))
        grads = tape.backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads[y.id], np.zeros((2, 2)))

    def test_fan_out_accumulates(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([2.0]))
        loss = ad.sum_all(ad.add(ad.add(x, x), x))
        assert tape.backward(loss)[x.id].tolist() == [3.0]

    def test_intermediate_grads_retained(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=3))
        y = ad.scale(x, 3.0)
        tape.backward(ad.sum_all(y))
        np.testing.assert_array_equal(y.grad, np.ones(3))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_linearity(self, a, b, seed):
        # grad(a f + b g) == a grad f + b grad g
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(3, 3))
        f = lambda p: ad.sum_all(ad.gelu(ad.matmul(p["x"], w)))  # noqa: E731
        g = lambda p: ad.sum_all(ad.swish(p["x"]))  # noqa: E731
        params = {"x": rng.normal(size=(2, 3))}
        _, gf = ad.value_and_grad(f, params)
        _, gg = ad.value_and_grad(g, params)
        _, gc = ad.value_and_grad(lambda p: ad.add(ad.scale(f(p), a), ad.scale(g(p), b)), params)
        np.testing.assert_allclose(gc["x"], a * gf["x"] + b * gg["x"], atol=1e-12)


class TestValueAndGrad:
    def test_returns_named_grads(self, rng):
        params = {"w": rng.normal(size=(2, 2)), "b": rng.normal(size=2)}
        loss, grads = ad.value_and_grad(lambda p: ad.sum_all(ad.add(p["w"], p["b"])), params)
        assert set(grads) == {"w", "b"}
        assert loss == pytest.approx(params["w"].sum() + 2 * params["b"].sum())
        np.testing.assert_array_equal(grads["b"], [2.0, 2.0])

    def test_constant_function_rejected(self):
        with pytest.raises(ad.ContractError):
            ad.value_and_grad(lambda p: np.float64(1.0), {"x": np.ones(1)})


class TestFiniteDifferences:
    def test_square_at_one(self):
        _, g = ad.value_and_grad(lambda p: ad.sum_all(ad.hadamard(p["p"], p["p"])), {"p": np.array([1.0])})
        assert abs(g["p"][0] - 2.0) <= 1e-9
        err = ad.finite_diff_check(lambda p: ad.sum_all(ad.hadamard(p["p"], p["p"])), {"p": np.array([1.0])})
        assert err <= 1e-9

    def test_constant_gives_zero(self):
        f = lambda p: ad.sum_all(ad.scale(ad.sub(p["p"], p["p"]), 1.0))  # noqa: E731
        assert ad.finite_diff_check(f, {"p": np.array([0.3, -2.0])}) == 0.0

    def test_sampled_coordinates(self, rng):
        f = lambda p: ad.sum_all(ad.gelu(p["x"]))  # noqa: E731
        assert ad.finite_diff_check(f, {"x": rng.normal(size=(20, 20))}, max_coords=10) <= 1e-6

    def test_bad_step(self):
        with pytest.raises(ValueError):
            ad.finite_diff_check(lambda p: ad.sum_all(p["x"]), {"x": np.ones(1)}, step=0)


@pytest.mark.parametrize("name,err", primitive_gradcheck_errors())
def test_primitive_gradient(name, err):
    assert err <= PRIMITIVE_GRAD_TOL, name


class TestCrossEntropy:
    def test_uniform(self):
        z = np.zeros((2, 3, 16))
        loss = ad.cross_entropy(z, np.zeros((2, 3), dtype=int), np.ones((2, 3), dtype=bool))
        assert float(loss) == pytest.approx(np.log(16), abs=1e-12)

    def test_confident(self):
        z = np.zeros((1, 1, 4))
        z[0, 0, 2] = 1e3
        assert float(ad.cross_entropy(z, np.array([[2]]), np.array([[True]]))) < 1e-12

    def test_literal_oracle(self, rng):
        z = rng.normal(size=(3, 5, 7)) * 4
        t = rng.integers(0, 7, (3, 5))
        m = rng.random((3, 5)) < 0.6
        m[0, 0] = True
        logp = np.log(np.exp(z) / np.exp(z).sum(-1, keepdims=True))
        want = -(np.take_along_axis(logp, t[..., None], -1)[..., 0] * m).sum() / m.sum()
        assert abs(float(ad.cross_entropy(z, t, m)) - want) <= 1e-10

    def test_empty_mask(self):
        with pytest.raises(ad.ContractError):
            ad.cross_entropy(np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))
