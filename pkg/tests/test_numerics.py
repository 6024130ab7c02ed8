"""Tensor core: op values against independent oracles, tape semantics, Adam."""

import numpy as np
import pytest

import dpir.numerics as N
from dpir.numerics import Tape, Tensor, backward

from helpers import check_grads, conv2d_reference, numerical_grad, rel_err


def rand(rng, *shape, lo=0.5, hi=1.5):
    """Magnitudes in [lo, hi] with random sign: keeps gradients O(1) and
    stays away from relu/abs kinks."""
    mag = rng.uniform(lo, hi, shape).astype(np.float32)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0).astype(np.float32)
    return mag * sign


class TestMatmul:
    def test_known_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_inner_dim_mismatch_reports_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            N.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    @pytest.mark.parametrize("seed", range(3))
    def test_grad(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rand(rng, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 4, 2), requires_grad=True)
        w = Tensor(rand(rng, 3, 2))
        check_grads(lambda: N.sum_(N.mul(a @ b, w)), {"a": a, "b": b})

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 4, 3, 5)
        b = rand(rng, 4, 5, 2)
        got = N.matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(got[i], a[i] @ b[i], rtol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_batched_grad(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 2, 4, 3), requires_grad=True)
        check_grads(lambda: N.sum_(N.silu(a @ b)), {"a": a, "b": b})


class TestConv2d:
    def test_all_ones_shortcut(self):
        x = Tensor(np.ones((1, 3, 3), np.float32))
        k = Tensor(np.ones((1, 1, 2, 2), np.float32))
        np.testing.assert_array_equal(N.conv2d(x, k).data, np.full((1, 2, 2), 4.0))

    def test_ramp_against_scalar_loop(self):
        # 5x5 ramp, 3x3 averaging kernel, stride 1, pad 1. Hand-checked:
        # center (2,2) windows rows/cols 1..3 -> mean 12; corner (0,0) sees
        # four zeros from padding -> (0+1+5+6)/9.
        x = np.arange(25, dtype=np.float32).reshape(1, 5, 5)
        k = np.full((1, 1, 3, 3), 1.0 / 9.0, np.float32)
        got = N.conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
        assert got.shape == (1, 5, 5)
        np.testing.assert_allclose(got[0, 2, 2], 12.0, atol=1e-5)
        np.testing.assert_allclose(got[0, 0, 0], 12.0 / 9.0, atol=1e-5)
        ref = conv2d_reference(x.astype(np.float64), k.astype(np.float64), 1, 1)
        np.testing.assert_allclose(got, ref, atol=1e-4)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_strided_against_scalar_loop(self, stride, padding):
        rng = np.random.default_rng(7)
        x = rand(rng, 3, 6, 5)
        k = rand(rng, 4, 3, 3, 3)
        got = N.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        ref = conv2d_reference(x.astype(np.float64), k.astype(np.float64), stride, padding)
        assert got.shape == ref.shape
        np.testing.assert_allclose(got, ref, rtol=2e-5, atol=2e-5)

    def test_batched_matches_items(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 2, 3, 5, 5)
        k = rand(rng, 4, 3, 3, 3)
        got = N.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        for i in range(2):
            one = N.conv2d(Tensor(x[i]), Tensor(k), stride=2, padding=1).data
            np.testing.assert_array_equal(got[i], one)

    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            N.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
        with pytest.raises(ValueError, match="exceeds padded input"):
            N.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    @pytest.mark.parametrize("seed", range(3))
    def test_grad(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 2, 5, 5), requires_grad=True)
        k = Tensor(rand(rng, 3, 2, 3, 3) * 0.5, requires_grad=True)
        w = Tensor(rand(rng, 3, 3, 3))
        check_grads(lambda: N.sum_(N.mul(N.conv2d(x, k, stride=2, padding=1), w)),
                    {"x": x, "k": k})


class TestLayerNorm:
    def test_hand_computed_values(self):
        # [1,2,3]: mean 2, population var 2/3; 1/sqrt(2/3 + 1e-5) = 1.2247399.
        y = N.layer_norm(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(y, [-1.2247399, 0.0, 1.2247399], atol=2e-5)

    def test_constant_input_is_finite_zero(self):
        y = N.layer_norm(Tensor(np.full(8, 3.5, np.float32))).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, 0.0, atol=1e-4)

    def test_affine(self):
        x = Tensor([1.0, 2.0, 3.0])
        g = Tensor([2.0, 2.0, 2.0])
        b = Tensor([1.0, 1.0, 1.0])
        y = N.layer_norm(x, g, b).data
        np.testing.assert_allclose(y, [1.0 - 2 * 1.2247399, 1.0, 1.0 + 2 * 1.2247399], atol=4e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_grad(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 4, 6), requires_grad=True)
        g = Tensor(rand(rng, 6), requires_grad=True)
        b = Tensor(rand(rng, 6), requires_grad=True)
        w = Tensor(rand(rng, 4, 6))
        check_grads(lambda: N.sum_(N.mul(N.layer_norm(x, g, b), w)),
                    {"x": x, "gain": g, "bias": b})


class TestSoftmaxAttention:
    def test_rows_are_distributions(self):
        rng = np.random.default_rng(0)
        p = N.softmax(Tensor(rand(rng, 5, 7) * 3)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]], np.float32)
        a = N.softmax(Tensor(x)).data
        b = N.softmax(Tensor(x + 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_attention_output_in_value_hull(self):
        # identity q=k over 2 tokens: every output row is a convex mix of v.
        q = Tensor(np.eye(2, dtype=np.float32))
        k = Tensor(np.eye(2, dtype=np.float32))
        v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], np.float32))
        out = N.scaled_dot_attention(q, k, v).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out >= 0) and np.all(out <= 1)

    def test_attention_shape_errors(self):
        with pytest.raises(ValueError, match="head-dim"):
            N.scaled_dot_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                                   Tensor(np.zeros((2, 4))))

    @pytest.mark.parametrize("seed", range(3))
    def test_attention_grad(self, seed):
        rng = np.random.default_rng(seed)
        q = Tensor(rand(rng, 4, 3), requires_grad=True)
        k = Tensor(rand(rng, 5, 3), requires_grad=True)
        v = Tensor(rand(rng, 5, 2), requires_grad=True)
        w = Tensor(rand(rng, 4, 2))
        check_grads(lambda: N.sum_(N.mul(N.scaled_dot_attention(q, k, v), w)),
                    {"q": q, "k": k, "v": v})

    def test_batched_attention_matches_slices(self):
        rng = np.random.default_rng(3)
        q, k, v = rand(rng, 2, 4, 3), rand(rng, 2, 5, 3), rand(rng, 2, 5, 3)
        got = N.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
        for i in range(2):
            one = N.scaled_dot_attention(Tensor(q[i]), Tensor(k[i]), Tensor(v[i])).data
            np.testing.assert_allclose(got[i], one, atol=1e-6)


class TestElementwiseGrads:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary(self, op, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rand(rng, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 3, 4), requires_grad=True)
        fn = getattr(N, op)
        w = Tensor(rand(rng, 3, 4))
        check_grads(lambda: N.sum_(N.mul(fn(a, b), w)), {"a": a, "b": b})

    @pytest.mark.parametrize("seed", range(3))
    def test_broadcast_binary(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rand(rng, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 4), requires_grad=True)
        check_grads(lambda: N.sum_(N.silu(N.add(a, b))), {"a": a, "b": b})

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("op", ["exp", "silu", "sigmoid", "relu", "absolute", "neg"])
    def test_unary(self, op, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 4, 5), requires_grad=True)
        w = Tensor(rand(rng, 4, 5))
        fn = getattr(N, op)
        check_grads(lambda: N.sum_(N.mul(fn(x), w)), {"x": x})

    @pytest.mark.parametrize("seed", range(3))
    def test_sqrt_log_on_positive(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0.5, 2.0, (3, 3)).astype(np.float32), requires_grad=True)
        check_grads(lambda: N.sum_(N.sqrt(x)), {"x": x})
        check_grads(lambda: N.sum_(N.log(x)), {"x": x})

    @pytest.mark.parametrize("seed", range(3))
    def test_pow(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0.5, 2.0, (4,)).astype(np.float32), requires_grad=True)
        check_grads(lambda: N.sum_(N.pow_scalar(x, 3.0)), {"x": x})


class TestReductionsMovement:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_sum_mean_grad(self, seed, axis, keepdims):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 3, 5), requires_grad=True)
        check_grads(lambda: N.sum_(N.mul(N.sum_(x, axis, keepdims),
                                         N.sum_(x, axis, keepdims))), {"x": x})
        check_grads(lambda: N.sum_(N.mul(N.mean_(x, axis, keepdims),
                                         N.mean_(x, axis, keepdims))), {"x": x})

    @pytest.mark.parametrize("seed", range(3))
    def test_movement_grads(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
        y = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
        w = Tensor(rand(rng, 2 * 3 * 8))

        def loss():
            joined = N.concat([N.transpose(x, (0, 1, 2)), y], axis=2)
            flat = N.reshape(joined, (2 * 3 * 8,))
            return N.sum_(N.mul(flat, w))

        check_grads(loss, {"x": x, "y": y})

    @pytest.mark.parametrize("seed", range(3))
    def test_narrow_grad(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 4, 6), requires_grad=True)
        w = Tensor(rand(rng, 4, 3))
        check_grads(lambda: N.sum_(N.mul(N.narrow(x, 1, 2, 3), w)), {"x": x})

    def test_narrow_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            N.narrow(Tensor(np.zeros((2, 2))), 1, 1, 4)

    def test_chunk_roundtrip(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand(rng, 2, 6))
        parts = N.chunk(x, 3, axis=-1)
        np.testing.assert_array_equal(N.concat(parts, axis=-1).data, x.data)

    @pytest.mark.parametrize("seed", range(3))
    def test_upsample_grad(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 2, 3, 3), requires_grad=True)
        w = Tensor(rand(rng, 2, 6, 6))
        check_grads(lambda: N.sum_(N.mul(N.upsample_nearest(x, 2), w)), {"x": x})

    def test_upsample_values(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32))
        y = N.upsample_nearest(x, 2).data
        np.testing.assert_array_equal(y[0, :2, :2], 1.0)
        np.testing.assert_array_equal(y[0, 2:, 2:], 4.0)


class TestTapeSemantics:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            backward(N.sum_(N.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = N.sum_(N.mul(x, x))
            backward(y)
            backward(y)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_constant_loss_gives_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            backward(N.sum_(N.mul(x, N.zeros(2))))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = N.mul(x, x)
            with pytest.raises(ValueError, match="scalar"):
                backward(y)

    def test_loss_off_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            pass
        with Tape():
            with pytest.raises(ValueError, match="active tape"):
                backward(x)

    def test_backward_without_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(RuntimeError, match="active Tape"):
            backward(x)

    def test_no_tape_means_no_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = N.mul(x, x)
        assert y.requires_grad
        with Tape() as tape:
            pass
        assert len(tape) == 0

    @pytest.mark.parametrize("seed", range(3))
    def test_shared_subexpression(self, seed):
        # x feeds two branches; accumulation must match finite differences.
        rng = np.random.default_rng(seed)
        x = Tensor(rand(rng, 3, 3), requires_grad=True)
        w = Tensor(rand(rng, 3, 3))
        check_grads(lambda: N.sum_(N.add(N.mul(x, w), N.mul(x, x))), {"x": x})

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            y = N.sum_(N.mul(x.detach(), x))
            backward(y)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(11)
        a, b = rand(rng, 16, 16), rand(rng, 16, 16)

        def run():
            x = Tensor(a, requires_grad=True)
            with Tape():
                loss = N.sum_(N.silu(N.matmul(x, Tensor(b))))
                backward(loss)
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([1.0, -2.0, 3.0], np.float32), requires_grad=True)
        params = {"p": p}
        state = N.AdamState(params, lr=0.1)
        g = np.array([0.5, -0.25, 1.0], np.float32)
        before = p.data.copy()
        N.adam_step(params, {"p": g}, state)
        np.testing.assert_allclose(before - p.data, 0.1 * np.sign(g), rtol=1e-4)

    def test_zero_grad_keeps_params_on_fresh_state(self):
        p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        params = {"p": p}
        state = N.AdamState(params, lr=0.1)
        N.adam_step(params, {"p": np.zeros(2, np.float32)}, state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_quadratic_converges(self):
        # minimize (w-3)^2 from 0: 200 steps at lr 0.1 lands within 0.05.
        w = Tensor(np.zeros(1, np.float32), requires_grad=True)
        params = {"w": w}
        state = N.AdamState(params, lr=0.1)
        for _ in range(200):
            g = 2.0 * (w.data - 3.0)
            N.adam_step(params, {"w": g.astype(np.float32)}, state)
        assert abs(w.data[0] - 3.0) < 0.05

    def test_nan_grad_aborts(self):
        p = Tensor(np.ones(2, np.float32), requires_grad=True)
        params = {"p": p}
        state = N.AdamState(params)
        with pytest.raises(RuntimeError, match="non-finite"):
            N.adam_step(params, {"p": np.array([1.0, np.nan], np.float32)}, state)

    def test_frozen_param_rejected_at_registration(self):
        p = Tensor(np.ones(2, np.float32), requires_grad=False)
        with pytest.raises(ValueError, match="frozen"):
            N.AdamState({"p": p})

    def test_group_mismatch_rejected(self):
        p = Tensor(np.ones(2, np.float32), requires_grad=True)
        q = Tensor(np.ones(2, np.float32), requires_grad=True)
        state = N.AdamState({"p": p})
        with pytest.raises(ValueError, match="mismatch"):
            N.adam_step({"q": q}, {"q": np.zeros(2, np.float32)}, state)

    def test_weight_decay_decouples(self):
        # with zero grads, decay shrinks params by lr*wd exactly on step 1.
        p = Tensor(np.array([2.0], np.float32), requires_grad=True)
        params = {"p": p}
        state = N.AdamState(params, lr=0.5, weight_decay=0.1)
        N.adam_step(params, {"p": np.zeros(1, np.float32)}, state)
        np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.1 * 2.0], rtol=1e-6)

    def test_update_is_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = Tensor(rng.standard_normal(8, dtype=np.float32), requires_grad=True)
            params = {"p": p}
            state = N.AdamState(params, lr=0.01)
            for i in range(10):
                g = rng.standard_normal(8, dtype=np.float32)
                N.adam_step(params, {"p": g}, state)
            return p.data.copy()

        assert run().tobytes() == run().tobytes()
