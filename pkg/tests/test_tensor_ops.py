"""Tensor engine: op semantics, exact gradients, serialization."""

import io

import numpy as np
import pytest

from stormkan import ops
from stormkan.errors import DataError, ShapeError
from stormkan.tape import Tape
from stormkan.tensor import Tensor

from helpers import check_gradients, numerical_grad, max_rel_err

rng = np.random.default_rng(42)


def leafy(tape, arr):
    return tape.leaf(arr, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        x = rng.standard_normal((3, 3))
        out = ops.matmul(tape.constant(np.eye(3)), tape.constant(x))
        np.testing.assert_allclose(out.data, x)

    def test_hand_example(self):
        tape = Tape()
        a = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        b = tape.constant([[0.0], [1.0]])
        np.testing.assert_array_equal(ops.matmul(a, b).data, [[2.0], [4.0]])

    def test_gradients(self):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        r = rng.standard_normal((3, 2))

        def build(tape, leaves):
            return ops.sum_(ops.mul(ops.matmul(*leaves), tape.constant(r)))

        check_gradients(build, [a, b])

    def test_batched_broadcast_gradients(self):
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((3, 5, 2))
        r = rng.standard_normal((2, 3, 4, 2))

        def build(tape, leaves):
            return ops.sum_(ops.mul(ops.matmul(*leaves), tape.constant(r)))

        check_gradients(build, [a, b])

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.matmul(tape.constant(np.ones((2, 3))),
                       tape.constant(np.ones((2, 3))))


class TestConv2d:
    def test_identity_channel_mix(self):
        tape = Tape()
        x = rng.standard_normal((2, 3, 7, 7))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = ops.conv2d(tape.constant(x), tape.constant(w))
        np.testing.assert_allclose(out.data, x)

    def test_reference_extents(self):
        # 8->16 channels, 5x5 kernel, same padding on 156x156
        tape = Tape()
        x = tape.constant(rng.standard_normal((1, 8, 156, 156)).astype(np.float32))
        w = tape.constant(rng.standard_normal((16, 8, 5, 5)).astype(np.float32))
        assert ops.conv2d(x, w, stride=1, padding=2).shape == (1, 16, 156, 156)

    def test_dilation_receptive_field(self):
        # dilation-3 3x3 kernel acts like a zero-interleaved 7x7 kernel
        x = rng.standard_normal((1, 2, 12, 12))
        w = rng.standard_normal((3, 2, 3, 3))
        w_stuffed = np.zeros((3, 2, 7, 7))
        w_stuffed[:, :, ::3, ::3] = w
        tape = Tape()
        a = ops.conv2d(tape.constant(x), tape.constant(w), dilation=3,
                       padding=3)
        b = ops.conv2d(tape.constant(x), tape.constant(w_stuffed), dilation=1,
                       padding=3)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    @pytest.mark.parametrize("cin,cout,k,stride,padding,dilation", [
        (3, 4, 3, 1, 1, 1),
        (3, 2, 1, 1, 0, 1),
        (2, 3, 3, 2, 3, 2),
        (2, 2, 5, 1, 2, 1),
        (2, 2, 3, 3, 0, 1),
    ])
    def test_gradients(self, cin, cout, k, stride, padding, dilation):
        x = rng.standard_normal((2, cin, 9, 9))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)

        def build(tape, leaves):
            out = ops.conv2d(leaves[0], leaves[1], leaves[2], stride=stride,
                             padding=padding, dilation=dilation)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x, w, b])

    def test_non_integral_extent_rejected(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.conv2d(tape.constant(np.ones((1, 1, 7, 7))),
                       tape.constant(np.ones((1, 1, 2, 2))), stride=2)

    def test_channel_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.conv2d(tape.constant(np.ones((1, 3, 7, 7))),
                       tape.constant(np.ones((1, 2, 3, 3))))


class TestMaxPool:
    def test_constant_input(self):
        tape = Tape()
        out = ops.maxpool2d(tape.constant(np.full((1, 2, 6, 6), 3.5)), 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 3.5))

    def test_reference_extent(self):
        tape = Tape()
        x = tape.constant(rng.standard_normal((1, 1, 156, 156)).astype(np.float32))
        assert ops.maxpool2d(x, 2, 2).shape == (1, 1, 78, 78)

    def test_tie_breaks_to_first_flat_index(self):
        x = np.zeros((1, 1, 2, 2))  # all equal: 4-way tie
        tape = Tape()
        xv = leafy(tape, x)
        out = ops.maxpool2d(xv, 2, 2)
        grads = tape.backprop(ops.sum_(out))
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(grads.wrt(xv), expected)

    def test_kernel_too_large(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.maxpool2d(tape.constant(np.ones((1, 1, 3, 3))), 4, 4)

    @pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 1), (2, 1)])
    def test_gradients(self, kernel, stride):
        # keep values distinct so no tie sits near the FD step
        x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)

        def build(tape, leaves):
            out = ops.maxpool2d(leaves[0], kernel, stride)
            r = np.cos(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])


class TestAvgPool:
    def test_global_mean(self):
        x = rng.standard_normal((1, 1, 4, 4))
        tape = Tape()
        out = ops.avgpool2d_fixed(tape.constant(x), 4, 4)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], x.mean())

    def test_quadrant_means(self):
        x = rng.standard_normal((1, 1, 4, 4))
        tape = Tape()
        out = ops.avgpool2d_fixed(tape.constant(x), 2, 2)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], x[0, 0, :2, :2].mean())
        np.testing.assert_allclose(out.data[0, 0, 1, 1], x[0, 0, 2:, 2:].mean())

    def test_two_stage_composition(self):
        x = rng.standard_normal((1, 2, 16, 16))
        tape = Tape()
        one = ops.avgpool2d_fixed(tape.constant(x), 8, 8)
        two = ops.avgpool2d_fixed(
            ops.avgpool2d_fixed(tape.constant(x), 4, 4), 2, 2)
        np.testing.assert_allclose(one.data, two.data, atol=1e-6)

    def test_gradients(self):
        x = rng.standard_normal((2, 2, 6, 6))

        def build(tape, leaves):
            out = ops.avgpool2d_fixed(leaves[0], 2, 2)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])

    def test_overlapping_gradients(self):
        x = rng.standard_normal((1, 1, 5, 5))

        def build(tape, leaves):
            out = ops.avgpool2d_fixed(leaves[0], 3, 1)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])


class TestAdaptivePool:
    def test_identity(self):
        x = rng.standard_normal((1, 2, 5, 7))
        tape = Tape()
        out = ops.adaptive_avgpool2d(tape.constant(x), 5, 7)
        np.testing.assert_array_equal(out.data, x)

    def test_block_means_6_to_2(self):
        x = rng.standard_normal((1, 1, 6, 6))
        tape = Tape()
        out = ops.adaptive_avgpool2d(tape.constant(x), 2, 2)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], x[0, 0, :3, :3].mean())
        np.testing.assert_allclose(out.data[0, 0, 1, 0], x[0, 0, 3:, :3].mean())

    def test_block_means_152_to_2(self):
        x = rng.standard_normal((1, 1, 152, 152)).astype(np.float32)
        tape = Tape()
        out = ops.adaptive_avgpool2d(tape.constant(x), 2, 2)
        np.testing.assert_allclose(out.data[0, 0, 0, 1],
                                   x[0, 0, :76, 76:].mean(), rtol=1e-5)

    def test_gradients_odd_bins(self):
        x = rng.standard_normal((1, 2, 5, 5))

        def build(tape, leaves):
            out = ops.adaptive_avgpool2d(leaves[0], 2, 2)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])


class TestRingPool:
    def test_matches_slice_and_adaptive_composition(self):
        x = rng.standard_normal((2, 1, 44, 44))
        tape = Tape()
        xv = tape.constant(x)
        fused = ops.ring_pool(xv, r_center=21, ring_count=9)
        for i in range(9):
            lo, hi = (20, 23) if i == 0 else (21 - 2 * i, 21 + 2 * i)
            crop = ops.slice_(xv, (slice(None), slice(None),
                                   slice(lo, hi), slice(lo, hi)))
            ref = ops.adaptive_avgpool2d(crop, 2, 2)
            np.testing.assert_allclose(fused.data[:, i],
                                       ref.data.reshape(2, 4), atol=1e-10)

    def test_gradients(self):
        x = rng.standard_normal((2, 1, 24, 24))

        def build(tape, leaves):
            out = ops.ring_pool(leaves[0], r_center=11, ring_count=5)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])

    def test_geometry_validation(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.ring_pool(tape.constant(np.ones((1, 1, 20, 20))), 10, 9)


ELEMENTWISE_CASES = {
    "relu": lambda t, v: ops.relu(v),
    "silu": lambda t, v: ops.silu(v),
    "tanh": lambda t, v: ops.tanh(v),
    "softmax": lambda t, v: ops.softmax(v, axis=1),
    "add": lambda t, v: ops.add(v, t.constant(np.linspace(-1, 1, 12).reshape(3, 4))),
    "mul": lambda t, v: ops.mul(v, t.constant(np.linspace(0.5, 2, 12).reshape(3, 4))),
    "sub": lambda t, v: ops.sub(v, t.constant(np.linspace(-1, 1, 12).reshape(3, 4))),
    "abs": lambda t, v: ops.abs_(v),
    "scale": lambda t, v: ops.scale(v, -2.5),
    "concat": lambda t, v: ops.concat(
        [v, t.constant(np.ones((3, 2)))], axis=1),
    "slice": lambda t, v: ops.slice_(v, (slice(1, 3), slice(0, 2))),
    "mean": lambda t, v: ops.mean(v, axis=1),
    "flatten": lambda t, v: ops.flatten(v),
    "reshape": lambda t, v: ops.reshape(v, (4, 3)),
    "transpose": lambda t, v: ops.transpose(v, (1, 0)),
    "clamp": lambda t, v: ops.clamp(v, -0.5, 0.5),
    "sum": lambda t, v: ops.sum_(v, axis=0),
}


class TestElementwise:
    def test_silu_at_zero(self):
        tape = Tape()
        assert ops.silu(tape.constant(np.zeros(3))).data[0] == 0.0

    def test_softmax_of_constant_is_uniform(self):
        tape = Tape()
        out = ops.softmax(tape.constant(np.full((2, 5), 3.0)), axis=1)
        np.testing.assert_allclose(out.data, 0.2)

    @pytest.mark.parametrize("name", sorted(ELEMENTWISE_CASES))
    def test_gradients(self, name):
        # keep away from relu/abs/clamp kinks
        x = rng.uniform(0.05, 0.45, (3, 4)) * np.where(
            rng.uniform(size=(3, 4)) < 0.5, -1, 1)
        build_op = ELEMENTWISE_CASES[name]

        def build(tape, leaves):
            out = build_op(tape, leaves[0])
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x])

    def test_concat_extent_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.concat([tape.constant(np.ones((2, 3))),
                        tape.constant(np.ones((3, 3)))], axis=1)

    def test_axis_out_of_range(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.softmax(tape.constant(np.ones((2, 3))), axis=5)


class TestLstm:
    def _params(self, feat, hid, scale=0.3):
        wx = rng.standard_normal((4 * hid, feat)) * scale
        wh = rng.standard_normal((4 * hid, hid)) * scale
        b = rng.standard_normal(4 * hid) * scale
        return wx, wh, b

    def test_zero_params_zero_state(self):
        tape = Tape()
        x = tape.constant(rng.standard_normal((2, 3, 5)))
        out = ops.lstm(x, tape.constant(np.zeros((8, 5))),
                       tape.constant(np.zeros((8, 2))),
                       tape.constant(np.zeros(8)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_single_step_matches_hand_unrolled_cell(self):
        feat, hid = 4, 3
        wx, wh, b = self._params(feat, hid)
        x = rng.standard_normal((2, 1, feat))
        tape = Tape()
        out = ops.lstm(tape.constant(x), tape.constant(wx),
                       tape.constant(wh), tape.constant(b))

        def sigmoid(v):
            return 1.0 / (1.0 + np.exp(-v))

        z = x[:, 0] @ wx.T + b
        i, f = sigmoid(z[:, :hid]), sigmoid(z[:, hid:2 * hid])
        g, o = np.tanh(z[:, 2 * hid:3 * hid]), sigmoid(z[:, 3 * hid:])
        c = i * g
        np.testing.assert_allclose(out.data, o * np.tanh(c), atol=1e-12)

    def test_reference_shape(self):
        wx, wh, b = self._params(5, 64, scale=0.1)
        tape = Tape()
        out = ops.lstm(tape.constant(rng.standard_normal((2, 3, 5))),
                       tape.constant(wx), tape.constant(wh), tape.constant(b))
        assert out.shape == (2, 64)

    def test_gradients_bptt(self):
        feat, hid = 3, 2
        wx, wh, b = self._params(feat, hid)
        x = rng.standard_normal((2, 4, feat))

        def build(tape, leaves):
            out = ops.lstm(*leaves)
            r = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ops.sum_(ops.mul(out, tape.constant(r)))

        check_gradients(build, [x, wx, wh, b])

    def test_param_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ops.lstm(tape.constant(np.ones((1, 2, 5))),
                     tape.constant(np.ones((8, 4))),
                     tape.constant(np.ones((8, 2))),
                     tape.constant(np.ones(8)))


class TestBackprop:
    def test_sum_gives_ones(self):
        tape = Tape()
        x = leafy(tape, rng.standard_normal((3, 4)))
        grads = tape.backprop(ops.sum_(x))
        np.testing.assert_array_equal(grads.wrt(x), np.ones((3, 4)))

    def test_mean_squared_error_gradient(self):
        x_arr = rng.standard_normal(6)
        t_arr = rng.standard_normal(6)
        tape = Tape()
        x = leafy(tape, x_arr)
        diff = ops.sub(x, tape.constant(t_arr))
        grads = tape.backprop(ops.mean(ops.mul(diff, diff)))
        np.testing.assert_allclose(grads.wrt(x), 2 * (x_arr - t_arr) / 6,
                                   atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = leafy(tape, np.ones((2, 2)))
        with pytest.raises(ShapeError):
            tape.backprop(ops.relu(x))

    def test_disconnected_param_zero_gradient(self):
        from stormkan.tensor import Parameter
        tape = Tape()
        x = leafy(tape, np.ones(3))
        unused = Parameter("unused", np.ones(4))
        grads = tape.backprop(ops.sum_(x))
        np.testing.assert_array_equal(grads.wrt_param(unused), np.zeros(4))

    def test_deterministic_eval(self):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def run():
            tape = Tape()
            out = ops.conv2d(tape.constant(x), tape.constant(w), padding=1)
            return ops.mean(ops.silu(out)).data.copy()

        assert np.array_equal(run(), run())

    def test_checked_mode_flags_nonfinite(self):
        from stormkan.errors import NumericsError
        tape = Tape(checked=True)
        x = tape.constant(np.array([1e308]))
        with pytest.raises(NumericsError):
            ops.mul(x, x)


class TestTensorSerialization:
    def test_roundtrip(self):
        t = Tensor(rng.standard_normal((3, 4, 5)).astype(np.float32))
        back = Tensor.frombytes(t.tobytes())
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back.data, t.data)

    def test_roundtrip_f64_stream(self):
        t1 = Tensor(rng.standard_normal((2, 3)))
        t2 = Tensor(rng.standard_normal(7).astype(np.float32))
        buf = io.BytesIO()
        t1.write(buf)
        t2.write(buf)
        buf.seek(0)
        np.testing.assert_array_equal(Tensor.read(buf).data, t1.data)
        np.testing.assert_array_equal(Tensor.read(buf).data, t2.data)

    def test_magic_mismatch(self):
        with pytest.raises(DataError):
            Tensor.frombytes(b"JUNK" + b"\x00" * 16)

    def test_truncation(self):
        payload = Tensor(np.ones((4, 4), dtype=np.float32)).tobytes()
        with pytest.raises(DataError):
            Tensor.frombytes(payload[:-8])
