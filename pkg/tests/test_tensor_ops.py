"""Forward semantics of the tensor core, checked against independent oracles."""

import io

import numpy as np
import pytest

from sarunet import Tensor4, ops, tensor
from sarunet.errors import ConfigurationError, DimensionError, UsageError
from sarunet.tensor import read_t4, set_debug_checks, write_t4

from oracles import bilinear_double, conv2d_loops, max_pool2_windows


def t(arr, **kw):
    return tensor(np.asarray(arr), **kw)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = t(np.ones((1, 1, 3, 3)))
        w = t(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w, padding=1)
        assert y.data[0, 0, 1, 1] == 9.0
        for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y.data[0, 0][corner] == 4.0

    def test_dirac_kernel_is_identity(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = ops.conv2d(x, t(w), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_grouped_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 4, 7, 7))
        w = rng.normal(size=(6, 2, 3, 3))
        y = ops.conv2d(t(x, dtype=np.float64), t(w, dtype=np.float64),
                       padding=1, groups=2)
        ref = conv2d_loops(x, w, padding=1, groups=2)
        err = np.abs(y.data - ref).max() / np.abs(ref).max()
        assert err <= 1e-6

    def test_direct_and_im2col_paths_agree(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n, cin, g = rng.integers(1, 3), int(rng.integers(1, 5)), 1
            if cin % 2 == 0 and rng.random() < 0.5:
                g = cin
            cout = int(rng.integers(1, 4)) * g
            k = int(rng.choice([1, 3]))
            h = int(rng.integers(k, 9))
            x = t(rng.normal(size=(n, cin, h, h)).astype(np.float32))
            w = t(rng.normal(size=(cout, cin // g, k, k)).astype(np.float32))
            a = ops.conv2d(x, w, padding=k // 2, groups=g, method="im2col")
            b = ops.conv2d(x, w, padding=k // 2, groups=g, method="direct")
            err = np.abs(a.data - b.data).max() / max(np.abs(a.data).max(), 1e-12)
            assert err <= 1e-5

    def test_stride_and_bias(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 9, 9))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y = ops.conv2d(t(x, dtype=np.float64), t(w, dtype=np.float64),
                       t(b.reshape(1, 3, 1, 1), dtype=np.float64),
                       stride=2, padding=1)
        ref = conv2d_loops(x, w, bias=b, stride=2, padding=1)
        assert y.shape == (1, 3, 5, 5)
        np.testing.assert_allclose(y.data, ref, rtol=1e-12)

    def test_shape_errors(self):
        x = t(np.ones((1, 3, 4, 4)))
        with pytest.raises(DimensionError):
            ops.conv2d(x, t(np.ones((2, 2, 3, 3))), groups=2)  # cin 3 not divisible
        with pytest.raises(ConfigurationError):
            ops.conv2d(x, t(np.ones((2, 3, 3, 3))), stride=2)  # non-integral output
        with pytest.raises(DimensionError):
            ops.conv2d(x, t(np.ones((2, 1, 3, 3))), groups=1)  # cin/g mismatch


class TestBatchNorm:
    def test_normalizes_batch(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(loc=3.0, scale=2.0, size=(4, 3, 6, 6)))
        gamma = t(np.ones((1, 3, 1, 1)))
        beta = t(np.zeros((1, 3, 1, 1)))
        rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
        y = ops.batch_norm(x, gamma, beta, rm, rv, train=True)
        assert np.abs(y.data.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(y.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(6)
        x = t(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        gamma = t(np.zeros((1, 2, 1, 1)))
        beta = t(np.full((1, 2, 1, 1), 0.25))
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        from sarunet import Tape, backward
        with Tape():
            y = ops.batch_norm(x, gamma, beta, rm, rv, train=True)
            loss = ops.sum_all(y)
        assert np.all(y.data == 0.25)
        backward(loss)
        assert np.all(x.grad == 0.0)

    def test_running_stats_update_and_eval_mode(self):
        rng = np.random.default_rng(7)
        x = rng.normal(loc=1.5, size=(3, 2, 4, 4)).astype(np.float32)
        gamma = t(np.ones((1, 2, 1, 1)))
        beta = t(np.zeros((1, 2, 1, 1)))
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        ops.batch_norm(t(x), gamma, beta, rm, rv, train=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        y = ops.batch_norm(t(x), gamma, beta, rm, rv, train=False)
        expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y.data, expect, rtol=1e-5)

    def test_channel_mismatch(self):
        x = t(np.ones((1, 3, 4, 4)))
        with pytest.raises(DimensionError):
            ops.batch_norm(x, t(np.ones((1, 2, 1, 1))), t(np.zeros((1, 2, 1, 1))),
                           np.zeros(2, np.float32), np.ones(2, np.float32), train=True)


class TestElementwise:
    def test_relu(self):
        y = ops.relu(t(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_array_equal(y.data.ravel(), [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(t(np.zeros((1, 1, 1, 1)))).item() == 0.5

    def test_concat_and_slice_roundtrip(self):
        rng = np.random.default_rng(8)
        a = t(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
        b = t(rng.normal(size=(1, 5, 8, 8)).astype(np.float32))
        cat = ops.concat_channels(a, b)
        assert cat.shape == (1, 8, 8, 8)
        np.testing.assert_array_equal(cat.data[:, :3], a.data)
        back_a = ops.slice_channels(cat, 0, 3)
        back_b = ops.slice_channels(cat, 3, 8)
        np.testing.assert_array_equal(back_a.data, a.data)
        np.testing.assert_array_equal(back_b.data, b.data)

    def test_mul_broadcast_shapes(self):
        rng = np.random.default_rng(9)
        x = t(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        cfac = t(rng.normal(size=(2, 3, 1, 1)).astype(np.float32))
        sfac = t(rng.normal(size=(2, 1, 4, 4)).astype(np.float32))
        np.testing.assert_allclose(ops.mul_broadcast(x, cfac).data, x.data * cfac.data)
        np.testing.assert_allclose(ops.mul_broadcast(x, sfac).data, x.data * sfac.data)
        with pytest.raises(DimensionError):
            ops.mul_broadcast(x, t(np.ones((2, 3, 4, 4))))

    def test_add_shape_error(self):
        with pytest.raises(DimensionError):
            ops.add(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 2, 2, 2))))


class TestPooling:
    def test_tiny_window(self):
        y = ops.max_pool2(t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)))
        assert y.item() == 4.0

    def test_constant_image(self):
        x = t(np.full((1, 2, 6, 6), 1.25))
        y = ops.max_pool2(x)
        assert y.shape == (1, 2, 3, 3)
        assert np.all(y.data == 1.25)

    def test_matches_window_oracle_and_backward_routing(self):
        from sarunet import Tape, backward
        rng = np.random.default_rng(10)
        x = t(rng.normal(size=(1, 1, 4, 4)).astype(np.float32), requires_grad=True)
        with Tape():
            y = ops.max_pool2(x)
            loss = ops.sum_all(y)
        np.testing.assert_array_equal(y.data, max_pool2_windows(x.data))
        backward(loss)
        assert np.count_nonzero(x.grad) == 4
        assert x.grad.sum() == 4.0

    def test_tie_break_first_index(self):
        from sarunet import Tape, backward
        x = t(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            loss = ops.sum_all(ops.max_pool2(x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_odd_dims_rejected(self):
        with pytest.raises(DimensionError):
            ops.max_pool2(t(np.ones((1, 1, 3, 4))))


class TestUpsample:
    def test_constant_preserved(self):
        x = t(np.full((2, 3, 4, 5), 0.7))
        y = ops.upsample_bilinear2(x)
        assert y.shape == (2, 3, 8, 10)
        np.testing.assert_allclose(y.data, 0.7, rtol=1e-6)

    def test_single_pixel(self):
        y = ops.upsample_bilinear2(t(np.full((1, 1, 1, 1), 3.5)))
        assert np.all(y.data == 3.5)

    def test_two_pixel_convention(self):
        y = ops.upsample_bilinear2(t(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)))
        np.testing.assert_allclose(y.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2, 3, 5))
        y = ops.upsample_bilinear2(t(x, dtype=np.float64))
        np.testing.assert_allclose(y.data, bilinear_double(x), rtol=1e-12)

    def test_pool_then_upsample_identity_on_constants(self):
        x = t(np.full((1, 1, 8, 8), 2.5))
        y = ops.upsample_bilinear2(ops.max_pool2(x))
        np.testing.assert_array_equal(y.data, x.data)


class TestGlobalPool:
    def test_avg_spatial_constant(self):
        x = t(np.full((1, 3, 4, 4), 0.3))
        y = ops.global_pool(x, "avg", "spatial")
        assert y.shape == (1, 3, 1, 1)
        np.testing.assert_allclose(y.data.ravel(), 0.3, rtol=1e-6)

    def test_max_channel_per_pixel(self):
        a = np.array([[1.0, 2.0], [3.0, 0.0]])
        x = t(np.stack([a, a[::-1]])[None])  # [1,2,2,2]
        y = ops.global_pool(x, "max", "channel")
        np.testing.assert_array_equal(y.data[0, 0], np.maximum(a, a[::-1]))

    def test_avg_equals_sum_over_16(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        y = ops.global_pool(t(x), "avg", "spatial")
        np.testing.assert_allclose(
            y.data.reshape(2, 3), x.reshape(2, 3, 16).sum(axis=-1) / 16, atol=1e-7)


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bitwise(self, dtype):
        rng = np.random.default_rng(13)
        arr = rng.normal(size=(2, 3, 4, 5)).astype(dtype)
        buf = io.BytesIO()
        write_t4(buf, arr)
        buf.seek(0)
        back = read_t4(buf)
        assert back.dtype == arr.dtype
        assert back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = io.BytesIO()
        write_t4(buf, np.zeros((1, 2, 3, 4), np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"T4v1"
        assert len(raw) == 4 + 32 + 1 + 24 * 4

    def test_bad_magic(self):
        with pytest.raises(UsageError):
            read_t4(io.BytesIO(b"XXXX" + b"\0" * 40))


class TestTensorInvariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            tensor(np.array([np.nan]).reshape(1, 1, 1, 1))

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            Tensor4(np.zeros((2, 2)))

    def test_debug_checks_catch_overflow(self):
        set_debug_checks(True)
        try:
            big = tensor(np.full((1, 1, 1, 1), 3e38))
            with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
                ops.add(big, big)
        finally:
            set_debug_checks(False)

    def test_grad_buffer_only_when_required(self):
        a = tensor(np.zeros((1, 1, 1, 1)))
        b = tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        assert a.grad is None
        assert b.grad is not None and b.grad.shape == b.data.shape
