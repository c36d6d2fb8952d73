import numpy as np
import pytest

from ltdnet import autograd as ag
from ltdnet.autograd import Tape, Tensor


def naive_conv2d(x, w, b, stride, padding):
    """Six-nested-loop reference convolution."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, k, hp, wp))
    for ni in range(n):
        for ki in range(k):
            for oi in range(hp):
                for oj in range(wp):
                    acc = b[ki]
                    for ci in range(c):
                        for ii in range(kh):
                            for jj in range(kw):
                                acc += xp[ni, ci, oi * stride + ii, oj * stride + jj] \
                                    * w[ki, ci, ii, jj]
                    out[ni, ki, oi, oj] = acc
    return out


def upsample_oracle(x, out_h, out_w):
    """Per-output-pixel scalar bilinear interpolation oracle."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for oi in range(out_h):
        for oj in range(out_w):
            sy = min(max((oi + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            sx = min(max((oj + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, oi, oj] = top * (1 - fy) + bot * fy
    return out


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.zeros(1))
        out = ag.conv2d(x, w, b, stride=1, padding=0)
        assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 1, 5, 7)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ag.conv2d(x, Tensor(w), Tensor(np.zeros(1)), stride=1, padding=1)
        assert np.allclose(out.data, x.data, atol=0, rtol=0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_naive_loops(self, stride, padding):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 3, 7, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        want = naive_conv2d(x, w, b, stride, padding)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_channel_mismatch_error(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ag.ShapeError, match=r"(1, 2, 4, 4).*(1, 3, 3, 3)"):
            ag.conv2d(x, w, Tensor(np.zeros(1)), 1, 1)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Tensor(rng.standard_normal(3))

        def build(leaves):
            return ag.sum_all(ag.relu(ag.conv2d(leaves[0], leaves[1], leaves[2],
                                                stride=2, padding=1)))

        assert ag.grad_check(build, [x, w, b], eps=1e-5) < 1e-6


class TestBilinearUpsample:
    def test_identity_size(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 5))
        out = ag.bilinear_upsample(Tensor(x), 4, 5)
        assert np.array_equal(out.data, x)

    def test_constant_input(self):
        x = np.full((1, 2, 3, 3), 4.25)
        out = ag.bilinear_upsample(Tensor(x), 7, 9)
        assert np.allclose(out.data, 4.25, atol=1e-12, rtol=0)

    def test_matches_scalar_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        got = ag.bilinear_upsample(Tensor(x), 4, 4).data
        assert np.max(np.abs(got - upsample_oracle(x, 4, 4))) <= 1e-12

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 3, 5))
        got = ag.bilinear_upsample(Tensor(x), 8, 11).data
        assert np.max(np.abs(got - upsample_oracle(x, 8, 11))) <= 1e-12

    def test_range_preserved(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 2, 4, 4))
        out = ag.bilinear_upsample(Tensor(x), 9, 13).data
        assert out.min() >= x.min() - 1e-12
        assert out.max() <= x.max() + 1e-12

    def test_zero_target_rejected(self):
        with pytest.raises(ag.ArgumentError):
            ag.bilinear_upsample(Tensor(np.zeros((1, 1, 2, 2))), 0, 4)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 3, 4)))

        def build(leaves):
            up = ag.bilinear_upsample(leaves[0], 7, 9)
            return ag.sum_all(ag.mul(up, up))

        assert ag.grad_check(build, [x], eps=1e-5) < 1e-6


class TestRelu:
    def test_values(self):
        out = ag.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal(50))
        once = ag.relu(x)
        assert np.array_equal(ag.relu(once).data, once.data)

    def test_indicator_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 2.0]))
        loss = ag.sum_all(ag.relu(x))
        grads = ag.backward(tape, loss)
        assert np.array_equal(grads[x.node_id].data, [0.0, 1.0])


class TestConcat:
    def test_single_input(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        assert np.array_equal(ag.concat_channels([x]).data, x.data)

    def test_order_preserved(self):
        a = Tensor(np.ones((1, 1, 2, 2)))
        b = Tensor(np.full((1, 2, 2, 2), 5.0))
        out = ag.concat_channels([a, b])
        assert out.shape == (1, 3, 2, 2)
        assert np.array_equal(out.data[:, 0], a.data[:, 0])
        assert np.array_equal(out.data[:, 1:], b.data)

    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(2)
        tape = Tape()
        a = tape.leaf(rng.standard_normal((1, 2, 3, 3)))
        b = tape.leaf(rng.standard_normal((1, 4, 3, 3)))
        grads = ag.backward(tape, ag.sum_all(ag.concat_channels([a, b])))
        assert np.array_equal(grads[a.node_id].data, np.ones((1, 2, 3, 3)))
        assert np.array_equal(grads[b.node_id].data, np.ones((1, 4, 3, 3)))

    def test_spatial_mismatch_error(self):
        a = Tensor(np.zeros((1, 1, 2, 2)))
        b = Tensor(np.zeros((1, 1, 3, 2)))
        with pytest.raises(ag.ShapeError):
            ag.concat_channels([a, b])


class TestSoftmax:
    def test_uniform(self):
        out = ag.softmax(Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 5))
        a = ag.softmax(Tensor(x)).data
        b = ag.softmax(Tensor(x + 17.5)).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_closed_form(self):
        out = ag.softmax(Tensor([0.0, np.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_sums_to_one(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 2, 7)) * 10
        s = ag.softmax(Tensor(x)).data
        assert (s >= 0).all()
        assert np.max(np.abs(s.sum(axis=-1) - 1.0)) <= 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 4)))
        coeff = rng.standard_normal((2, 4))

        def build(leaves):
            return ag.sum_all(ag.mul(ag.softmax(leaves[0]), Tensor(coeff)))

        assert ag.grad_check(build, [x], eps=1e-5) < 1e-6


class TestBackward:
    def test_quadratic(self):
        rng = np.random.default_rng(10)
        tape = Tape()
        x = tape.leaf(rng.standard_normal((3, 4)))
        loss = ag.sum_all(ag.mul(x, x))
        grads = ag.backward(tape, loss)
        assert np.array_equal(grads[x.node_id].data, 2 * x.data)

    def test_conv_relu_finite_differences(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.7)

        def build(leaves):
            out = ag.conv2d(leaves[0], leaves[1], Tensor(np.zeros(2)), 1, 1)
            return ag.sum_all(ag.relu(out))

        assert ag.grad_check(build, [x, w], eps=1e-5) < 1e-6

    def test_unreachable_leaf_zero_grad(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(np.ones((2, 2)))
        grads = ag.backward(tape, ag.sum_all(x))
        assert np.array_equal(grads[y.node_id].data, np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ag.ArgumentError):
            ag.backward(tape, ag.relu(x))


class TestGradCheck:
    def test_smooth_composite(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        target = rng.integers(0, 3, size=4)
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), target] = 1.0

        def build(leaves):
            out = ag.conv2d(leaves[0], leaves[1], Tensor(np.zeros(3)), 2, 1)
            logits = ag.reshape(ag.transpose(out, (0, 2, 3, 1)), (4, 3))
            ce = ag.mul(ag.log_softmax(logits), Tensor(onehot))
            return ag.scale(ag.sum_all(ce), -1.0)

        assert ag.grad_check(build, [x, w], eps=1e-5) < 1e-6

    def test_fault_injection_detected(self):
        # a builder whose analytic gradient is wrong by 0.1 in one entry
        x = Tensor(np.array([0.3, -0.4]))

        def build(leaves):
            t = leaves[0]
            bad = ag._apply([t], t.data * t.data,
                            lambda g: [g * (2 * t.data + np.array([0.1, 0.0]))])
            return ag.sum_all(bad)

        assert ag.grad_check(build, [x], eps=1e-5) > 1e-2

    def test_constant_builder(self):
        x = Tensor(np.ones(3))

        def build(leaves):
            return ag.scale(ag.sum_all(leaves[0]), 0.0)

        assert ag.grad_check(build, [x], eps=1e-5) == 0.0


class TestTapeDeterminism:
    def test_two_passes_bit_identical(self):
        rng = np.random.default_rng(14)
        xv = rng.standard_normal((1, 3, 6, 6))
        wv = rng.standard_normal((4, 3, 3, 3))

        def run():
            tape = Tape()
            x = tape.leaf(xv)
            w = tape.leaf(wv)
            out = ag.relu(ag.conv2d(x, w, Tensor(np.zeros(4)), 2, 1))
            up = ag.bilinear_upsample(out, 6, 6)
            return ag.sum_all(ag.softmax(ag.reshape(up, (4, 36)))).data.copy()

        assert np.array_equal(run(), run())


class TestMiscOps:
    def test_smooth_l1_values(self):
        x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 3.0]))
        out = ag.smooth_l1(x).data
        assert np.allclose(out, [1.5, 0.125, 0.0, 0.125, 2.5], atol=1e-15)

    def test_smooth_l1_gradient(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.standard_normal(20) * 2)

        def build(leaves):
            return ag.sum_all(ag.smooth_l1(leaves[0]))

        assert ag.grad_check(build, [x], eps=1e-5) < 1e-6

    def test_gather_rows_gradient(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((5, 3)))
        idx = [0, 2, 2, 4]

        def build(leaves):
            rows = ag.gather_rows(leaves[0], idx)
            return ag.sum_all(ag.mul(rows, rows))

        assert ag.grad_check(build, [x], eps=1e-5) < 1e-6

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones(2))
        b = t2.leaf(np.ones(2))
        with pytest.raises(ag.ArgumentError):
            ag.add(a, b)
