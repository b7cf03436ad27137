import numpy as np
import pytest

from ldnet.tensor import (
    Tensor,
    add,
    batchnorm2d,
    BatchNormState,
    concat_channels,
    conv2d,
    finite_difference_check,
    mask_scale,
    maxpool2d,
    mul,
    no_grad,
    relu,
    scale_channels,
    sigmoid,
    softmax_cross_entropy,
    softmax_probs,
    sum_all,
    upsample2x,
)


def reference_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Naive 7-loop convolution kept as the independent oracle."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    kd = k + (k - 1) * (dilation - 1)
    ho = (h + 2 * padding - kd) // stride + 1
    wo = (wd + 2 * padding - kd) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for bn in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            for c in range(cin):
                                acc += (
                                    xp[bn, c, i * stride + ki * dilation, j * stride + kj * dilation]
                                    * w[co, c, ki, kj]
                                )
                    out[bn, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def dyadic(rng, shape, scale=8.0, grid=64):
    """Random values on a power-of-two grid: exact under any summation order."""
    return np.round(rng.uniform(-scale, scale, shape) * grid) / grid


def weighted_sum(out, weights):
    return sum_all(mul(out, Tensor(weights)))


def check_grad(f, x, tol=1e-4, step=1e-5):
    err = finite_difference_check(f, x, step=step)
    assert err < tol, f"max relative error {err:.3e} >= {tol}"


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_dilated_1d_view(self):
        # row [1..5] with a 3-tap kernel at rate 2 picks x[0]+x[2]+x[4] = 9
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2] = [1, 2, 3, 4, 5]
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1] = [1, 1, 1]
        out = conv2d(Tensor(x), Tensor(w), dilation=2)
        assert out.shape == (1, 1, 1, 1)
        assert out.values[0, 0, 0, 0] == 9.0

    def test_effective_kernel_extent(self):
        # K=3 at rate 2 spans 5 input columns: a 5-wide input yields one output
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        assert conv2d(x, w, dilation=2).shape == (1, 1, 1, 1)
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), w, dilation=2)

    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        out = conv2d(x, w, b, padding=1)
        for c, val in enumerate([1.0, -2.0, 0.5, 3.0]):
            assert np.all(out.values[:, c] == val)

    def test_matches_naive_reference_bitwise_on_dyadic_inputs(self):
        # dyadic-rational values make every partial sum exact, so the
        # accumulation order cannot matter and equality is bitwise
        rng = np.random.default_rng(2)
        for shape, cout, pad in [((2, 4, 16, 16), 3, 0), ((1, 2, 10, 12), 2, 1), ((2, 1, 7, 7), 4, 2)]:
            x = dyadic(rng, shape)
            w = dyadic(rng, (cout, shape[1], 3, 3), scale=2.0)
            b = dyadic(rng, (cout,), scale=1.0)
            ours = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad).values
            ref = reference_conv2d(x, w, b, padding=pad)
            assert np.array_equal(ours, ref)

    def test_matches_naive_reference_on_random_floats(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 16, 16))
        w = rng.standard_normal((3, 4, 3, 3))
        ours = conv2d(Tensor(x), Tensor(w)).values
        ref = reference_conv2d(x, w)
        assert np.abs(ours - ref).max() < 1e-12

    def test_strided(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 9, 9))
        w = rng.standard_normal((2, 2, 3, 3))
        ours = conv2d(Tensor(x), Tensor(w), stride=2).values
        ref = reference_conv2d(x, w, stride=2)
        assert ours.shape == (1, 2, 4, 4)
        assert np.abs(ours - ref).max() < 1e-12

    @pytest.mark.parametrize("rate", [2, 4, 8, 16, 32])
    def test_atrous_equals_zero_inserted_dense(self, rate):
        rng = np.random.default_rng(rate)
        size = 3 + 2 * rate + 3  # comfortably larger than the effective kernel
        x = rng.standard_normal((1, 2, size, size))
        w = rng.standard_normal((2, 2, 3, 3))
        kd = 3 + 2 * (rate - 1)
        wd = np.zeros((2, 2, kd, kd))
        wd[:, :, ::rate, ::rate] = w
        atrous = conv2d(Tensor(x), Tensor(w), padding=rate, dilation=rate).values
        dense = conv2d(Tensor(x), Tensor(wd), padding=rate).values
        assert np.abs(atrous - dense).max() < 1e-10

    def test_rate3_matches_zero_insertion_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 8, 8))
        w = rng.standard_normal((1, 1, 3, 3))
        wd = np.zeros((1, 1, 7, 7))
        wd[:, :, ::3, ::3] = w
        atrous = conv2d(Tensor(x), Tensor(w), dilation=3).values
        dense = conv2d(Tensor(x), Tensor(wd)).values
        assert np.abs(atrous - dense).max() < 1e-10

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, w)

    def test_nonpositive_output_rejected(self):
        with pytest.raises(ValueError, match="output extent"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize(
        "shape,cout,pad,dil",
        [((1, 2, 6, 6), 2, 1, 1), ((2, 3, 8, 8), 2, 2, 2), ((1, 1, 10, 10), 3, 3, 3)],
    )
    def test_gradients(self, shape, cout, pad, dil):
        rng = np.random.default_rng(hash((shape, cout)) % 2**32)
        xv = rng.standard_normal(shape)
        wv = rng.standard_normal((cout, shape[1], 3, 3))
        bv = rng.standard_normal(cout)
        n, _, h, w = shape
        wt = rng.standard_normal((n, cout, h, w))

        check_grad(lambda t: weighted_sum(conv2d(t, Tensor(wv), Tensor(bv), padding=pad, dilation=dil), wt), Tensor(xv))
        check_grad(lambda t: weighted_sum(conv2d(Tensor(xv), t, Tensor(bv), padding=pad, dilation=dil), wt), Tensor(wv))
        check_grad(lambda t: weighted_sum(conv2d(Tensor(xv), Tensor(wv), t, padding=pad, dilation=dil), wt), Tensor(bv))


# ---------------------------------------------------------------------------
# activations


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.values, [0.0, 0.0, 2.0])

    def test_relu_identity_on_positive(self):
        x = np.abs(np.random.default_rng(0).standard_normal(20)) + 0.1
        assert np.array_equal(relu(Tensor(x)).values, x)

    def test_relu_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        sum_all(relu(x)).backward()
        assert np.array_equal(x.grad, [0.0, 1.0])
        check_grad(lambda t: sum_all(relu(t)), Tensor(np.array([-1.0, 2.0])))

    def test_sigmoid_midpoint(self):
        assert sigmoid(Tensor(np.array([0.0]))).values[0] == 0.5

    def test_sigmoid_symmetry(self):
        x = np.random.default_rng(1).standard_normal(50) * 5
        s = sigmoid(Tensor(x)).values + sigmoid(Tensor(-x)).values
        assert np.abs(s - 1.0).max() < 1e-12

    def test_sigmoid_saturation_stable(self):
        out = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).values
        assert np.all(np.isfinite(out))
        assert out[0] >= 0.0 and out[1] <= 1.0

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        sum_all(sigmoid(x)).backward()
        assert abs(x.grad[0] - 0.25) < 1e-12
        check_grad(lambda t: sum_all(sigmoid(t)), Tensor(np.array([0.0])))

    @pytest.mark.parametrize("shape", [(7,), (3, 5), (2, 3, 4)])
    def test_gradients_random_shapes(self, shape):
        rng = np.random.default_rng(sum(shape))
        x = rng.standard_normal(shape) + np.sign(rng.standard_normal(shape)) * 0.2
        wt = rng.standard_normal(shape)
        check_grad(lambda t: weighted_sum(relu(t), wt), Tensor(x))
        check_grad(lambda t: weighted_sum(sigmoid(t), wt), Tensor(x))


# ---------------------------------------------------------------------------
# batchnorm


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)) * 3 + 2)
        out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState(3), "train")
        mean = out.values.mean(axis=(0, 2, 3))
        var = out.values.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-3

    def test_affine_transform(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 2, 8, 8)))
        out = batchnorm2d(x, Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), BatchNormState(2), "train")
        assert np.abs(out.values.mean(axis=(0, 2, 3)) - 3.0).max() < 1e-5
        assert np.abs(out.values.std(axis=(0, 2, 3)) - 2.0).max() < 1e-3

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(2)
        state = BatchNormState(2)
        scale, shift = Tensor(np.ones(2)), Tensor(np.zeros(2))
        for _ in range(200):
            batchnorm2d(Tensor(rng.standard_normal((8, 2, 4, 4)) * 2 + 5), scale, shift, state, "train")
        assert np.abs(state.running_mean - 5.0).max() < 0.2
        assert np.abs(state.running_var - 4.0).max() < 0.5
        x = rng.standard_normal((2, 2, 4, 4)) * 2 + 5
        out = batchnorm2d(Tensor(x), scale, shift, state, "eval")
        expected = (x - state.running_mean[None, :, None, None]) / np.sqrt(
            state.running_var[None, :, None, None] + 1e-5
        )
        assert np.abs(out.values - expected).max() < 1e-12

    def test_eval_before_train_warns(self, caplog):
        state = BatchNormState(1)
        with caplog.at_level("WARNING"):
            batchnorm2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "eval")
        assert any("initialized stats" in r.message for r in caplog.records)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(3)
        xv = rng.standard_normal((2, 3, 4, 4))
        sv = rng.standard_normal(3) + 1.5
        bv = rng.standard_normal(3)
        wt = rng.standard_normal((2, 3, 4, 4))
        state = BatchNormState(3)
        if mode == "eval":
            state.running_mean[:] = rng.standard_normal(3)
            state.running_var[:] = rng.random(3) + 0.5
            state.updates = 1
        check_grad(lambda t: weighted_sum(batchnorm2d(t, Tensor(sv), Tensor(bv), state, mode), wt), Tensor(xv))
        check_grad(lambda t: weighted_sum(batchnorm2d(Tensor(xv), t, Tensor(bv), state, mode), wt), Tensor(sv))
        check_grad(lambda t: weighted_sum(batchnorm2d(Tensor(xv), Tensor(sv), t, state, mode), wt), Tensor(bv))


# ---------------------------------------------------------------------------
# pooling / upsampling


class TestMaxPool:
    def test_window_max(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2d(x).values[0, 0, 0, 0] == 4.0

    def test_constant_ties_route_to_first_index(self):
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        out = maxpool2d(x)
        assert np.all(out.values == 1.0)
        sum_all(out).backward()
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        assert np.array_equal(x.grad[0, 0], expected)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))

    @pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 1, 6, 8), (1, 3, 8, 4)])
    def test_gradients(self, shape):
        rng = np.random.default_rng(sum(shape))
        xv = rng.standard_normal(shape)
        wt = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))
        check_grad(lambda t: weighted_sum(maxpool2d(t), wt), Tensor(xv))


class TestUpsample2x:
    def test_constant_preserved(self):
        x = Tensor(np.full((1, 2, 3, 3), 7.5))
        out = upsample2x(x)
        assert out.shape == (1, 2, 6, 6)
        assert np.all(out.values == 7.5)

    def test_hand_interpolation(self):
        x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
        out = upsample2x(x)
        assert np.allclose(out.values[0, 0], [[0.0, 0.25, 0.75, 1.0], [0.0, 0.25, 0.75, 1.0]])

    def test_avgpool_recovers_affine_interior(self):
        # bilinear interpolation reproduces affine ramps exactly, so averaging
        # each 2x2 output block recovers the source interior
        i, j = np.meshgrid(np.arange(8), np.arange(10), indexing="ij")
        x = 0.7 * i - 1.3 * j + 0.5
        up = upsample2x(Tensor(x.reshape(1, 1, 8, 10))).values[0, 0]
        pooled = up.reshape(8, 2, 10, 2).mean(axis=(1, 3))
        assert np.abs(pooled[1:-1, 1:-1] - x[1:-1, 1:-1]).max() < 1e-6

    @pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 4, 5), (1, 2, 7, 3)])
    def test_gradients(self, shape):
        rng = np.random.default_rng(sum(shape) + 1)
        xv = rng.standard_normal(shape)
        wt = rng.standard_normal((shape[0], shape[1], shape[2] * 2, shape[3] * 2))
        check_grad(lambda t: weighted_sum(upsample2x(t), wt), Tensor(xv))


# ---------------------------------------------------------------------------
# concat / elementwise


class TestConcatAndElementwise:
    def test_concat_shapes(self):
        a = Tensor(np.zeros((1, 2, 8, 8)))
        b = Tensor(np.zeros((1, 3, 8, 8)))
        assert concat_channels(a, b).shape == (1, 5, 8, 8)

    def test_concat_with_zeros_then_slice_recovers(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 4, 4))
        out = concat_channels(Tensor(x), Tensor(np.zeros((2, 2, 4, 4))))
        assert np.array_equal(out.values[:, :3], x)
        assert np.all(out.values[:, 3:] == 0)

    def test_concat_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            concat_channels(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 2, 4, 4))))

    def test_concat_gradient_split(self):
        rng = np.random.default_rng(1)
        av, bv = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        wt = rng.standard_normal((1, 5, 3, 3))
        check_grad(lambda t: weighted_sum(concat_channels(t, Tensor(bv)), wt), Tensor(av), tol=1e-6)
        check_grad(lambda t: weighted_sum(concat_channels(Tensor(av), t), wt), Tensor(bv), tol=1e-6)

    def test_add_mul_shape_mismatch(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scale_channels_broadcast(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 3, 3))
        a = rng.random((2, 1, 3, 3))
        out = scale_channels(Tensor(x), Tensor(a))
        assert np.array_equal(out.values, x * a)
        wt = rng.standard_normal((2, 4, 3, 3))
        check_grad(lambda t: weighted_sum(scale_channels(t, Tensor(a)), wt), Tensor(x))
        check_grad(lambda t: weighted_sum(scale_channels(Tensor(x), t), wt), Tensor(a))

    def test_mask_scale(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4))
        mask = (rng.random((1, 1, 4, 4)) > 0.4).astype(float)
        out = mask_scale(Tensor(x), mask, 1.5)
        assert np.array_equal(out.values, x * mask * 1.5)
        wt = rng.standard_normal((1, 2, 4, 4))
        check_grad(lambda t: weighted_sum(mask_scale(t, mask, 1.5), wt), Tensor(x))


# ---------------------------------------------------------------------------
# loss


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((1, 5, 2, 2))), np.zeros((1, 2, 2), dtype=int))
        assert abs(float(loss.values) - np.log(5)) < 1e-12

    def test_confident_correct_logits_drive_loss_to_zero(self):
        labels = np.array([[[0, 1], [2, 0]]])
        prev = None
        for margin in [2.0, 8.0, 20.0]:
            logits = np.zeros((1, 3, 2, 2))
            for i in range(2):
                for j in range(2):
                    logits[0, labels[0, i, j], i, j] = margin
            loss = float(softmax_cross_entropy(Tensor(logits), labels).values)
            if prev is not None:
                assert loss < prev
            prev = loss
        assert prev < 1e-8

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        probs = softmax_probs(rng.standard_normal((2, 5, 4, 4)) * 10)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(1)
        lv = rng.standard_normal((2, 4, 3, 3))
        labels = rng.integers(0, 4, (2, 3, 3))
        logits = Tensor(lv, requires_grad=True)
        softmax_cross_entropy(logits, labels).backward()
        probs = softmax_probs(lv)
        onehot = np.zeros_like(lv)
        ni, hi, wi = np.ogrid[:2, :3, :3]
        onehot[ni, labels, hi, wi] = 1.0
        assert np.abs(logits.grad - (probs - onehot) / 18).max() < 1e-12
        check_grad(lambda t: softmax_cross_entropy(t, labels), Tensor(lv))

    def test_out_of_range_label_names_pixel(self):
        labels = np.zeros((1, 2, 2), dtype=int)
        labels[0, 1, 0] = 7
        with pytest.raises(ValueError, match=r"label 7 .*\(n=0, h=1, w=0\)"):
            softmax_cross_entropy(Tensor(np.zeros((1, 5, 2, 2))), labels)

    def test_stable_for_large_logits(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 1e4
        loss = softmax_cross_entropy(Tensor(logits), np.zeros((1, 1, 1), dtype=int))
        assert np.isfinite(float(loss.values))


# ---------------------------------------------------------------------------
# backward semantics


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        sum_all(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_reuse_accumulates(self):
        x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
        y = relu(x)
        sum_all(add(y, y)).backward()
        expected = np.where(x.values > 0, 2.0, 0.0)
        assert np.array_equal(x.grad, expected)

    def test_fork_sums_branch_gradients(self):
        rng = np.random.default_rng(2)
        xv = rng.standard_normal(6) + 1.0

        x = Tensor(xv, requires_grad=True)
        sum_all(relu(x)).backward()
        branch_a = x.grad.copy()

        x = Tensor(xv, requires_grad=True)
        sum_all(mul(x, x)).backward()
        branch_b = x.grad.copy()

        x = Tensor(xv, requires_grad=True)
        sum_all(add(relu(x), mul(x, x))).backward()
        assert np.abs(x.grad - (branch_a + branch_b)).max() < 1e-12

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = relu(x)
        assert out.record is None and not out.requires_grad


# ---------------------------------------------------------------------------
# finite differences


class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact_to_rounding(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal(10))
        assert finite_difference_check(lambda t: sum_all(mul(t, t)), x) < 1e-8

    def test_two_layer_conv_net(self):
        rng = np.random.default_rng(1)
        w1 = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.5)
        b1 = Tensor(rng.standard_normal(3) * 0.1)
        w2 = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5)
        b2 = Tensor(rng.standard_normal(2) * 0.1)
        labels = rng.integers(0, 2, (1, 6, 6))

        def net(t):
            h = relu(conv2d(t, w1, b1, padding=1))
            return softmax_cross_entropy(conv2d(h, w2, b2, padding=1), labels)

        assert finite_difference_check(net, Tensor(rng.standard_normal((1, 1, 6, 6)))) < 1e-4

    def test_nondeterministic_rejected(self):
        rng = np.random.default_rng(2)

        def noisy(t):
            return sum_all(mask_scale(t, rng.random(t.shape), 1.0))

        with pytest.raises(ValueError, match="deterministic"):
            finite_difference_check(noisy, Tensor(np.ones(4)))

    def test_non_scalar_function_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            finite_difference_check(lambda t: relu(t), Tensor(np.ones(3)))
