"""Composable network blocks over the tensor engine.

The four building blocks of the architecture: the two-conv encoder stack,
DropBlock structured regularization, the summed six-rate dilated
convolution block, and the additive attention gate used on skip
connections.  Layers hold their parameters as Tensors and expose them
through ``named_tensors`` for the optimizer and checkpointing.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    mask_scale,
    relu,
    scale_channels,
    sigmoid,
)

ASPP_RATES = (1, 2, 4, 8, 16, 32)


def he_kernel(rng, cout, cin, k, dtype):
    """Fan-in-scaled normal init for a [Cout, Cin, K, K] kernel."""
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True)


def zero_bias(cout, dtype):
    return Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x, mode):
        return batchnorm2d(x, self.scale, self.shift, self.state, mode)

    def named_tensors(self, prefix):
        yield f"{prefix}.scale", self.scale, True
        yield f"{prefix}.shift", self.shift, True
        yield f"{prefix}.running_mean", self.state.running_mean, False
        yield f"{prefix}.running_var", self.state.running_var, False


class ConvStack:
    """conv3x3 -> BN -> conv3x3 -> BN -> ReLU, spatial shape preserved.

    Receptive filter size 3 and stride 1 throughout; the nonlinearity sits
    after the second normalization only.
    """

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.cin, self.cout = cin, cout
        self.kernel1 = he_kernel(rng, cout, cin, 3, dtype)
        self.bias1 = zero_bias(cout, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.kernel2 = he_kernel(rng, cout, cout, 3, dtype)
        self.bias2 = zero_bias(cout, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)

    def __call__(self, x, mode):
        if x.shape[1] != self.cin:
            raise ValueError(f"conv stack expects {self.cin} input channels, got {x.shape[1]}")
        h = conv2d(x, self.kernel1, self.bias1, padding=1)
        h = self.bn1(h, mode)
        h = conv2d(h, self.kernel2, self.bias2, padding=1)
        h = self.bn2(h, mode)
        return relu(h)

    def named_tensors(self, prefix):
        yield f"{prefix}.kernel1", self.kernel1, True
        yield f"{prefix}.bias1", self.bias1, True
        yield from self.bn1.named_tensors(f"{prefix}.bn1")
        yield f"{prefix}.kernel2", self.kernel2, True
        yield f"{prefix}.bias2", self.bias2, True
        yield from self.bn2.named_tensors(f"{prefix}.bn2")


# ---------------------------------------------------------------------------
# DropBlock


def dropblock_gamma(keep_prob: float, block_size: int, feat: int) -> float:
    """Seed probability that drops (1 - keep_prob) of the units on average.

    gamma = ((1 - kP) / BS^2) * (feat^2 / (feat - BS + 1)^2), clamped
    to [0, 1]; the second factor corrects for seeds living only in the
    region where a full block fits.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in [0, 1], got {keep_prob}")
    if feat < block_size:
        raise ValueError(f"feature extent {feat} smaller than block size {block_size}")
    gamma = (1.0 - keep_prob) / block_size**2 * feat**2 / (feat - block_size + 1) ** 2
    return float(min(1.0, max(0.0, gamma)))


def sample_block_mask(rng, batch, height, width, block_size, gamma):
    """Per-sample keep mask [N,1,H,W]: each Bernoulli(gamma) seed zeroes the
    block_size x block_size square centered on it.

    Seeds are drawn only where the square fits fully inside the map, so
    border clipping never biases the drop rate.
    """
    half = block_size // 2
    mask = np.ones((batch, 1, height, width))
    for b in range(batch):
        seeds = np.zeros((height, width), dtype=bool)
        seeds[half : height - half, half : width - half] = (
            rng.random((height - block_size + 1, width - block_size + 1)) < gamma
        )
        if seeds.any():
            mask[b, 0][ndimage.maximum_filter(seeds, size=block_size)] = 0.0
    return mask


class DropBlock:
    """Structured dropout: contiguous squares are zeroed, survivors rescaled."""

    def __init__(self, block_size=5, keep_prob=0.9):
        if block_size < 1 or block_size % 2 == 0:
            raise ValueError(f"block_size must be odd and positive, got {block_size}")
        self.block_size = block_size
        self.keep_prob = keep_prob

    def __call__(self, x, mode, rng=None):
        if mode == "eval":
            return x
        n, _, h, w = x.shape
        feat = min(h, w)
        if feat < self.block_size:
            raise ValueError(
                f"feature map {h}x{w} smaller than block size {self.block_size}"
            )
        gamma = dropblock_gamma(self.keep_prob, self.block_size, feat)
        if gamma == 0.0:
            return x
        if rng is None:
            raise ValueError("train-mode DropBlock needs an rng")
        mask = sample_block_mask(rng, n, h, w, self.block_size, gamma)
        ones = mask.sum()
        scale = mask.size / ones if ones > 0 else 1.0
        return mask_scale(x, mask, scale)


def spatial_dropout2d(x, p, mode, rng=None):
    """Zero whole channels with probability p; survivors rescaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode spatial dropout needs an rng")
    n, c = x.shape[:2]
    keep = (rng.random((n, c, 1, 1)) >= p).astype(x.values.dtype)
    return mask_scale(x, keep, 1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# multi-rate dilated block


class Aspp:
    """Six parallel 3x3 dilated convolutions (rates 1..32), outputs summed.

    Every branch keeps the input's spatial shape via same-padding p = rate.
    """

    def __init__(self, channels, rng, dtype=np.float32):
        self.channels = channels
        self.kernels = [he_kernel(rng, channels, channels, 3, dtype) for _ in ASPP_RATES]
        self.biases = [zero_bias(channels, dtype) for _ in ASPP_RATES]

    def __call__(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"aspp expects {self.channels} channels, got {x.shape[1]}")
        out = None
        for rate, kernel, bias in zip(ASPP_RATES, self.kernels, self.biases):
            branch = conv2d(x, kernel, bias, padding=rate, dilation=rate)
            out = branch if out is None else add(out, branch)
        return out

    def named_tensors(self, prefix):
        for rate, kernel, bias in zip(ASPP_RATES, self.kernels, self.biases):
            yield f"{prefix}.rate{rate}.kernel", kernel, True
            yield f"{prefix}.rate{rate}.bias", bias, True


# ---------------------------------------------------------------------------
# attention gate


class AttentionGate:
    """Additive attention over a skip connection.

    alpha = sigmoid(psi^T relu(Wx x + Wg g + bg) + bpsi) is a one-channel
    coefficient map in (0, 1), broadcast over the skip's channels; all
    transforms are 1x1 convolutions.
    """

    def __init__(self, f_l, f_g, f_int, rng, dtype=np.float32):
        self.f_l, self.f_g, self.f_int = f_l, f_g, f_int
        self.wx = he_kernel(rng, f_int, f_l, 1, dtype)
        self.wg = he_kernel(rng, f_int, f_g, 1, dtype)
        self.bg = zero_bias(f_int, dtype)
        self.psi = he_kernel(rng, 1, f_int, 1, dtype)
        self.bpsi = zero_bias(1, dtype)

    def __call__(self, x_skip, g):
        if x_skip.shape[0] != g.shape[0] or x_skip.shape[2:] != g.shape[2:]:
            raise ValueError(
                f"attention gate: skip {x_skip.shape} and gating signal {g.shape} "
                "are not spatially aligned"
            )
        q = add(conv2d(x_skip, self.wx), conv2d(g, self.wg, self.bg))
        alpha = sigmoid(conv2d(relu(q), self.psi, self.bpsi))
        return scale_channels(x_skip, alpha), alpha

    def named_tensors(self, prefix):
        yield f"{prefix}.wx", self.wx, True
        yield f"{prefix}.wg", self.wg, True
        yield f"{prefix}.bg", self.bg, True
        yield f"{prefix}.psi", self.psi, True
        yield f"{prefix}.bpsi", self.bpsi, True
