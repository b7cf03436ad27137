"""Dense NCHW tensors with a recorded op tape and reverse-mode gradients.

Every differentiable primitive the segmentation network needs lives here:
convolution (with dilation), the activations, batch normalization, 2x2 max
pooling, bilinear 2x upsampling, channel concatenation, the elementwise
glue ops, and the softmax cross-entropy loss.  Forward calls record
``OpRecord`` nodes; ``Tensor.backward`` replays them in reverse topological
order.  A central-difference checker for any scalar-valued tensor function
is included as the verification oracle.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (inference / metric passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class OpRecord:
    """One recorded primitive: kind, input nodes, and its backward rule.

    ``backward_rule`` maps the output gradient to one gradient array per
    input (``None`` for inputs that need no gradient).  The records created
    while evaluating a function form a DAG; a depth-first ordering from the
    loss visits each exactly once.
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward_rule: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "record", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        values = np.asarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.record: Optional[OpRecord] = None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Propagate gradients from this scalar back through the tape.

        Gradients accumulate additively, so a tensor feeding several
        consumers receives the sum of all branch contributions.
        """
        if self.values.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.values.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            if node.record is not None:
                for parent in node.record.inputs:
                    if parent.node_id not in visited:
                        stack.append((parent, False))
        self.grad = np.ones((), dtype=self.values.dtype)
        for node in reversed(topo):
            if node.record is None or node.grad is None:
                continue
            grads = node.record.backward_rule(node.grad)
            for parent, g in zip(node.record.inputs, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += g

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g


def _result(values, op, inputs, backward_rule) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(t.requires_grad or t.record is not None for t in inputs):
        out.requires_grad = True
        out.record = OpRecord(op, tuple(inputs), backward_rule)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.values + b.values, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return _result(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(
        x.values.sum(), "sum", (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),)
    )


def mask_scale(x: Tensor, mask: np.ndarray, scale: float) -> Tensor:
    """x * mask * scale with a constant mask (dropout-style ops)."""
    factor = mask * scale
    return _result(x.values * factor, "mask_scale", (x,), lambda g: (g * factor,))


def scale_channels(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply an [N,C,H,W] map by a per-pixel [N,1,H,W] coefficient map."""
    n, _, h, w = x.shape
    if alpha.shape != (n, 1, h, w):
        raise ValueError(
            f"scale_channels: coefficient shape {alpha.shape} does not match ({n}, 1, {h}, {w})"
        )
    xv, av = x.values, alpha.values

    def backward(g):
        return g * av, (g * xv).sum(axis=1, keepdims=True)

    return _result(xv * av, "scale_channels", (x, alpha), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _result(
        np.concatenate([a.values, b.values], axis=1), "concat", (a, b), backward
    )


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    pos = x.values > 0
    return _result(np.where(pos, x.values, 0.0), "relu", (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # branch-stable form: never exponentiates a large positive argument
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h, w, k, stride, padding, dilation):
    kd = k + (k - 1) * (dilation - 1)
    for name, extent in (("height", h), ("width", w)):
        span = extent + 2 * padding - kd
        if span < 0 or span % stride != 0:
            raise ValueError(
                f"conv2d: {name} {extent} with padding {padding}, dilation {dilation} "
                f"(effective kernel {kd}) and stride {stride} gives no valid output extent"
            )
    return kd, (h + 2 * padding - kd) // stride + 1, (w + 2 * padding - kd) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW with optional dilation.

    ``dilation`` samples the input with stride ``dilation`` between kernel
    taps, enlarging the receptive field to K + (K-1)*(dilation-1) without
    extra parameters.  ``dilation=1`` is a standard convolution.
    """
    if x.values.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D NCHW, got {x.shape}")
    if kernel.values.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d: kernel must be [Cout, Cin, K, K], got {kernel.shape}")
    if dilation < 1:
        raise ValueError(f"conv2d: dilation must be >= 1, got {dilation}")
    n, cin, h, w = x.shape
    cout, kcin, k, _ = kernel.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d: input channel dimension is {cin} but kernel expects {kcin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(
            f"conv2d: bias shape {bias.shape} does not match output channels ({cout},)"
        )
    _, ho, wo = _conv_geometry(h, w, k, stride, padding, dilation)

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kv = kernel.values
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(xp.dtype, kv.dtype))
    taps = []
    for ki in range(k):
        for kj in range(k):
            i0, j0 = ki * dilation, kj * dilation
            tap = xp[:, :, i0 : i0 + (ho - 1) * stride + 1 : stride,
                     j0 : j0 + (wo - 1) * stride + 1 : stride]
            taps.append(tap)
            out += np.tensordot(tap, kv[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def backward(g):
        gk = np.zeros_like(kv)
        gx_pad = np.zeros_like(xp)
        for idx, (ki, kj) in enumerate((a, b) for a in range(k) for b in range(k)):
            gk[:, :, ki, kj] = np.tensordot(g, taps[idx], axes=([0, 2, 3], [0, 2, 3]))
            i0, j0 = ki * dilation, kj * dilation
            gx_pad[:, :, i0 : i0 + (ho - 1) * stride + 1 : stride,
                   j0 : j0 + (wo - 1) * stride + 1 : stride] += np.tensordot(
                g, kv[:, :, ki, kj], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
        gx = gx_pad[:, :, padding : padding + h, padding : padding + w] if padding else gx_pad
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, "conv2d", inputs, backward)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Mutable per-channel running statistics for one normalization layer."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updates = 0
        self._warned = False


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalization over (N, H, W), affine scale/shift.

    Train mode normalizes by batch statistics and folds them into the
    running averages; eval mode normalizes by the running averages.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"batchnorm2d: scale/shift shapes {scale.shape}/{shift.shape} "
            f"do not match channel count ({c},)"
        )
    count = n * h * w
    xv = x.values
    sv = scale.values[None, :, None, None]

    if mode == "train":
        if count < 2:
            raise ValueError("batchnorm2d: train mode needs at least 2 values per channel")
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (xv - mean[None, :, None, None]) * invstd[None, :, None, None]
        unbiased = var * (count / (count - 1))
        state.running_mean[:] = (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean
        state.running_var[:] = (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * unbiased
        state.updates += 1

        def backward(g):
            gxhat = g * sv
            m_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            m_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = invstd[None, :, None, None] * (gxhat - m_g - xhat * m_gx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        if state.updates == 0 and not state._warned:
            logger.warning(
                "batchnorm2d: eval before any train step; using initialized stats (mean 0, var 1)"
            )
            state._warned = True
        invstd = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (xv - state.running_mean[None, :, None, None]) * invstd[None, :, None, None]

        def backward(g):
            gx = g * sv * invstd[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * sv + shift.values[None, :, None, None]
    return _result(out, "batchnorm2d", (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties break to the lowest linear index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: spatial extents must be even, got {h}x{w}")
    windows = (
        x.values.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    # np.argmax returns the first maximum, i.e. the lowest linear index
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (
            gw.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w),
        )

    return _result(out, "maxpool2d", (x,), backward)


def _upsample_coeffs(extent: int, dtype):
    dst = np.arange(2 * extent)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0, extent - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, extent - 1)
    w1 = (src - i0).astype(dtype)
    return i0, i1, (1.0 - w1).astype(dtype), w1


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, half-pixel-centered (align-corners false)."""
    n, c, h, w = x.shape
    ri0, ri1, rw0, rw1 = _upsample_coeffs(h, x.dtype)
    ci0, ci1, cw0, cw1 = _upsample_coeffs(w, x.dtype)
    xv = x.values
    rows = xv[:, :, ri0, :] * rw0[None, None, :, None] + xv[:, :, ri1, :] * rw1[None, None, :, None]
    out = rows[:, :, :, ci0] * cw0[None, None, None, :] + rows[:, :, :, ci1] * cw1[None, None, None, :]

    def backward(g):
        # transpose of the two gathers: scatter-add column then row weights
        gt = np.moveaxis(g, 3, 0)
        buf = np.zeros((w, n, c, 2 * h), dtype=g.dtype)
        np.add.at(buf, ci0, gt * cw0[:, None, None, None])
        np.add.at(buf, ci1, gt * cw1[:, None, None, None])
        grows = np.moveaxis(buf, 0, 3)
        gt = np.moveaxis(grows, 2, 0)
        buf = np.zeros((h, n, c, w), dtype=g.dtype)
        np.add.at(buf, ri0, gt * rw0[:, None, None, None])
        np.add.at(buf, ri1, gt * rw1[:, None, None, None])
        return (np.moveaxis(buf, 0, 2),)

    return _result(out, "upsample2x", (x,), backward)


# ---------------------------------------------------------------------------
# loss


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the channel axis of an [N,C,H,W] array."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy of class logits against an index mask."""
    if logits.values.ndim != 4:
        raise ValueError(f"softmax_cross_entropy: logits must be [N,C,H,W], got {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match ({n}, {h}, {w})"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integer class indices")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        bn, bh, bw = (int(v[0]) for v in np.nonzero(bad))
        raise ValueError(
            f"softmax_cross_entropy: label {int(labels[bn, bh, bw])} out of range "
            f"[0, {c}) at pixel (n={bn}, h={bh}, w={bw})"
        )
    lv = logits.values
    m = lv.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lv - m).sum(axis=1, keepdims=True))
    ni, hi, wi = np.ogrid[:n, :h, :w]
    picked = lv[ni, labels, hi, wi]
    loss = (lse[:, 0] - picked).mean()
    probs = np.exp(lv - lse)
    denom = n * h * w

    def backward(g):
        gl = probs.copy()
        gl[ni, labels, hi, wi] -= 1.0
        return (gl * (g / denom),)

    return _result(np.asarray(loss, dtype=lv.dtype), "softmax_xent", (logits,), backward)


# ---------------------------------------------------------------------------
# verification oracle


# Gradients smaller than this cannot be resolved by central differences at
# step 1e-5 in float64 (the difference quotient noise floor is ~1e-11 for
# unit-scale outputs); when both sides sit under it they count as matching.
# A conv bias feeding a batch normalization is the canonical true-zero case.
FD_ZERO_TOL = 1e-8


def _fd_error(analytic: float, numeric: float, zero_tol: float) -> float:
    if max(abs(analytic), abs(numeric)) < zero_tol:
        return 0.0
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def finite_difference_check_params(
    f: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Central-difference check of ``f()`` against the named leaf tensors.

    ``f`` rebuilds its graph on every call and must read the given tensors
    (model parameters) by identity; each one is perturbed in place.  Returns
    the max relative error per tensor, using the same error measure as
    ``finite_difference_check``.
    """

    def evaluate() -> float:
        with no_grad():
            out = f()
        if out.values.shape != ():
            raise ValueError(
                f"finite_difference_check_params: f must return a scalar, got {out.values.shape}"
            )
        return float(out.values)

    if evaluate() != evaluate():
        raise ValueError("finite_difference_check_params: f is not deterministic")

    for t in tensors.values():
        t.zero_grad()
    out = f()
    if out.values.shape != ():
        raise ValueError(
            f"finite_difference_check_params: f must return a scalar, got {out.values.shape}"
        )
    out.backward()

    errors: dict[str, float] = {}
    for name, tensor in tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
        flat = tensor.values.reshape(-1)
        aflat = analytic.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, _fd_error(float(aflat[i]), numeric, FD_ZERO_TOL))
        errors[name] = worst
        tensor.zero_grad()
    return errors


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and deterministic (stochastic layers frozen);
    two evaluations at the same point are compared to enforce this.  The
    relative error at each coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    base = x.values.astype(np.float64)

    def evaluate(values) -> float:
        with no_grad():
            out = f(Tensor(values))
        if out.values.shape != ():
            raise ValueError(
                f"finite_difference_check: f must return a scalar, got shape {out.values.shape}"
            )
        return float(out.values)

    if evaluate(base) != evaluate(base):
        raise ValueError("finite_difference_check: f is not deterministic")

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.values.shape != ():
        raise ValueError(
            f"finite_difference_check: f must return a scalar, got shape {out.values.shape}"
        )
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = evaluate(base)
        flat[i] = orig - step
        lo = evaluate(base)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        worst = max(worst, _fd_error(float(analytic.reshape(-1)[i]), numeric, FD_ZERO_TOL))
    return worst
