"""Central-difference verification suite over every primitive and the model.

Each check builds deterministic random inputs, scalarizes the op through a
fixed random weighting, and compares analytic gradients against central
differences.  The full-model check runs the complete network (DropBlock
mask frozen by reseeding) and checks every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Aspp, AttentionGate, ConvStack, DropBlock, spatial_dropout2d
from .model import LdnetConfig, LdnetParams
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    finite_difference_check,
    finite_difference_check_params,
    mask_scale,
    maxpool2d,
    mul,
    relu,
    scale_channels,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
    upsample2x,
)

DEFAULT_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
FD_STEP = 1e-5


@dataclass
class CheckResult:
    op: str
    worst_input: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _weighted(out, weights):
    return sum_all(mul(out, Tensor(weights)))


def _collect(op, parts, tolerance, step=FD_STEP):
    """parts: list of (input-name, callable, probe Tensor)."""
    worst_name, worst = "-", 0.0
    for name, f, probe in parts:
        err = finite_difference_check(f, probe, step=step)
        if err >= worst:
            worst_name, worst = name, err
    return CheckResult(op, worst_name, worst, tolerance)


def run_suite(tolerance: float = DEFAULT_TOLERANCE,
              model_tolerance: float = MODEL_TOLERANCE,
              model_size: int = 32,
              only: set[str] | None = None) -> list[CheckResult]:
    """Run the checks (all by default, or the named subset)."""
    rng = np.random.default_rng(20240901)
    results = []

    def want(name):
        return only is None or name in only

    def shapes3(base):
        n, c, h, w = base
        return [base, (n, c + 1, h + 2, w), (n + 1, c, h, w + 2)]

    # activations over 3 shapes each, inputs kept away from the relu kink
    for op, fn in (("relu", relu), ("sigmoid", sigmoid)):
        if not want(op):
            continue
        parts = []
        for shape in shapes3((1, 2, 4, 4)):
            x = rng.standard_normal(shape)
            x += np.sign(x) * 0.2
            wt = rng.standard_normal(shape)
            parts.append(("input", lambda t, fn=fn, wt=wt: _weighted(fn(t), wt), Tensor(x)))
        results.append(_collect(op, parts, tolerance))

    # elementwise glue
    if want("add"):
        parts = []
        for shape in shapes3((1, 2, 3, 3)):
            a, b = rng.standard_normal(shape), rng.standard_normal(shape)
            wt = rng.standard_normal(shape)
            parts.append(("lhs", lambda t, b=b, wt=wt: _weighted(add(t, Tensor(b)), wt), Tensor(a)))
            parts.append(("rhs", lambda t, a=a, wt=wt: _weighted(add(Tensor(a), t), wt), Tensor(b)))
        results.append(_collect("add", parts, tolerance))

    if want("mul"):
        parts = []
        for shape in shapes3((1, 2, 3, 3)):
            a, b = rng.standard_normal(shape), rng.standard_normal(shape)
            wt = rng.standard_normal(shape)
            parts.append(("lhs", lambda t, b=b, wt=wt: _weighted(mul(t, Tensor(b)), wt), Tensor(a)))
        results.append(_collect("mul", parts, tolerance))

    if want("sum"):
        parts = [("input", lambda t: sum_all(t), Tensor(rng.standard_normal((2, 3, 4, 5))))]
        results.append(_collect("sum", parts, tolerance))

    if want("scale-channels"):
        parts = []
        for shape in shapes3((1, 3, 4, 4)):
            x = rng.standard_normal(shape)
            alpha = rng.random((shape[0], 1) + shape[2:]) * 0.8 + 0.1
            wt = rng.standard_normal(shape)
            parts.append(("features", lambda t, a=alpha, wt=wt: _weighted(scale_channels(t, Tensor(a)), wt), Tensor(x)))
            parts.append(("coefficients", lambda t, x=x, wt=wt: _weighted(scale_channels(Tensor(x), t), wt), Tensor(alpha)))
        results.append(_collect("scale-channels", parts, tolerance))

    if want("concat-channels"):
        parts = []
        for shape in shapes3((1, 2, 4, 4)):
            a = rng.standard_normal(shape)
            b = rng.standard_normal((shape[0], 3) + shape[2:])
            wt = rng.standard_normal((shape[0], shape[1] + 3) + shape[2:])
            parts.append(("first", lambda t, b=b, wt=wt: _weighted(concat_channels(t, Tensor(b)), wt), Tensor(a)))
            parts.append(("second", lambda t, a=a, wt=wt: _weighted(concat_channels(Tensor(a), t), wt), Tensor(b)))
        results.append(_collect("concat-channels", parts, tolerance))

    # convolution, dense and dilated
    for op, dil in (("conv2d", 1), ("conv2d-dilated", 3)):
        if not want(op):
            continue
        parts = []
        for shape, cout in [((1, 2, 8, 8), 3), ((2, 1, 10, 10), 2), ((1, 3, 9, 9), 2)]:
            x = rng.standard_normal(shape)
            k = rng.standard_normal((cout, shape[1], 3, 3))
            b = rng.standard_normal(cout)
            pad = dil
            n, _, h, w = shape
            wt = rng.standard_normal((n, cout, h, w))
            parts.append(("input", lambda t, k=k, b=b, wt=wt, pad=pad: _weighted(
                conv2d(t, Tensor(k), Tensor(b), padding=pad, dilation=dil), wt), Tensor(x)))
            parts.append(("kernel", lambda t, x=x, b=b, wt=wt, pad=pad: _weighted(
                conv2d(Tensor(x), t, Tensor(b), padding=pad, dilation=dil), wt), Tensor(k)))
            parts.append(("bias", lambda t, x=x, k=k, wt=wt, pad=pad: _weighted(
                conv2d(Tensor(x), Tensor(k), t, padding=pad, dilation=dil), wt), Tensor(b)))
        results.append(_collect(op, parts, tolerance))

    # batch normalization in both modes
    for op, mode in (("batchnorm2d-train", "train"), ("batchnorm2d-eval", "eval")):
        if not want(op):
            continue
        parts = []
        for shape in shapes3((2, 3, 4, 4)):
            c = shape[1]
            x = rng.standard_normal(shape)
            scale = rng.standard_normal(c) + 1.5
            shift = rng.standard_normal(c)
            state = BatchNormState(c)
            if mode == "eval":
                state.running_mean[:] = rng.standard_normal(c)
                state.running_var[:] = rng.random(c) + 0.5
                state.updates = 1
            wt = rng.standard_normal(shape)
            parts.append(("input", lambda t, s=scale, b=shift, st=state, wt=wt: _weighted(
                batchnorm2d(t, Tensor(s), Tensor(b), st, mode), wt), Tensor(x)))
            parts.append(("scale", lambda t, x=x, b=shift, st=state, wt=wt: _weighted(
                batchnorm2d(Tensor(x), t, Tensor(b), st, mode), wt), Tensor(scale)))
            parts.append(("shift", lambda t, x=x, s=scale, st=state, wt=wt: _weighted(
                batchnorm2d(Tensor(x), Tensor(s), t, st, mode), wt), Tensor(shift)))
        results.append(_collect(op, parts, tolerance))

    # pooling / upsampling
    if want("maxpool2d"):
        parts = []
        for shape in [(1, 2, 4, 4), (2, 1, 6, 8), (1, 3, 8, 4)]:
            x = rng.standard_normal(shape)
            wt = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))
            parts.append(("input", lambda t, wt=wt: _weighted(maxpool2d(t), wt), Tensor(x)))
        results.append(_collect("maxpool2d", parts, tolerance))

    if want("upsample2x"):
        parts = []
        for shape in [(1, 2, 3, 3), (2, 1, 4, 5), (1, 3, 2, 6)]:
            x = rng.standard_normal(shape)
            wt = rng.standard_normal((shape[0], shape[1], shape[2] * 2, shape[3] * 2))
            parts.append(("input", lambda t, wt=wt: _weighted(upsample2x(t), wt), Tensor(x)))
        results.append(_collect("upsample2x", parts, tolerance))

    # loss
    if want("softmax-cross-entropy"):
        parts = []
        for shape, c in [((1, 3, 4, 4), 3), ((2, 5, 3, 3), 5), ((1, 2, 6, 6), 2)]:
            x = rng.standard_normal(shape)
            labels = rng.integers(0, c, (shape[0],) + shape[2:])
            parts.append(("logits", lambda t, labels=labels: softmax_cross_entropy(t, labels), Tensor(x)))
        results.append(_collect("softmax-cross-entropy", parts, tolerance))

    # stochastic layers with frozen masks
    if want("dropblock"):
        parts = []
        for seed, shape in [(1, (1, 2, 12, 12)), (2, (2, 1, 10, 10)), (3, (1, 1, 8, 8))]:
            x = rng.standard_normal(shape)
            block = DropBlock(3, 0.7)
            parts.append(("input", lambda t, block=block, seed=seed: sum_all(
                block(t, "train", np.random.default_rng(seed))), Tensor(x)))
        results.append(_collect("dropblock", parts, tolerance))

    if want("spatial-dropout2d"):
        parts = []
        for seed, shape in [(4, (1, 6, 4, 4)), (5, (2, 4, 4, 4)), (6, (1, 8, 3, 3))]:
            x = rng.standard_normal(shape)
            parts.append(("input", lambda t, seed=seed: sum_all(
                spatial_dropout2d(t, 0.4, "train", np.random.default_rng(seed))), Tensor(x)))
        results.append(_collect("spatial-dropout2d", parts, tolerance))

    # composite layers: input gradients plus every parameter
    if want("conv-stack"):
        results.append(_layer_check("conv-stack", rng, tolerance))
    if want("aspp"):
        results.append(_aspp_check(rng, tolerance))
    if want("attention-gate"):
        results.append(_gate_check(rng, tolerance))

    # full model, every parameter
    if want("full-model"):
        results.append(_model_check(model_tolerance, model_size))
    return results


def _layer_check(name, rng, tolerance):
    stack = ConvStack(2, 3, rng, dtype=np.float64)
    xv = rng.standard_normal((2, 2, 6, 6))
    wt = rng.standard_normal((2, 3, 6, 6))
    in_err = finite_difference_check(
        lambda t: _weighted(stack(t, "train"), wt), Tensor(xv), step=FD_STEP
    )
    params = {n: t for n, t, trainable in stack.named_tensors("stack") if trainable}
    errors = finite_difference_check_params(
        lambda: _weighted(stack(Tensor(xv), "train"), wt), params, step=FD_STEP
    )
    errors["input"] = in_err
    worst = max(errors, key=errors.get)
    return CheckResult(name, worst, errors[worst], tolerance)


def _aspp_check(rng, tolerance):
    aspp = Aspp(2, rng, dtype=np.float64)
    xv = rng.standard_normal((1, 2, 8, 8))
    wt = rng.standard_normal((1, 2, 8, 8))
    in_err = finite_difference_check(lambda t: _weighted(aspp(t), wt), Tensor(xv), step=FD_STEP)
    params = {n: t for n, t, _ in aspp.named_tensors("aspp")}
    errors = finite_difference_check_params(
        lambda: _weighted(aspp(Tensor(xv)), wt), params, step=FD_STEP
    )
    errors["input"] = in_err
    worst = max(errors, key=errors.get)
    return CheckResult("aspp", worst, errors[worst], tolerance)


def _gate_check(rng, tolerance):
    gate = AttentionGate(2, 3, 2, rng, dtype=np.float64)
    xv = rng.standard_normal((1, 2, 6, 6))
    gv = rng.standard_normal((1, 3, 6, 6))
    wt = rng.standard_normal((1, 2, 6, 6))

    def out(x, g):
        gated, _ = gate(x, g)
        return _weighted(gated, wt)

    errors = {
        "skip": finite_difference_check(lambda t: out(t, Tensor(gv)), Tensor(xv), step=FD_STEP),
        "gating-signal": finite_difference_check(lambda t: out(Tensor(xv), t), Tensor(gv), step=FD_STEP),
    }
    params = {n: t for n, t, _ in gate.named_tensors("gate")}
    errors.update(
        finite_difference_check_params(lambda: out(Tensor(xv), Tensor(gv)), params, step=FD_STEP)
    )
    worst = max(errors, key=errors.get)
    return CheckResult("attention-gate", worst, errors[worst], tolerance)


def _model_check(tolerance, size):
    if size % 8 or size < 24:
        raise ValueError(
            f"full-model check needs a size that is a multiple of 8 and >= 24 "
            f"(deepest map must fit a DropBlock square), got {size}"
        )
    config = LdnetConfig(
        base_width=1, num_classes=2, regularizer="dropblock", block_size=3, keep_prob=0.85
    )
    params = LdnetParams(config, seed=5, dtype=np.float64)
    rng = np.random.default_rng(17)
    x = Tensor(rng.standard_normal((1, 1, size, size)))
    labels = rng.integers(0, 2, (1, size, size))

    def loss():
        # reseeding freezes the DropBlock masks across evaluations
        frozen = np.random.default_rng(99)
        logits = params.forward(x, "train", rng=frozen)
        return softmax_cross_entropy(logits, labels)

    errors = finite_difference_check_params(loss, params.named_params(), step=FD_STEP)
    worst = max(errors, key=errors.get)
    return CheckResult("full-model", worst, errors[worst], tolerance)


def format_table(results) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op'.ljust(width)}  {'max rel err':>12}  {'tolerance':>10}  worst at        status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.op.ljust(width)}  {r.max_rel_error:>12.3e}  {r.tolerance:>10.0e}  "
            f"{r.worst_input:<14}  {status}"
        )
    return "\n".join(lines)
