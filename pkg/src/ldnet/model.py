"""The full segmentation network and its checkpoint format.

Four encoder blocks (conv stack, structured dropout, 2x2 max pool; the
last block keeps full depth without pooling), a six-rate dilated core,
three decoder blocks that upsample, gate the matching skip connection,
concatenate and convolve, and a per-pixel 1x1 classifier head.
"""

from __future__ import annotations

import io
import json
import os
import zlib
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .layers import Aspp, AttentionGate, ConvStack, DropBlock, he_kernel, spatial_dropout2d, zero_bias
from .tensor import Tensor, concat_channels, conv2d, maxpool2d, upsample2x

CHECKPOINT_MAGIC = b"LDN1"

REGULARIZERS = ("dropblock", "dropout2d", "none")


@dataclass
class LdnetConfig:
    """Architecture hyperparameters; training settings live in TrainConfig."""

    in_channels: int = 1
    base_width: int = 16
    num_classes: int = 5
    block_size: int = 5
    keep_prob: float = 0.9
    regularizer: str = "dropblock"
    dropout_p: float = 0.1
    attention_f_int: Optional[int] = None

    def validate(self) -> list[str]:
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_width < 1:
            problems.append(f"base_width must be >= 1, got {self.base_width}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            problems.append(f"block_size must be odd and positive, got {self.block_size}")
        if not 0.0 <= self.keep_prob <= 1.0:
            problems.append(f"keep_prob must be in [0, 1], got {self.keep_prob}")
        if self.regularizer not in REGULARIZERS:
            problems.append(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.attention_f_int is not None and self.attention_f_int < 1:
            problems.append(f"attention_f_int must be >= 1, got {self.attention_f_int}")
        return problems

    def encoder_widths(self) -> list[int]:
        f = self.base_width
        return [f, 2 * f, 4 * f, 8 * f]

    def f_int_for(self, f_l: int) -> int:
        if self.attention_f_int is not None:
            return self.attention_f_int
        return max(1, f_l // 2)


class LdnetParams:
    """All trainable tensors plus normalization state, addressable by name."""

    def __init__(self, config: LdnetConfig, seed: int = 0, dtype=np.float32):
        problems = config.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.encoder_widths()

        self.encoder: list[ConvStack] = []
        self.dropblocks: list[DropBlock] = []
        cin = config.in_channels
        for w in widths:
            self.encoder.append(ConvStack(cin, w, rng, dtype))
            self.dropblocks.append(DropBlock(config.block_size, config.keep_prob))
            cin = w

        self.aspp = Aspp(widths[3], rng, dtype)

        # decoder stage d consumes the coarse map (gating signal) and the
        # matching skip: channels (skip + coarse) -> skip width
        self.decoder: list[tuple[AttentionGate, ConvStack]] = []
        coarse = widths[3]
        for skip_w in reversed(widths[:3]):
            gate = AttentionGate(skip_w, coarse, config.f_int_for(skip_w), rng, dtype)
            stack = ConvStack(skip_w + coarse, skip_w, rng, dtype)
            self.decoder.append((gate, stack))
            coarse = skip_w

        self.classifier_kernel = he_kernel(rng, config.num_classes, widths[0], 1, dtype)
        self.classifier_bias = zero_bias(config.num_classes, dtype)

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, mode: str, rng=None, skip_gates: bool = False) -> Tensor:
        """Run the network; returns per-pixel class logits at input resolution.

        ``rng`` drives the stochastic regularizer and is required only in
        train mode with a regularizer enabled.  ``skip_gates`` replaces every
        attention gate with an identity pass-through (ablation/debug).
        """
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ValueError(f"input has {c} channels, model expects {self.config.in_channels}")
        if h % 8 or w % 8:
            raise ValueError(f"input extent {h}x{w} must be divisible by 8 (three pooling stages)")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

        skips = []
        for i, (stack, drop) in enumerate(zip(self.encoder, self.dropblocks)):
            x = stack(x, mode)
            x = self._regularize(x, drop, mode, rng)
            if i < 3:
                skips.append(x)
                x = maxpool2d(x)

        x = self.aspp(x)

        for (gate, stack), skip in zip(self.decoder, reversed(skips)):
            g = upsample2x(x)
            gated = skip if skip_gates else gate(skip, g)[0]
            x = stack(concat_channels(gated, g), mode)

        return conv2d(x, self.classifier_kernel, self.classifier_bias)

    def _regularize(self, x, drop, mode, rng):
        kind = self.config.regularizer
        if mode == "eval" or kind == "none":
            return x
        if kind == "dropblock":
            return drop(x, mode, rng)
        return spatial_dropout2d(x, self.config.dropout_p, mode, rng)

    def set_keep_prob(self, keep_prob: float):
        for drop in self.dropblocks:
            drop.keep_prob = keep_prob

    # -- parameter access ---------------------------------------------------

    def named_tensors(self):
        """Yields (name, tensor-or-array, trainable) over all stored values."""
        for i, stack in enumerate(self.encoder, start=1):
            yield from stack.named_tensors(f"enc{i}")
        yield from self.aspp.named_tensors("aspp")
        for i, (gate, stack) in enumerate(self.decoder, start=1):
            yield from gate.named_tensors(f"dec{i}.gate")
            yield from stack.named_tensors(f"dec{i}.stack")
        yield "classifier.kernel", self.classifier_kernel, True
        yield "classifier.bias", self.classifier_bias, True

    def named_params(self) -> dict[str, Tensor]:
        return {name: t for name, t, trainable in self.named_tensors() if trainable}

    def zero_grads(self):
        for t in self.named_params().values():
            t.zero_grad()

    def count_params(self) -> int:
        return sum(t.values.size for t in self.named_params().values())


def param_count(config: LdnetConfig) -> int:
    """Closed-form trainable scalar count.

    Per conv stack Cin->Cout: 9*Cin*Cout + 9*Cout^2 + 6*Cout (two kernels,
    two biases, two normalization scale/shift pairs).  Each dilated branch
    C->C: 9*C^2 + C, six branches.  A gate (F_l, F_g, F_int): F_int*(F_l +
    F_g + 1) + F_int + 1.  Classifier: F*classes + classes.
    """

    def stack(cin, cout):
        return 9 * cin * cout + 9 * cout * cout + 6 * cout

    def gate(f_l, f_g, f_int):
        return f_int * f_l + f_int * f_g + f_int + f_int + 1

    widths = config.encoder_widths()
    total = 0
    cin = config.in_channels
    for w in widths:
        total += stack(cin, w)
        cin = w
    total += 6 * (9 * widths[3] ** 2 + widths[3])
    coarse = widths[3]
    for skip_w in reversed(widths[:3]):
        total += gate(skip_w, coarse, config.f_int_for(skip_w))
        total += stack(skip_w + coarse, skip_w)
        coarse = skip_w
    total += widths[0] * config.num_classes + config.num_classes
    return total


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "LDN1" | u32 header length | JSON header | float32-LE payload |
# u32 CRC32 of everything before it.  The header carries the architecture
# config, the ordered tensor directory (name + shape), and optional
# training-state scalars.


def _config_dict(config: LdnetConfig) -> dict:
    return asdict(config)


def save_checkpoint(path, params: LdnetParams, extra: Optional[dict] = None,
                    extra_arrays: Optional[dict[str, np.ndarray]] = None):
    """Write params (and optional optimizer arrays) to ``path`` atomically."""
    entries = []
    blobs = []
    for name, t, trainable in params.named_tensors():
        arr = t.values if isinstance(t, Tensor) else t
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if extra_arrays:
        for name in sorted(extra_arrays):
            arr = extra_arrays[name]
            entries.append({"name": name, "shape": list(np.shape(arr))})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps(
        {"config": _config_dict(params.config), "tensors": entries, "extra": extra or {}},
        sort_keys=True,
    ).encode()

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(header).to_bytes(4, "little"))
    buf.write(header)
    for blob in blobs:
        buf.write(blob)
    body = buf.getvalue()
    data = body + (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")

    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_checkpoint_config(path) -> LdnetConfig:
    """Recover the architecture config stored in a checkpoint header."""
    with open(path, "rb") as fh:
        data = fh.read(8)
        if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        header_len = int.from_bytes(data[4:8], "little")
        header_raw = fh.read(header_len)
    if len(header_raw) < header_len:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(header_raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header") from exc
    return LdnetConfig(**header["config"])


def load_checkpoint(path, config: LdnetConfig, dtype=np.float32):
    """Read a checkpoint; the stored config must match ``config``.

    Returns (params, extra, extra_arrays) where extra_arrays holds any
    non-model tensors (optimizer state) keyed by their stored names.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    stored_crc = int.from_bytes(data[-4:], "little")
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: checksum failure, file is corrupt")
    header_len = int.from_bytes(data[4:8], "little")
    try:
        header = json.loads(data[8 : 8 + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt header") from exc

    saved_cfg = header["config"]
    want_cfg = _config_dict(config)
    for key in ("in_channels", "base_width", "num_classes", "attention_f_int"):
        if saved_cfg.get(key) != want_cfg.get(key):
            detail = " (classifier shape depends on it)" if key == "num_classes" else ""
            raise ValueError(
                f"{path}: config mismatch on {key}: checkpoint has "
                f"{saved_cfg.get(key)}, expected {want_cfg.get(key)}{detail}"
            )

    params = LdnetParams(config, seed=0, dtype=dtype)
    own = {name: t for name, t, _ in params.named_tensors()}
    offset = 8 + header_len
    extra_arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        raw = data[offset : offset + nbytes]
        if len(raw) < nbytes:
            raise ValueError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        offset += nbytes
        name = entry["name"]
        if name in own:
            target = own[name]
            dest = target.values if isinstance(target, Tensor) else target
            if dest.shape != arr.shape:
                raise ValueError(
                    f"{path}: tensor {name} has shape {arr.shape}, expected {dest.shape}"
                )
            dest[...] = arr.astype(dest.dtype)
        else:
            extra_arrays[name] = arr.astype(dtype)
    if offset != len(data) - 4:
        raise ValueError(f"{path}: payload length does not match tensor directory")
    for stack in params.encoder:
        stack.bn1.state.updates = 1
        stack.bn2.state.updates = 1
    for _, stack in params.decoder:
        stack.bn1.state.updates = 1
        stack.bn2.state.updates = 1
    return params, header.get("extra", {}), extra_arrays
