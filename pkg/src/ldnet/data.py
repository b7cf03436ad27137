"""Dataset IO, deterministic splits, and the synthetic scene generator.

On-disk layout: ``root/images/*.png`` grayscale (or RGB) frames paired by
file stem with ``root/labels/*.png`` single-channel masks whose pixel
values are class indices.  The synthetic generator renders desk-scale
event-camera-style lane scenes in the same layout so the rest of the
pipeline is format-agnostic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage


@dataclass
class SegmentationSample:
    frame: np.ndarray  # [H, W, C] floats in [0, 1]
    label: np.ndarray  # [H, W] integer class indices
    id: str


@dataclass
class SplitSpec:
    """50/16/33 fractions with the rounding remainder going to test."""

    train: float = 0.50
    val: float = 0.16
    test: float = 0.33
    seed: int = 0

    def validate(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be non-negative")
        if self.train + self.val + self.test > 1.0 + 1e-9:
            raise ValueError("split fractions must sum to at most 1")


# ---------------------------------------------------------------------------
# loading / writing


def load_dataset(root, num_classes: int) -> list[SegmentationSample]:
    """Read all stem-matched image/label pairs under ``root``, sorted by stem."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        if not any(root.glob("*")):
            return []
        raise ValueError(f"{root}: expected images/ and labels/ subdirectories")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.is_file()}
    labels = {p.stem: p for p in sorted(lab_dir.iterdir()) if p.is_file()}
    for stem in images.keys() | labels.keys():
        if stem not in labels:
            raise ValueError(f"{images[stem]}: missing label counterpart")
        if stem not in images:
            raise ValueError(f"{labels[stem]}: missing image counterpart")

    samples = []
    for stem in sorted(images):
        try:
            img = Image.open(images[stem])
            img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"{images[stem]}: unreadable image ({exc})") from exc
        frame = np.asarray(img, dtype=np.float64) / 255.0
        if frame.ndim == 2:
            frame = frame[:, :, None]
        try:
            lab_img = Image.open(labels[stem])
            lab_img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"{labels[stem]}: unreadable label ({exc})") from exc
        label = np.asarray(lab_img)
        if label.ndim != 2:
            raise ValueError(f"{labels[stem]}: label must be single-channel")
        if label.max(initial=0) >= num_classes:
            raise ValueError(
                f"{labels[stem]}: label value {int(label.max())} outside [0, {num_classes})"
            )
        samples.append(SegmentationSample(frame, label.astype(np.int64), stem))
    return samples


def write_dataset(samples, root):
    """Write samples in the images/ + labels/ layout (8-bit PNGs)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for sample in samples:
        frame = np.clip(np.round(sample.frame * 255.0), 0, 255).astype(np.uint8)
        if frame.shape[2] == 1:
            img = Image.fromarray(frame[:, :, 0], mode="L")
        else:
            img = Image.fromarray(frame, mode="RGB")
        img.save(root / "images" / f"{sample.id}.png")
        Image.fromarray(sample.label.astype(np.uint8), mode="L").save(
            root / "labels" / f"{sample.id}.png"
        )


def resize_sample(sample: SegmentationSample, target: int = 256) -> SegmentationSample:
    """Bilinear frame resize; nearest-neighbor labels (indices must survive)."""
    h, w = sample.label.shape
    if h == target and w == target:
        return sample
    channels = []
    for c in range(sample.frame.shape[2]):
        img = Image.fromarray(sample.frame[:, :, c].astype(np.float32), mode="F")
        channels.append(np.asarray(img.resize((target, target), Image.BILINEAR)))
    frame = np.stack(channels, axis=2).astype(np.float64)
    lab = Image.fromarray(sample.label.astype(np.uint8), mode="L")
    label = np.asarray(lab.resize((target, target), Image.NEAREST)).astype(np.int64)
    return SegmentationSample(frame, label, sample.id)


def split_dataset(samples, spec: SplitSpec):
    """Seeded shuffle then contiguous slices; remainder goes to test."""
    spec.validate()
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    n_train = int(len(samples) * spec.train)
    n_val = int(len(samples) * spec.val)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic event-frame scenes


def synth_scene(seed: int, size: int = 256, num_classes: int = 5) -> SegmentationSample:
    """Render one synthetic lane scene with event-camera appearance.

    One to four lane polylines converge toward a vanishing point and stop
    well short of it so strokes never merge.  Stroke borders are bright
    sparse activations, interiors dim, background near-zero with
    salt-and-pepper polarity noise.  Multiclass scenes draw solid strokes
    only, keeping each lane class a single connected component; binary
    scenes may be dashed.
    """
    if num_classes not in (2, 5):
        raise ValueError(f"num_classes must be 2 or 5, got {num_classes}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    s = float(size)
    scale = s / 256.0

    vx = rng.uniform(0.35, 0.65) * s
    vy = rng.uniform(0.10, 0.25) * s
    n_lanes = int(rng.integers(1, 5))

    slots = np.linspace(0.10, 0.90, n_lanes + 2)[1:-1]
    gap = (slots[1] - slots[0]) if n_lanes > 1 else 0.8
    anchors = (slots + rng.uniform(-0.2, 0.2, n_lanes) * gap) * s
    anchors.sort()

    min_gap = np.diff(anchors).min() if n_lanes > 1 else s
    t_max = min(0.85, 1.0 - (16.0 * scale) / max(min_gap, 17.0 * scale))

    frame = np.zeros((size, size))
    label = np.zeros((size, size), dtype=np.int64)

    for idx, xb in enumerate(anchors):
        width = max(2.0, round(float(rng.integers(2, 7))) * scale)
        dashed = num_classes == 2 and rng.random() < 0.5
        period = rng.uniform(10.0, 18.0) * scale
        amp = rng.uniform(0.0, 0.02) * s
        phase = rng.uniform(0.0, np.pi)

        start = np.array([xb, s - 1.0])
        direction = np.array([vx, vy]) - start
        normal = np.array([-direction[1], direction[0]])
        normal /= np.linalg.norm(normal)

        length = np.linalg.norm(direction) * t_max
        steps = max(2, int(length * 4))
        t = np.linspace(0.0, t_max, steps)
        pts = start[None, :] + t[:, None] * direction[None, :]
        pts = pts + (amp * np.sin(np.pi * t / t_max + phase))[:, None] * normal[None, :]
        if dashed:
            arc = t * np.linalg.norm(direction)
            keep = (arc % period) < 0.7 * period
            pts = pts[keep]

        canvas = np.zeros((size, size), dtype=bool)
        cols = np.clip(np.round(pts[:, 0]).astype(int), 0, size - 1)
        rows = np.clip(np.round(pts[:, 1]).astype(int), 0, size - 1)
        canvas[rows, cols] = True
        dist = ndimage.distance_transform_edt(~canvas)

        stroke = dist <= width / 2.0
        border = (dist <= width / 2.0 + 0.8) & (dist >= max(0.0, width / 2.0 - 1.2))
        interior = dist < max(0.0, width / 2.0 - 1.2)

        bright = rng.uniform(0.6, 1.0, int(border.sum()))
        bright[rng.random(bright.size) < 0.10] = 0.05  # sparse event dropout
        frame[border] = bright
        frame[interior] = rng.uniform(0.05, 0.25, int(interior.sum()))

        cls = 1 + idx if num_classes == 5 else 1
        label[stroke] = cls

    salt = rng.random((size, size)) < 0.008
    frame[salt] = rng.uniform(0.4, 1.0, int(salt.sum()))
    pepper = rng.random((size, size)) < 0.008
    frame[pepper] = 0.0

    return SegmentationSample(frame[:, :, None], label, f"synth_{seed:08d}")


def synth_dataset(seed: int, count: int, size: int = 256, num_classes: int = 5):
    """A list of scenes with per-index derived seeds; stable ids for sorting."""
    samples = []
    for i in range(count):
        scene_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        sample = synth_scene(scene_seed, size, num_classes)
        sample.id = f"synth_{i:05d}"
        samples.append(sample)
    return samples
