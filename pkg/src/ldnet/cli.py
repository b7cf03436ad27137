"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic dataset), ``train`` (split, train,
validate, checkpoint, report), ``eval`` (score a checkpoint on a split),
``infer`` (predict a mask and color overlay for one image), ``gradcheck``
(run the finite-difference verification suite).

Configuration is a flat ``key=value`` text file plus ``--set key=value``
overrides; the fully resolved configuration is echoed into the output
directory so a run can be reproduced from its artifacts alone.  Exit codes:
0 success, 1 validation/verification error, 2 runtime failure.  Errors are
printed to stderr prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    SplitSpec,
    load_dataset,
    resize_sample,
    split_dataset,
    synth_dataset,
    write_dataset,
)
from .gradcheck import DEFAULT_TOLERANCE, MODEL_TOLERANCE, format_table, run_suite
from .metrics import mean_report, report_to_dict, reports_to_json
from .model import LdnetConfig, LdnetParams, load_checkpoint, read_checkpoint_config, save_checkpoint
from .training import AdamState, TrainConfig, evaluate, fit
from . import plots

RUN_KEY_DEFAULTS = {
    "image_size": 256,
    "split_train": 0.50,
    "split_val": 0.16,
    "split_test": 0.33,
    "split_seed": 0,
    "checkpoint_every": 1,
}


def _schema():
    """key -> (section, default) for every recognized config key."""
    schema = {}
    for f in dataclasses.fields(LdnetConfig):
        schema[f.name] = ("model", f.default)
    for f in dataclasses.fields(TrainConfig):
        schema[f.name] = ("train", f.default)
    for key, default in RUN_KEY_DEFAULTS.items():
        schema[key] = ("run", default)
    return schema


def _parse_value(key, raw, default):
    raw = raw.strip()
    if default is None:
        # only optional-integer keys have a None default
        if raw.lower() in ("none", ""):
            return None
        try:
            return int(raw)
        except ValueError as exc:
            raise ValueError(f"{key}: expected integer or 'none', got {raw!r}") from exc
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ValueError(f"{key}: expected integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ValueError(f"{key}: expected number, got {raw!r}") from exc
    return raw


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = raw
    return values


def resolve_config(config_path=None, overrides=()):
    """Merge defaults, config file, and --set overrides; collect all problems."""
    schema = _schema()
    resolved = {key: default for key, (_, default) in schema.items()}
    problems = []

    sources = []
    if config_path:
        try:
            sources.append(parse_config_file(config_path))
        except (OSError, ValueError) as exc:
            problems.append(str(exc))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            problems.append(f"--set {item!r}: expected key=value")
            continue
        key, raw = item.split("=", 1)
        pairs[key.strip()] = raw
    sources.append(pairs)

    for source in sources:
        for key, raw in source.items():
            if key not in schema:
                problems.append(f"unknown config key {key!r}")
                continue
            try:
                resolved[key] = _parse_value(key, raw, schema[key][1])
            except ValueError as exc:
                problems.append(str(exc))

    # keep going so every problem is reported in one pass
    model_cfg = LdnetConfig(**{f.name: resolved[f.name] for f in dataclasses.fields(LdnetConfig)})
    train_cfg = TrainConfig(**{f.name: resolved[f.name] for f in dataclasses.fields(TrainConfig)})
    run_cfg = {key: resolved[key] for key in RUN_KEY_DEFAULTS}

    problems += model_cfg.validate() + train_cfg.validate()
    if run_cfg["image_size"] % 8 or run_cfg["image_size"] < 16:
        problems.append(f"image_size must be a multiple of 8 and >= 16, got {run_cfg['image_size']}")
    if run_cfg["checkpoint_every"] < 0:
        problems.append(f"checkpoint_every must be >= 0, got {run_cfg['checkpoint_every']}")
    try:
        SplitSpec(run_cfg["split_train"], run_cfg["split_val"], run_cfg["split_test"]).validate()
    except ValueError as exc:
        problems.append(str(exc))
    if problems:
        return None, None, None, problems
    return model_cfg, train_cfg, run_cfg, []


def echo_config(model_cfg, train_cfg, run_cfg, path):
    resolved = {}
    resolved.update(dataclasses.asdict(model_cfg))
    resolved.update(dataclasses.asdict(train_cfg))
    resolved.update(run_cfg)
    lines = [f"{key}={_format_value(resolved[key])}" for key in sorted(resolved)]
    Path(path).write_text("\n".join(lines) + "\n")


def _fail(message, code):
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    try:
        samples = synth_dataset(args.seed, args.count, size=args.size, num_classes=args.classes)
        out = Path(args.out)
        write_dataset(samples, out)
        manifest = {
            "count": args.count,
            "classes": args.classes,
            "seed": args.seed,
            "size": args.size,
            "ids": [s.id for s in samples],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except ValueError as exc:
        return _fail(str(exc), 1)
    except OSError as exc:
        return _fail(f"cannot write dataset: {exc}", 2)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _load_resized(data_dir, num_classes, image_size):
    samples = load_dataset(data_dir, num_classes)
    return [resize_sample(s, image_size) for s in samples]


def _write_metrics_outputs(counts, out_dir, stem):
    out_dir = Path(out_dir)
    doc = json.loads(reports_to_json(counts))
    (out_dir / f"{stem}.json").write_text(reports_to_json(counts) + "\n")
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_set", "class", "precision", "recall", "f1", "iou", "tp", "fp", "fn"])
        for class_set, report in doc.items():
            for cls, scores in sorted(report["per-class"].items(), key=lambda kv: int(kv[0])):
                writer.writerow([
                    class_set, cls, scores["P"], scores["R"], scores["F1"], scores["IoU"],
                    scores["TP"], scores["FP"], scores["FN"],
                ])
    plots.save_metrics_chart(doc["lane-classes"], out_dir / f"{stem}.png")
    return doc


def cmd_train(args):
    model_cfg, train_cfg, run_cfg, problems = resolve_config(args.config, args.set or ())
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return 1

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        echo_config(model_cfg, train_cfg, run_cfg, out / "config.txt")
        (out / "run_info.txt").write_text(
            f"started {time.strftime('%Y-%m-%d %H:%M:%S')}\n"
        )
        samples = _load_resized(args.data, model_cfg.num_classes, run_cfg["image_size"])
    except ValueError as exc:
        return _fail(str(exc), 1)
    except OSError as exc:
        return _fail(str(exc), 2)
    if not samples:
        return _fail(f"no samples found under {args.data}", 1)

    spec = SplitSpec(run_cfg["split_train"], run_cfg["split_val"], run_cfg["split_test"],
                     seed=run_cfg["split_seed"])
    train_samples, val_samples, test_samples = split_dataset(samples, spec)
    if train_cfg.max_epochs > 0 and not train_samples:
        return _fail("training split is empty", 1)

    params = LdnetParams(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype())
    state = AdamState(params.named_params())

    log_path = out / "training_log.csv"
    every = run_cfg["checkpoint_every"]

    def on_epoch(entry, adam_state):
        if every and (entry.epoch + 1) % every == 0 or entry.epoch + 1 == train_cfg.max_epochs:
            save_checkpoint(
                out / "last.ckpt", params,
                extra={"epoch": entry.epoch + 1, "adam_t": adam_state.t},
                extra_arrays=adam_state.as_arrays(),
            )
        print(
            f"epoch {entry.epoch:3d}  lr {entry.lr:.3e}  kP {entry.keep_prob:.3f}  "
            f"loss {entry.loss:.4f}"
            + (f"  val F1 {entry.val_mean_f1:.3f}  val IoU {entry.val_mean_iou:.3f}"
               if entry.val_mean_f1 is not None else "")
        )

    try:
        logs, state = fit(params, train_samples, val_samples, train_cfg,
                          state=state, on_epoch=on_epoch)
    except ValueError as exc:
        return _fail(str(exc), 2)

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "keep_prob", "loss", "val_mean_f1", "val_mean_iou"])
        for entry in logs:
            writer.writerow([
                entry.epoch, repr(entry.lr), repr(entry.keep_prob), repr(entry.loss),
                "" if entry.val_mean_f1 is None else repr(entry.val_mean_f1),
                "" if entry.val_mean_iou is None else repr(entry.val_mean_iou),
            ])
    if logs:
        plots.save_training_curves(logs, out / "training_curves.png")

    save_checkpoint(out / "final.ckpt", params,
                    extra={"epoch": train_cfg.max_epochs, "adam_t": state.t},
                    extra_arrays=state.as_arrays())

    eval_split = test_samples if test_samples else samples
    counts = evaluate(params, eval_split, batch_size=train_cfg.batch_size)
    doc = _write_metrics_outputs(counts, out, "test_metrics")
    lane = doc["lane-classes"]
    print(f"test: mean F1 {lane['mean-F1']:.2f}%  mean IoU {lane['mean-IoU']:.2f}% (lane classes)")
    return 0


def cmd_eval(args):
    try:
        model_cfg = read_checkpoint_config(args.checkpoint)
        params, _, _ = load_checkpoint(args.checkpoint, model_cfg)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(str(exc), 1)

    _, _, run_cfg, problems = resolve_config(args.config, args.set or ())
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return 1
    try:
        samples = _load_resized(args.data, model_cfg.num_classes, run_cfg["image_size"])
    except ValueError as exc:
        return _fail(str(exc), 1)
    if not samples:
        return _fail(f"no samples found under {args.data}", 1)

    if args.split != "all":
        spec = SplitSpec(run_cfg["split_train"], run_cfg["split_val"], run_cfg["split_test"],
                         seed=run_cfg["split_seed"])
        train_s, val_s, test_s = split_dataset(samples, spec)
        samples = {"train": train_s, "val": val_s, "test": test_s}[args.split]
        if not samples:
            return _fail(f"split {args.split!r} is empty", 1)

    counts = evaluate(params, samples)
    text = reports_to_json(counts)
    print(text)
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            return _fail(str(exc), 2)
        _write_metrics_outputs(counts, out, f"metrics_{args.split}")
    return 0


def cmd_infer(args):
    from PIL import Image, UnidentifiedImageError

    try:
        model_cfg = read_checkpoint_config(args.checkpoint)
        params, _, _ = load_checkpoint(args.checkpoint, model_cfg)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(str(exc), 1)
    try:
        img = Image.open(args.image)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        return _fail(f"{args.image}: unreadable image ({exc})", 1)

    if model_cfg.in_channels == 1:
        img = img.convert("L")
    else:
        img = img.convert("RGB")
    w, h = img.size
    if w % 8 or h % 8 or w != h:
        img = img.resize((args.size, args.size), Image.BILINEAR)
    frame = np.asarray(img, dtype=np.float32) / 255.0
    if frame.ndim == 2:
        frame = frame[:, :, None]

    from .tensor import Tensor, no_grad

    x = Tensor(frame.transpose(2, 0, 1)[None])
    with no_grad():
        logits = params.forward(x, "eval")
    mask = logits.values.argmax(axis=1)[0].astype(np.uint8)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(args.image).stem
        plots.save_mask(mask, out / f"{stem}_mask.png")
        plots.save_overlay(mask, out / f"{stem}_overlay.png")
    except OSError as exc:
        return _fail(str(exc), 2)
    print(f"wrote {stem}_mask.png and {stem}_overlay.png to {args.out}")
    return 0


def cmd_gradcheck(args):
    only = set(args.ops.split(",")) if args.ops else None
    try:
        results = run_suite(tolerance=args.tolerance, model_tolerance=args.model_tolerance,
                            model_size=args.size, only=only)
    except ValueError as exc:
        return _fail(str(exc), 1)
    if not results:
        return _fail(f"no checks match --ops {args.ops!r}", 1)
    print(format_table(results))
    failures = [r for r in results if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        return _fail(
            f"gradient check failed for {worst.op} at {worst.worst_input} "
            f"(rel err {worst.max_rel_error:.3e} >= {worst.tolerance:.0e})",
            1,
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ldnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic event-frame lane dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--classes", type=int, default=5, choices=(2, 5))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask and overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--size", type=int, default=32, help="full-model input extent")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--model-tolerance", type=float, default=MODEL_TOLERANCE)
    p.add_argument("--ops", default=None, help="comma-separated subset of checks")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return _fail("interrupted", 2)


if __name__ == "__main__":
    sys.exit(main())
