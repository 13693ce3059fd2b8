"""Operator-facing command line.

Options resolve as flags > LEAFLITE_* environment variables > --config
key=value file > defaults; the resolved configuration is written into the
run directory so every reported number traces back to exact settings.
Exit codes: 0 ok, 2 usage, 3 I/O, 4 format, 5 numeric.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as D
from . import evaluation as E
from . import analysis
from .augment import AugmentConfig, hflip, rotate, shear, shift, stream_for
from .errors import InputError, LeafliteError, UsageError
from .imageproc import ClaheParams, clahe, load_image, save_image
from .model import (
    build_mobilenet_v2,
    init_head,
    load_backbone,
    load_bundle,
    random_weight_store,
    save_bundle,
)
from .train import TrainConfig, train_head
from .weights_io import write_weights

ENV_PREFIX = "LEAFLITE_"


def _read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    return values


class Resolver:
    """flags > environment > config file > default, with type coercion."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
        self.resolved: dict[str, str] = {}

    def get(self, key: str, default, cast=str):
        flag_value = getattr(self.args, key.replace("-", "_"), None)
        if flag_value is not None:
            value = flag_value
        else:
            env = os.environ.get(ENV_PREFIX + key.replace("-", "_").upper())
            if env is not None:
                value = env
            elif key in self.file_values:
                value = self.file_values[key]
            else:
                value = default
        if value is None:
            self.resolved[key] = ""
            return None
        if cast is bool and not isinstance(value, bool):
            value = str(value).lower() in ("1", "true", "yes", "on")
        elif not isinstance(value, cast):
            try:
                value = cast(value)
            except ValueError as exc:
                raise UsageError(f"option {key}: cannot parse {value!r} as {cast.__name__}") from exc
        self.resolved[key] = str(value)
        return value


def _make_run_dir(args, command: str) -> Path:
    run_dir = getattr(args, "run_dir", None)
    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        run_dir = Path("runs") / f"{command}-{stamp}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_resolved(run_dir: Path, command: str, resolver: Resolver) -> None:
    lines = [f"command={command}"]
    lines += [f"{k}={v}" for k, v in sorted(resolver.resolved.items())]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _clahe_params(r: Resolver) -> ClaheParams:
    return ClaheParams(
        tiles_x=r.get("tiles-x", 7, int),
        tiles_y=r.get("tiles-y", 7, int),
        clip_beta=r.get("clip-beta", 3.0, float),
        bins=r.get("bins", 256, int),
    )


def _augment_config(r: Resolver) -> AugmentConfig | None:
    if not r.get("augment", True, bool):
        return None
    return AugmentConfig(
        shift_range=r.get("shift-range", 0.2, float),
        rotation_range=r.get("rotation-range", 20.0, float),
        shear_range=r.get("shear-range", 0.2, float),
        hflip_enabled=r.get("hflip", True, bool),
        per_transform_probability=r.get("aug-probability", 0.5, float),
    )


def cmd_enhance(args) -> int:
    r = Resolver(args)
    params = _clahe_params(r)
    run_dir = _make_run_dir(args, "enhance")
    _write_resolved(run_dir, "enhance", r)

    index = D.scan_dataset(args.in_dir)
    out_root = Path(args.out_dir)
    failures = []
    done = 0
    for entry in index.entries:
        src = Path(index.abspath(entry))
        dst = (out_root / entry.path).with_suffix(".png")
        dst.parent.mkdir(parents=True, exist_ok=True)
        try:
            save_image(clahe(load_image(src), params), dst)
            done += 1
        except (LeafliteError, ValueError, OSError) as exc:
            failures.append(f"{entry.path}\t{exc}")
    summary = [f"images_enhanced={done}", f"failures={len(failures)}"]
    summary += [f"warning={w}" for w in index.warnings]
    (run_dir / "enhance-summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    if failures:
        (run_dir / "failures.txt").write_text("\n".join(failures) + "\n", encoding="utf-8")
        print(f"enhance: {done} written, {len(failures)} failed (see {run_dir}/failures.txt)")
        return 3
    print(f"enhance: {done} images -> {out_root}")
    return 0


def cmd_split(args) -> int:
    r = Resolver(args)
    seed = r.get("seed", 0, int)
    run_dir = _make_run_dir(args, "split")
    _write_resolved(run_dir, "split", r)

    index = D.scan_dataset(args.in_dir)
    assignment = D.split(index, seed)
    manifest = Path(args.manifest) if args.manifest else run_dir / "manifest.tsv"
    manifest.parent.mkdir(parents=True, exist_ok=True)
    D.write_manifest(index, assignment, manifest)
    counts = {s: 0 for s in D.SPLITS}
    for tag in assignment.split_of.values():
        counts[tag] += 1
    print(f"split: {len(index)} entries, {len(index.class_names)} classes -> {manifest}")
    print(f"split: TRAIN={counts['TRAIN']} VAL={counts['VAL']} TEST={counts['TEST']}")
    return 0


def cmd_init_backbone(args) -> int:
    r = Resolver(args)
    seed = r.get("seed", 0, int)
    graph = build_mobilenet_v2()
    write_weights(random_weight_store(graph, seed), args.out)
    print(f"init-backbone: seed {seed} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    r = Resolver(args)
    cfg = TrainConfig(
        batch_size=r.get("batch-size", 16, int),
        max_epochs=r.get("max-epochs", 1000, int),
        initial_lr=r.get("initial-lr", 1e-5, float),
        min_delta=r.get("min-delta", 1e-4, float),
        early_stop_patience=r.get("early-stop-patience", 10, int),
        lr_patience=r.get("lr-patience", 4, int),
        lr_factor=r.get("lr-factor", 0.1, float),
        dropout_rate=r.get("dropout", 0.5, float),
        seed=r.get("seed", 0, int),
    )
    aug_cfg = _augment_config(r)
    clahe_at_inference = r.get("clahe-at-inference", True, bool)
    clahe_params = _clahe_params(r)
    run_dir = _make_run_dir(args, "train")
    _write_resolved(run_dir, "train", r)

    graph = build_mobilenet_v2(input_side=r.get("input-side", 256, int))
    weights = load_backbone(args.backbone, graph)
    index, assignment = D.read_manifest(args.manifest, args.corpus)
    head = init_head(cfg.seed, in_dim=graph.feature_dim,
                     classes=len(index.class_names), dropout_rate=cfg.dropout_rate)

    best_head, history = train_head(graph, weights, head, index, assignment, cfg, aug_cfg)
    history.write_csv(run_dir / "history.csv")
    save_bundle(run_dir / "bundle", weights, best_head, index.class_names,
                apply_clahe=clahe_at_inference, clahe_params=clahe_params,
                input_side=graph.input_side)
    best = max(rec.val_acc for rec in history.records)
    print(f"train: {len(history.records)} epochs, best val acc {best:.4f}")
    print(f"train: bundle -> {run_dir / 'bundle'}")
    return 0


def cmd_eval(args) -> int:
    r = Resolver(args)
    runs = r.get("runs", 100, int)
    base_seed = r.get("base-seed", 0, int)
    batch_size = r.get("batch-size", 16, int)
    split_name = r.get("split", D.TEST, str)
    aug_cfg = _augment_config(r)
    run_dir = _make_run_dir(args, "eval")
    _write_resolved(run_dir, "eval", r)

    bundle = load_bundle(args.bundle)
    index, assignment = D.read_manifest(args.manifest, args.corpus)
    report = E.repeated_eval(bundle, index, assignment, aug_cfg, runs=runs,
                             base_seed=base_seed, split=split_name, batch_size=batch_size)
    members = assignment.members(index, split_name)
    counts = np.zeros(len(bundle.class_names), dtype=int)
    for e in members:
        counts[e.class_id] += 1
    text = E.format_report(report, bundle.class_names, sample_counts=counts)
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    E.roc_points_csv(report, run_dir / "roc.csv")
    print(text, end="")
    print(f"eval: report -> {run_dir / 'report.txt'}")
    return 0


def cmd_infer(args) -> int:
    r = Resolver(args)
    run_dir = _make_run_dir(args, "infer")
    _write_resolved(run_dir, "infer", r)
    bundle = load_bundle(args.bundle)
    from .model import predict

    class_id, class_name, probs = predict(args.image, bundle)
    print(f"class_id={class_id}")
    print(f"class_name={class_name}")
    for i, name in enumerate(bundle.class_names):
        print(f"p[{i}] {name} = {probs[i]:.6f}")
    (run_dir / "prediction.txt").write_text(
        f"{class_id}\t{class_name}\n", encoding="utf-8"
    )
    return 0


def cmd_analyze(args) -> int:
    r = Resolver(args)
    run_dir = _make_run_dir(args, "analyze")
    _write_resolved(run_dir, "analyze", r)
    bundle = load_bundle(args.bundle)
    report = analysis.cost_report(bundle.graph, bundle.head)
    size_mb = analysis.model_size(args.bundle)
    text = analysis.format_cost_table(report, size_mb=size_mb)
    (run_dir / "cost.txt").write_text(text, encoding="utf-8")
    analysis.cost_csv(report, run_dir / "cost.csv")
    print(f"total_params={report.total_params}")
    print(f"mflops_published={report.mflops_published:.4f}")
    print(f"model_size_mb={size_mb:.4f}")
    print(f"analyze: table -> {run_dir / 'cost.txt'}")
    return 0


def cmd_gradcam(args) -> int:
    r = Resolver(args)
    blend = r.get("blend", 0.5, float)
    run_dir = _make_run_dir(args, "gradcam")
    _write_resolved(run_dir, "gradcam", r)
    bundle = load_bundle(args.bundle)
    img = load_image(args.image)
    target = args.target_class
    if target is None:
        from .model import predict

        target, _, _ = predict(args.image, bundle)
    heat = analysis.gradcam(img, bundle, target, blend=blend)
    save_image((np.stack([heat.values] * 3, axis=-1) * 255).astype(np.uint8),
               run_dir / "heatmap.png")
    save_image(heat.overlay, run_dir / "overlay.png")
    print(f"gradcam: class {target} -> {run_dir}/heatmap.png, {run_dir}/overlay.png")
    return 0


def cmd_augment_preview(args) -> int:
    r = Resolver(args)
    seed = r.get("seed", 0, int)
    cfg = AugmentConfig(
        shift_range=r.get("shift-range", 0.2, float),
        rotation_range=r.get("rotation-range", 20.0, float),
        shear_range=r.get("shear-range", 0.2, float),
    )
    run_dir = _make_run_dir(args, "augment-preview")
    _write_resolved(run_dir, "augment-preview", r)
    img = load_image(args.image)
    rng = stream_for(seed)
    panels = {
        "a-input.png": img,
        "b-height-shift.png": shift(img, 0.0, float(rng.uniform(0, cfg.shift_range))),
        "c-width-shift.png": shift(img, float(rng.uniform(0, cfg.shift_range)), 0.0),
        "d-rotation.png": rotate(img, float(rng.uniform(-cfg.rotation_range, cfg.rotation_range))),
        "e-shearing.png": shear(img, float(rng.uniform(0, cfg.shear_range))),
        "f-horizontal-flip.png": hflip(img),
    }
    for name, panel in panels.items():
        save_image(panel, run_dir / name)
    print(f"augment-preview: 6 panels -> {run_dir}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", help="output directory (default: runs/<command>-<timestamp>)")
    p.add_argument("--config", help="flat key=value config file")


def _add_clahe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tiles-x", type=int, help="CLAHE tile columns [published default: 7]")
    p.add_argument("--tiles-y", type=int, help="CLAHE tile rows [published default: 7]")
    p.add_argument("--clip-beta", type=float, help="CLAHE clip threshold [published default: 3]")
    p.add_argument("--bins", type=int, help="CLAHE histogram bins [default: 256]")


def _add_augment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None,
                   help="augment images at runtime [published default: on]")
    p.add_argument("--shift-range", type=float, help="shift fraction range [published default: 0.2]")
    p.add_argument("--rotation-range", type=float, help="rotation degrees [published default: 20]")
    p.add_argument("--shear-range", type=float, help="shear factor range [published default: 0.2]")
    p.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=None,
                   help="enable horizontal flip [published default: on]")
    p.add_argument("--aug-probability", type=float,
                   help="per-transform firing probability [default: 0.5]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leaflite",
        description="Lightweight tomato-leaf-disease pipeline: enhancement, "
                    "training, evaluation, cost analysis, GradCAM.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="CLAHE-enhance a corpus into a mirrored tree")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    _add_clahe_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("split", help="stratified 60/20/20 split manifest")
    p.add_argument("in_dir")
    p.add_argument("--seed", type=int, help="split shuffle seed [default: 0]")
    p.add_argument("--manifest", help="manifest output path [default: <run-dir>/manifest.tsv]")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("init-backbone", help="write a seeded random backbone weight file")
    p.add_argument("--seed", type=int, help="weight seed [default: 0]")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_init_backbone)

    p = sub.add_parser("train", help="train the classifier head on a frozen backbone")
    p.add_argument("--corpus", required=True, help="enhanced corpus root")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True, help="backbone weight file (LWTS)")
    p.add_argument("--batch-size", type=int, help="[published default: 16]")
    p.add_argument("--max-epochs", type=int, help="[published default: 1000]")
    p.add_argument("--initial-lr", type=float, help="[published default: 1e-5]")
    p.add_argument("--min-delta", type=float, help="significant val-acc change [published default: 1e-4]")
    p.add_argument("--early-stop-patience", type=int, help="[published default: 10]")
    p.add_argument("--lr-patience", type=int, help="[published default: 4]")
    p.add_argument("--lr-factor", type=float, help="[published default: 0.1]")
    p.add_argument("--dropout", type=float, help="[default: 0.5]")
    p.add_argument("--seed", type=int, help="run seed [default: 0]")
    p.add_argument("--input-side", type=int, help="network input side [published default: 256]")
    p.add_argument("--clahe-at-inference", action=argparse.BooleanOptionalAction, default=None,
                   help="bundle flag: apply CLAHE inside predict [default: on]")
    _add_clahe_flags(p)
    _add_augment_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeated augmented evaluation of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--runs", type=int, help="test repetitions [published default: 100]")
    p.add_argument("--base-seed", type=int, help="[default: 0]")
    p.add_argument("--batch-size", type=int, help="[published default: 16]")
    p.add_argument("--split", choices=list(D.SPLITS), help="[default: TEST]")
    _add_augment_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--bundle", required=True)
    p.add_argument("image")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="parameter/FLOPs/size accounting for a bundle")
    p.add_argument("--bundle", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcam", help="class-activation heatmap for one image")
    p.add_argument("--bundle", required=True)
    p.add_argument("image")
    p.add_argument("--target-class", type=int, help="class id [default: predicted class]")
    p.add_argument("--blend", type=float, help="overlay blend weight [default: 0.5]")
    _add_common(p)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("augment-preview", help="write the six augmentation panels for an image")
    p.add_argument("image")
    p.add_argument("--seed", type=int, help="[default: 0]")
    p.add_argument("--shift-range", type=float, help="[published default: 0.2]")
    p.add_argument("--rotation-range", type=float, help="[published default: 20]")
    p.add_argument("--shear-range", type=float, help="[published default: 0.2]")
    _add_common(p)
    p.set_defaults(func=cmd_augment_preview)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LeafliteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
