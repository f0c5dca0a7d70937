"""Command-line entry point for reproducible desk-scale experiments.

Subcommands: synth, train, infer, eval, compare, assign, analyze.  Every
run writes one manifest next to its outputs.  Exit codes: 0 success,
2 usage or configuration error, 3 data validation error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio, evaluation, heads, hierarchy, optim
from .detect import PostProcessConfig
from .errors import ConfigError, FormatError, NumericalError, ValidationError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _CliConfigError(Exception):
    """Flag combination rejected before any work happens."""


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(path: Path, command: str, config: dict, seed, inputs: dict,
                    outputs: dict, started: str) -> None:
    manifest = {"command": command, "config": config, "seed": seed,
                "inputs": {k: str(v) for k, v in inputs.items()},
                "outputs": {k: str(v) for k, v in outputs.items()},
                "tool_version": __version__,
                "started_at": started, "finished_at": _utc_now()}
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _loss_config(args) -> heads.LossConfig:
    return heads.LossConfig(regression=args.reg_loss.replace("-", "_"),
                            smooth_l1_beta=args.smooth_l1_beta,
                            cls_weight=args.cls_weight,
                            loc_weight=args.loc_weight)


def _post_config(args) -> PostProcessConfig:
    return PostProcessConfig(score_threshold=args.score_threshold,
                             nms_iou=args.nms_iou,
                             topk_per_image=args.topk)


def _group_batch(ds, hier, key: str, children):
    """Training records for one hierarchy group with remapped labels.

    Children keep their own index; anything else (the parent category,
    background, or an unrelated label) maps to the group's last slot.
    """
    routed = hierarchy.route_proposals(ds, hier)
    idxs = routed.groups.get(key, np.empty(0, dtype=np.int64))
    if idxs.size == 0:
        raise _CliConfigError(f"no training records routed to group {key!r}")
    sub = ds.subset(idxs)
    child_index = {name: i for i, name in enumerate(children)}
    remapped = np.full(sub.n_records, -1, dtype=np.int32)
    for i in range(sub.n_records):
        label = int(sub.labels[i])
        if label >= 0:
            remapped[i] = child_index.get(ds.category_names[label], -1)
    gt = np.where((remapped >= 0)[:, None], sub.gt_boxes, 0.0).astype(np.float32)
    return dataclasses.replace(sub, labels=remapped, gt_boxes=gt,
                               category_names=list(children))


def _train_one(ds, args, loss_cfg, seed: int):
    head = heads.init_head(len(ds.category_names), ds.feature_dim,
                           std=args.init_std, seed=seed)
    if args.optimizer == "sgd":
        cfg = optim.SgdConfig(learning_rate=args.lr, momentum=args.momentum,
                              batch_images=args.batch_images,
                              num_iterations=args.iters, seed=seed)
        return optim.train_sgd(head, ds, cfg, loss_cfg)
    augment = None
    if args.aug:
        augment = optim.AugmentConfig(copies=args.aug_copies,
                                      noise_std=args.aug_noise,
                                      dropout_rate=args.aug_dropout)
    cfg = optim.NewtonConfig(num_iterations=args.iters, n_cg=args.ncg,
                             lam=args.lam, augment=augment, seed=seed,
                             batch_images=args.batch_images)
    if args.optimizer == "newton":
        return optim.train_full_batch(head, ds, cfg, loss_cfg)
    return optim.train_minibatch(head, ds, cfg, loss_cfg)


def cmd_synth(args) -> int:
    started = _utc_now()
    if args.preset == "acceptance":
        cfg = dataio.acceptance_config(seed=args.seed if args.seed is not None else 42)
    else:
        required = ["categories", "shots", "dim", "separation", "noise_std"]
        missing = [name for name in required if getattr(args, name) is None]
        if missing:
            raise _CliConfigError(
                "missing required flags: " + ", ".join(f"--{m}" for m in missing))
        cfg = dataio.SyntheticConfig(
            num_categories=args.categories, shots_per_category=args.shots,
            feature_dim=args.dim, cluster_separation=args.separation,
            within_cluster_std=args.noise_std, image_size=args.image_size,
            proposals_per_object=args.proposals_per_object,
            background_proposals_per_image=args.background_per_image,
            seed=args.seed if args.seed is not None else 0,
            num_base=args.num_base, child_ratio=args.child_ratio,
            childless_base=args.childless_base)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, truth = dataio.generate_synthetic(cfg)
    outputs = {"train": out / "train.fsfd", "test": out / "test.fsfd"}
    dataio.write_dataset(train, outputs["train"])
    dataio.write_dataset(test, outputs["test"])
    if truth.hierarchy is not None:
        outputs["hierarchy"] = out / "hierarchy.json"
        dataio.write_hierarchy(truth.hierarchy, outputs["hierarchy"])
    _write_manifest(out / "synth_manifest.json", "synth",
                    dataclasses.asdict(cfg), cfg.seed, {}, outputs, started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = _utc_now()
    ds = dataio.read_dataset(args.dataset)
    if not ds.has_labels:
        raise _CliConfigError("training requires a labeled dataset")
    if args.optimizer in ("newton", "newton-mb") and args.reg_loss == "smooth-l1":
        raise _CliConfigError(
            "the newton optimizers require --reg-loss l2; "
            "use --optimizer sgd for smooth-l1")
    loss_cfg = _loss_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}

    hier = dataio.read_hierarchy(args.hierarchy) if args.hierarchy else None
    groups = hier.named_groups() if hier is not None else []
    seeds = [args.seed + r for r in range(args.repeats)]
    final_losses = []
    for run, seed in enumerate(seeds):
        tag = f"_run{run}" if args.repeats > 1 else ""
        if groups:
            if not ds.has_base_outputs:
                raise _CliConfigError(
                    "hierarchy training needs base predictor outputs in the dataset")
            for key, _, children in groups:
                batch = _group_batch(ds, hier, key, children)
                head, curve = _train_one(batch, args, loss_cfg, seed)
                outputs[f"head_{key}{tag}"] = out / f"head_{key}{tag}.fshw"
                outputs[f"curve_{key}{tag}"] = out / f"curve_{key}{tag}.csv"
                heads.save_head(head, outputs[f"head_{key}{tag}"])
                optim.write_curve_csv(curve, outputs[f"curve_{key}{tag}"])
                final_losses.append(curve.losses[-1])
        else:
            head, curve = _train_one(ds, args, loss_cfg, seed)
            outputs[f"head{tag}"] = out / f"head{tag}.fshw"
            outputs[f"curve{tag}"] = out / f"curve{tag}.csv"
            heads.save_head(head, outputs[f"head{tag}"])
            optim.write_curve_csv(curve, outputs[f"curve{tag}"])
            final_losses.append(curve.losses[-1])
    if args.repeats > 1:
        mean = float(np.mean(final_losses))
        ci = 1.96 * float(np.std(final_losses, ddof=1)) / np.sqrt(len(final_losses))
        outputs["repeats_summary"] = out / "repeats_summary.json"
        outputs["repeats_summary"].write_text(json.dumps(
            {"final_loss_mean": mean, "final_loss_ci95": ci,
             "repeats": args.repeats}, indent=2) + "\n", encoding="utf-8")
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(out / "train_manifest.json", "train", config, args.seed,
                    {"dataset": args.dataset, "hierarchy": args.hierarchy or ""},
                    outputs, started)
    return EXIT_OK


def cmd_infer(args) -> int:
    started = _utc_now()
    ds = dataio.read_dataset(args.dataset)
    hier = dataio.read_hierarchy(args.hierarchy)
    post = _post_config(args)
    groups = hier.named_groups()
    novel_heads: dict = {}
    for key, _, _ in groups:
        path = Path(args.heads_dir) / f"head_{key}.fshw"
        if not path.exists():
            raise _CliConfigError(f"missing head file for group {key!r}: {path}")
        novel_heads[key] = heads.load_head(path)
    detections = hierarchy.hierarchical_inference(
        ds, hier, novel_heads, post, emit_parent=args.emit_parent)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_detections(detections, out)
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "infer",
                    config, None,
                    {"dataset": args.dataset, "hierarchy": args.hierarchy,
                     "heads_dir": args.heads_dir}, {"detections": out}, started)
    return EXIT_OK


def _parse_splits(entries) -> dict:
    splits = {}
    for entry in entries or []:
        if "=" not in entry:
            raise _CliConfigError(f"bad --split {entry!r}, expected name=a,b,c")
        name, members = entry.split("=", 1)
        splits[name] = [m for m in members.split(",") if m]
    return splits


def cmd_eval(args) -> int:
    started = _utc_now()
    ds = dataio.read_dataset(args.dataset)
    detections = dataio.read_detections(args.detections)
    if args.ignore_unknown:
        known = set(ds.category_names)
        detections = [d for d in detections if d.category in known]
    result = evaluation.evaluate(detections, ds, _parse_splits(args.split))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "eval",
                    config, None,
                    {"dataset": args.dataset, "detections": args.detections},
                    {"result": out}, started)
    return EXIT_OK


def cmd_compare(args) -> int:
    started = _utc_now()
    curves = {}
    for entry in args.curve:
        if "=" not in entry:
            raise _CliConfigError(f"bad --curve {entry!r}, expected name=path")
        name, path = entry.split("=", 1)
        curves[name] = optim.read_curve_csv(path)
    if len(curves) < 2:
        raise _CliConfigError("need at least two --curve entries")
    report = evaluation.convergence_report(curves, args.target_loss)
    summary = Path(args.out_summary)
    summary.parent.mkdir(parents=True, exist_ok=True)
    summary.write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                       encoding="utf-8")
    merged = Path(args.out_merged)
    merged.write_text(evaluation.merged_curves_csv(curves), encoding="utf-8")
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(summary.with_suffix(summary.suffix + ".manifest.json"),
                    "compare", config, None,
                    {f"curve_{n}": p for n, p in (e.split("=", 1) for e in args.curve)},
                    {"summary": summary, "merged": merged}, started)
    return EXIT_OK


def cmd_assign(args) -> int:
    started = _utc_now()
    ds = dataio.read_dataset(args.dataset)
    base_names = [b for b in args.base_names.split(",") if b]
    hier = hierarchy.auto_assign(ds, base_names, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_hierarchy(hier, out)
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "assign",
                    config, None, {"dataset": args.dataset},
                    {"hierarchy": out}, started)
    return EXIT_OK


def cmd_analyze(args) -> int:
    started = _utc_now()
    ds = dataio.read_dataset(args.dataset)
    base_names = [b for b in args.base_names.split(",") if b]
    hier = dataio.read_hierarchy(args.hierarchy) if args.hierarchy else None
    table = hierarchy.analyze_base_behaviour(ds, base_names, hier)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_csv(), encoding="utf-8")
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "analyze",
                    config, None, {"dataset": args.dataset},
                    {"table": out}, started)
    return EXIT_OK


def _add_post_flags(p):
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--topk", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierdet",
        description="Few-shot detection heads: synthesis, training, "
                    "hierarchical inference, and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--preset", choices=["acceptance"], default=None)
    p.add_argument("--categories", type=int, default=None)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--image-size", type=float, default=640.0)
    p.add_argument("--proposals-per-object", type=int, default=4)
    p.add_argument("--background-per-image", type=int, default=2)
    p.add_argument("--num-base", type=int, default=0)
    p.add_argument("--child-ratio", type=float, default=0.5)
    p.add_argument("--childless-base", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train predictor heads")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hierarchy", default=None)
    p.add_argument("--optimizer", choices=["newton", "newton-mb", "sgd"],
                   default="newton")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--ncg", type=int, default=2)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="damping; defaults to 0 for newton, 0.5 for newton-mb")
    p.add_argument("--batch-images", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--reg-loss", choices=["l2", "smooth-l1"], default="l2")
    p.add_argument("--smooth-l1-beta", type=float, default=1.0)
    p.add_argument("--cls-weight", type=float, default=1.0)
    p.add_argument("--loc-weight", type=float, default=1.0)
    p.add_argument("--init-std", type=float, default=0.01)
    aug = p.add_mutually_exclusive_group()
    aug.add_argument("--aug", dest="aug", action="store_true", default=None,
                     help="feature augmentation (default on for newton)")
    aug.add_argument("--no-aug", dest="aug", action="store_false")
    p.add_argument("--aug-copies", type=int, default=5)
    p.add_argument("--aug-noise", type=float, default=0.1)
    p.add_argument("--aug-dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="two-stage hierarchical inference")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--heads-dir", required=True)
    p.add_argument("--emit-parent", action="store_true")
    _add_post_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="average-precision evaluation")
    p.add_argument("--detections", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", action="append", default=[],
                   help="name=cat1,cat2 (repeatable)")
    p.add_argument("--ignore-unknown", action="store_true",
                   help="drop detections whose category is absent from the dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="convergence comparison of curve CSVs")
    p.add_argument("--curve", action="append", default=[],
                   help="name=path (repeatable)")
    p.add_argument("--target-loss", type=float, required=True)
    p.add_argument("--out-summary", required=True)
    p.add_argument("--out-merged", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("assign", help="derive a hierarchy from base outputs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--base-names", required=True,
                   help="comma-separated base category names")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("analyze", help="base-model behaviour on labeled records")
    p.add_argument("--dataset", required=True)
    p.add_argument("--base-names", required=True)
    p.add_argument("--hierarchy", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "train" and args.aug is None:
        args.aug = args.optimizer == "newton"
    try:
        return args.func(args)
    except (_CliConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
