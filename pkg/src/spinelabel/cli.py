"""Command-line entry point wiring every pipeline stage.

Subcommands: phantom, prepare, train, localize, infer, evaluate, sweep,
latent, bench. Each accepts --config pointing at a YAML/JSON mapping of flag
defaults; explicitly given flags win. Every run writes a reproducibility
record next to its outputs. Exit codes: 0 success, 1 module error with a
diagnostic on stderr, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, benchmark, inference, metrics, phantom, reformation
from .core import AnnotationSet, Volume
from .errors import SpineLabelError
from .localizer import (LocalizerTrainConfig, extract_bbox, load_localizer,
                        localized_bbox_json, predict_heatmap,
                        preprocess_for_localizer, train_localizer)
from .networks import ButterflyConfig, file_sha256, load_checkpoint
from .training import TrainConfig, train
from .volume_io import load_volume, save_volume


def _parse_grid(text: str) -> list[float]:
    """\"start:stop:step\" inclusive of stop (within float tolerance)."""
    try:
        start, stop, step = (float(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step, got {text!r}")
    if step <= 0:
        raise argparse.ArgumentTypeError("grid step must be positive")
    values = []
    v = start
    while v <= stop + 1e-9:
        values.append(round(v, 10))
        v += step
    return values


def _write_record(out_dir: Path, command: str, args: argparse.Namespace,
                  extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items()
                 if k not in ("func",) and not callable(v)},
    }
    if extra:
        payload.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_record.json").write_text(json.dumps(payload, indent=2, default=str))


def _scan_entries(manifest_path: Path, split: str) -> list[dict]:
    manifest = json.loads(manifest_path.read_text())
    scans = manifest.get("scans", [])
    if split != "all":
        wanted = set(manifest.get("splits", {}).get(split, []))
        scans = [s for s in scans if s["id"] in wanted]
    out = []
    for s in scans:
        entry = dict(s)
        for key in ("volume", "annotations"):
            p = Path(entry[key])
            entry[key] = str(p if p.is_absolute() else manifest_path.parent / p)
        out.append(entry)
    return out


# --------------------------------------------------------------------------
# subcommand handlers


def cmd_phantom(args) -> int:
    manifest = phantom.generate_dataset(
        args.out, args.n, fov_policy=args.policy, seed=args.seed,
        include_ribs=args.ribs, resolution_mm=args.resolution,
        spacing_mm=args.spacing, curvature=args.curvature, noise_sd=args.noise_sd)
    _write_record(Path(args.out), "phantom", args, {"manifest": str(manifest)})
    print(manifest)
    return 0


def cmd_prepare(args) -> int:
    out = args.out or os.environ.get("BTRFLY_CACHE_DIR", "prepared")
    manifest = reformation.prepare_dataset(
        args.manifest, out, resolution_mm=args.resolution, sigma_mm=args.sigma_mm,
        n_projections=args.projections, seed=args.seed, jobs=args.jobs)
    _write_record(Path(out), "prepare", args, {"manifest": str(manifest)})
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(
        mode=args.mode, total_iters=args.iters, lr0=args.lr0,
        batch_size=args.batch_size, seed=args.seed,
        augment=not args.no_augment, margin_initial=args.margin,
        gp_lambda=args.gp_lambda, val_every=args.val_every,
        checkpoint_every=args.checkpoint_every)
    model_cfg = ButterflyConfig(
        base_filters=args.base_filters, bottleneck_channels=args.bottleneck,
        arms_fused=not args.no_fuse, dual_input=args.dual_input)
    summary = train(args.data, args.out, cfg, model_cfg)
    print(summary["model"])
    return 0


def cmd_localize(args) -> int:
    if args.fit:
        if not args.manifest:
            raise SpineLabelError("--fit requires --manifest")
        cfg = LocalizerTrainConfig(total_iters=args.iters, seed=args.seed,
                                   base_channels=args.base_channels)
        summary = train_localizer(args.manifest, args.out, cfg)
        print(summary["checkpoint"])
        return 0
    if not (args.volume and args.model):
        raise SpineLabelError("localization needs --volume and --model (or --fit)")
    model, cfg = load_localizer(args.model)
    volume = preprocess_for_localizer(load_volume(args.volume), cfg.resolution_mm)
    heat = predict_heatmap(model, volume)
    box = extract_bbox(heat, args.pad_vox)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat_path = out_dir / "localizer_heatmap.nii.gz"
    save_volume(Volume(heat.astype(np.float32), volume.spacing, volume.origin), heat_path)
    result = localized_bbox_json(box, heat_path)
    (out_dir / "box.json").write_text(result)
    _write_record(out_dir, "localize", args, {"model_sha256": file_sha256(args.model)})
    print(result)
    return 0


def _load_labeler(path: str):
    model, cfg = load_checkpoint(path)
    return model, cfg


def _predict_one(model, raw_volume, args):
    if getattr(args, "localize", False):
        if not args.localizer_model:
            raise SpineLabelError("--localize requires --localizer-model")
        loc_model, loc_cfg = load_localizer(args.localizer_model)
        vol4 = preprocess_for_localizer(raw_volume, loc_cfg.resolution_mm)
        heat = predict_heatmap(loc_model, vol4)
        box4 = extract_bbox(heat, args.pad_vox)
        vol, box, weights = inference.localized_inputs(
            raw_volume, vol4, heat, box4, args.resolution)
        return inference.predict_scan(model, vol, threshold=args.threshold,
                                      box=box, weights_map=weights, preprocessed=True)
    return inference.predict_scan(model, raw_volume, threshold=args.threshold,
                                  resolution_mm=args.resolution)


def cmd_infer(args) -> int:
    model, _ = _load_labeler(args.model)
    result = _predict_one(model, load_volume(args.volume), args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.save(out)
    _write_record(out.parent, "infer", args, {"model_sha256": file_sha256(args.model)})
    print(out)
    return 0


def _predict_split(model, args) -> tuple[dict, dict, dict]:
    preds, truths, results = {}, {}, {}
    for entry in _scan_entries(Path(args.manifest), args.split):
        raw = load_volume(entry["volume"])
        result = _predict_one(model, raw, args)
        results[entry["id"]] = result
        preds[entry["id"]] = result.annotations
        truths[entry["id"]] = AnnotationSet.load(entry["annotations"])
    if not truths:
        raise SpineLabelError(f"split {args.split!r} selects no scans")
    return preds, truths, results


def cmd_evaluate(args) -> int:
    model, _ = _load_labeler(args.model)
    preds, truths, results = _predict_split(model, args)
    report = metrics.evaluate_predictions(preds, truths, d_th_mm=args.d_th)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.text_table() + "\n")
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for sid, result in results.items():
        result.save(pred_dir / f"{sid}.json")
    _write_record(out_dir, "evaluate", args, {"model_sha256": file_sha256(args.model)})
    print(report.text_table())
    return 0


def cmd_sweep(args) -> int:
    model, _ = _load_labeler(args.model)
    args.threshold = 0.0  # sweeps re-threshold the raw stacks themselves
    preds, truths, results = _predict_split(model, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = metrics.sweep_threshold(results, truths, t_values=args.t_grid, d_th_mm=args.d_th)
    metrics.write_sweep_csv(rows, out_dir / "pr_curve.csv")
    metrics.plot_pr_curve(rows, out_dir / "pr_curve.png")
    best = metrics.f1_optimal_row(rows)
    (out_dir / "f1_optimal.json").write_text(json.dumps(best, indent=2))
    curves = metrics.sweep_dth(preds, truths, dth_values=args.dth_grid)
    metrics.write_dth_csv(curves, out_dir / "dth_curves.csv")
    metrics.plot_dth_curves(curves, out_dir / "dth_curves.png")
    _write_record(out_dir, "sweep", args, {"model_sha256": file_sha256(args.model)})
    print(json.dumps(best))
    return 0


def cmd_latent(args) -> int:
    model, _ = _load_labeler(args.model)
    scans = [(e["id"], load_volume(e["volume"]))
             for e in _scan_entries(Path(args.manifest), args.split)]
    if not scans:
        raise SpineLabelError(f"split {args.split!r} selects no scans")
    rows = metrics.export_latent_codes(model, scans, resolution_mm=args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_latent_csv(rows, out)
    _write_record(out.parent, "latent", args, {"model_sha256": file_sha256(args.model)})
    print(out)
    return 0


def cmd_bench(args) -> int:
    rows = benchmark.run_benchmark(size=args.size, repeats=args.repeats)
    print(benchmark.format_table(rows))
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="spinelabel",
                                     description="vertebrae labelling toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, handler, **kwargs):
        p = subs.add_parser(name, **kwargs)
        p.add_argument("--config", help="YAML/JSON file of flag defaults; flags win")
        p.set_defaults(func=handler)
        registry[name] = p
        return p

    p = sub("phantom", cmd_phantom, help="generate a synthetic phantom dataset")
    p.add_argument("--out", default="phantom_data")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--policy", default="mixed", choices=phantom.FOV_POLICIES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ribs", action="store_true")
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--spacing", type=float, default=24.0)
    p.add_argument("--curvature", type=float, default=6.0)
    p.add_argument("--noise-sd", type=float, default=5.0)

    p = sub("prepare", cmd_prepare, help="build projection/target training pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None,
                   help="output dir (default: $BTRFLY_CACHE_DIR or ./prepared)")
    p.add_argument("--projections", type=int, default=10)
    p.add_argument("--sigma-mm", type=float, default=4.0)
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub("train", cmd_train, help="train the labelling network")
    p.add_argument("--data", required=True, help="prepared-corpus manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="plain", choices=["plain", "pe_eb", "pe_w"])
    p.add_argument("--iters", type=int, default=80000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr0", type=float, default=1e-3)
    p.add_argument("--base-filters", type=int, default=32)
    p.add_argument("--bottleneck", type=int, default=1024)
    p.add_argument("--no-fuse", action="store_true", help="Cor.+Sag. baseline")
    p.add_argument("--dual-input", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--margin", type=float, default=10.0)
    p.add_argument("--gp-lambda", type=float, default=10.0)
    p.add_argument("--val-every", type=int, default=1000)
    p.add_argument("--checkpoint-every", type=int, default=2000)

    p = sub("localize", cmd_localize, help="spine pre-localization (fit or run)")
    p.add_argument("--fit", action="store_true", help="train the localizer")
    p.add_argument("--manifest", help="dataset manifest (with --fit)")
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--volume", help="scan to localize")
    p.add_argument("--model", help="localizer checkpoint")
    p.add_argument("--out", default="localize_out")
    p.add_argument("--pad-vox", type=int, default=5)

    p = sub("infer", cmd_infer, help="predict vertebra centroids for one scan")
    p.add_argument("--volume", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out", default="predictions.json")
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--localize", action="store_true",
                   help="route through the spine localizer for localized MIPs")
    p.add_argument("--localizer-model")
    p.add_argument("--pad-vox", type=int, default=5)

    p = sub("evaluate", cmd_evaluate, help="run inference over a split and report metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--d-th", type=float, default=20.0)
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--out", default="evaluation")
    p.add_argument("--localize", action="store_true")
    p.add_argument("--localizer-model")
    p.add_argument("--pad-vox", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)

    p = sub("sweep", cmd_sweep, help="threshold and d_th sweep curves + plots")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--t-grid", type=_parse_grid, default=list(metrics.DEFAULT_T_GRID))
    p.add_argument("--dth-grid", type=_parse_grid, default=list(metrics.DEFAULT_DTH_GRID))
    p.add_argument("--d-th", type=float, default=20.0)
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--out", default="sweep")
    p.add_argument("--localize", action="store_true")
    p.add_argument("--localizer-model")
    p.add_argument("--pad-vox", type=int, default=5)

    p = sub("latent", cmd_latent, help="export bottleneck latent codes to CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--resolution", type=float, default=2.0)
    p.add_argument("--out", default="latent_codes.csv")

    p = sub("bench", cmd_bench, help="compare numba and numpy kernel backends")
    p.add_argument("--size", default="small", choices=sorted(benchmark.SIZES))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json", help="also write rows as JSON")

    return parser, registry


def _apply_config_defaults(argv: list[str], parser, registry) -> argparse.Namespace:
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    text = Path(config_path).read_text()
    if config_path.endswith((".yaml", ".yml")):
        import yaml

        values = yaml.safe_load(text) or {}
    else:
        values = json.loads(text)
    if not isinstance(values, dict):
        raise SpineLabelError(f"{config_path}: config must be a mapping")
    registry[args.command].set_defaults(
        **{str(k).replace("-", "_"): v for k, v in values.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        args = _apply_config_defaults(argv, parser, registry)
    except SystemExit as exc:  # argparse usage errors exit 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SpineLabelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
