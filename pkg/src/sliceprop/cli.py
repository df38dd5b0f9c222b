"""Command line entry points.

Subcommands cover the full workflow: generate synthetic data, train, run
automatic or simulated-interactive inference, evaluate label directories,
reproduce the component ablation table, and serve the HTTP API.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import (
    InputError,
    LabelVolume,
    MaskScoreVolume,
    argmax_labeling,
    load_labels,
    load_volume,
    save_labels,
)
from .metrics import evaluate_labels
from .model import CheckpointError, ModelConfig, load_checkpoint
from .propagate import SweepOptions, propagate_volume_auto, refinement_loop
from .synth import SynthConfig, preprocess, write_dataset


def _require_checkpoint(path: str | None):
    if not path or path == "none":
        raise InputError("checkpoint required (--ckpt)")
    return load_checkpoint(Path(path))


def _load_pair(volume_path: Path, labels_path: Path | None, n_classes: int):
    volume = preprocess(load_volume(volume_path))
    gt = load_labels(labels_path, n_classes) if labels_path else None
    return volume, gt


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        n_volumes=args.n_volumes,
        shape=tuple(args.shape),
        n_classes=args.n_classes,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    manifest = write_dataset(cfg, Path(args.out))
    print(f"wrote {len(manifest['volumes'])} volumes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train_loop import TrainConfig, load_dataset, train

    dataset = load_dataset(Path(args.data))
    train_cfg = TrainConfig(iterations=args.iterations, seed=args.seed)
    model_cfg = ModelConfig(n_classes=dataset.n_classes, seed=args.seed)

    def log(entry):
        if "val_dsc" in entry or entry["iter"] % 100 == 0:
            print(json.dumps(entry), flush=True)

    _, log_entries = train(train_cfg, model_cfg, dataset, out_dir=Path(args.out), log_fn=log)
    final = [e for e in log_entries if "val_dsc" in e]
    if final:
        print(f"final val dsc {final[-1]['val_dsc']:.4f}")
    return 0


def cmd_infer_auto(args) -> int:
    model, _ = _require_checkpoint(args.ckpt)
    volume, gt = _load_pair(Path(args.volume), Path(args.labels) if args.labels else None,
                            model.cfg.n_classes)
    scores = propagate_volume_auto(model, volume)
    pred = argmax_labeling(scores, 0.5)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_labels(out / "prediction.raw", pred)
    report = {"schema_version": 1}
    if gt is not None:
        report["metrics"] = evaluate_labels(pred.labels, gt.labels, model.cfg.n_classes).to_json()
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(f"wrote {out / 'prediction.raw'}")
    if gt is not None:
        print(f"mean dsc {report['metrics']['mean']['dsc']:.4f}")
    return 0


def cmd_infer_interactive(args) -> int:
    model, _ = _require_checkpoint(args.ckpt)
    volume, gt = _load_pair(Path(args.volume), Path(args.labels), model.cfg.n_classes)
    results = refinement_loop(model, volume, gt, n_rounds=args.rounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    final_pred = None
    for r, fused, click in results:
        pred = argmax_labeling(fused, 0.5)
        final_pred = pred
        report = evaluate_labels(pred.labels, gt.labels, model.cfg.n_classes)
        rows.append({"round": r, "click": click.to_json(), "mean_dsc": report.mean("dsc")})
        print(json.dumps(rows[-1]))
    if final_pred is not None:
        save_labels(out / "prediction.raw", final_pred)
    with (out / "rounds.jsonl").open("w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.raw"))
    if not names:
        raise InputError(f"no .raw label files in {gt_dir}")
    dscs = []
    per_volume = {}
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise InputError(f"missing prediction for {name}")
        gt = load_labels(gt_dir / name, args.n_classes)
        pred = load_labels(pred_path, args.n_classes)
        report = evaluate_labels(pred.labels, gt.labels, args.n_classes)
        per_volume[name] = report.to_json()
        dscs.append(report.mean("dsc"))
    mean_dsc = float(np.mean(dscs))
    print(json.dumps({"mean_dsc": mean_dsc, "n_volumes": len(names)}))
    if args.out:
        Path(args.out).write_text(
            json.dumps({"mean_dsc": mean_dsc, "per_volume": per_volume}, indent=2)
        )
    return 0


def cmd_ablate(args) -> int:
    """Paired component ablation on validation volumes of a synthetic dataset.

    Rows add one component at a time: slice propagation, then the centroid
    memory, then adaptive click accumulation across refinement rounds.
    """
    from .train_loop import load_dataset

    model, _ = _require_checkpoint(args.ckpt)
    dataset = load_dataset(Path(args.data))
    vol_ids = dataset.val_ids[: args.n_volumes]
    grid = [
        ("no propagation", SweepOptions(propagate=False, use_memory=False), 0.0),
        ("+ propagation", SweepOptions(propagate=True, use_memory=False), 0.0),
        ("+ memory", SweepOptions(propagate=True, use_memory=True), 0.0),
        ("+ adaptive clicks", SweepOptions(propagate=True, use_memory=True), 0.8),
    ]
    rows = []
    for name, options, beta in grid:
        dscs, hds = [], []
        for i in vol_ids:
            results = refinement_loop(
                model, dataset.volumes[i], dataset.labels[i],
                n_rounds=args.rounds, options=options, beta=beta,
            )
            if not results:
                continue
            pred = argmax_labeling(results[-1][1], 0.5)
            report = evaluate_labels(
                pred.labels, dataset.labels[i].labels, dataset.n_classes
            )
            dscs.append(report.mean("dsc"))
            hd = report.mean("hd95")
            if np.isfinite(hd):
                hds.append(hd)
        rows.append({
            "config": name,
            "dsc": float(np.mean(dscs)) if dscs else float("nan"),
            "hd95": float(np.mean(hds)) if hds else float("nan"),
        })
        print(f"{name:>20}  dsc {rows[-1]['dsc']:.4f}  hd95 {rows[-1]['hd95']:.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model, _ = _require_checkpoint(args.ckpt)
    host = os.environ.get("SLICEPROP_HOST", "127.0.0.1")
    port = int(os.environ.get("SLICEPROP_PORT", "8000"))
    uvicorn.run(create_app(model), host=host, port=port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sliceprop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-volumes", type=int, default=50)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 64, 64])
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=SynthConfig.noise_sigma)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer-auto", help="automatic volume segmentation")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer_auto)

    p = sub.add_parser("infer-interactive", help="simulated click refinement")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--rounds", type=int, default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer_interactive)

    p = sub.add_parser("eval", help="compare prediction and ground-truth label dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="component ablation grid")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--n-volumes", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--ckpt", default=None)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InputError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
