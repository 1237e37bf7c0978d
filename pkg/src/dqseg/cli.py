"""Command line: ``dqseg synth|train|eval|infer``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .cloud import read_cloud, write_prediction
from .config import PRESETS, RunConfig, parse_assignments
from .errors import FormatError, NumericError
from .metrics import evaluate_dataset, prediction_path, write_report
from .synth import load_manifest, synthesize_dataset

log = logging.getLogger("dqseg")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def cmd_synth(cfg: RunConfig, count: int, out_dir) -> Path:
    """Write ``count`` scenes and their manifest; returns the manifest path.

    ``out_dir`` is created if needed, but its parent must exist.
    """
    Path(out_dir).mkdir(exist_ok=True)
    synthesize_dataset(cfg.recipe(), cfg.taxonomy, count, out_dir)
    return Path(out_dir) / "manifest.json"


def cmd_train(cfg: RunConfig, manifest, out_dir, resume=None):
    from .training import train

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return train(manifest, cfg, out_dir, resume=resume)


def cmd_eval(checkpoint, manifest, out, pred_dir=None, plots_dir=None, **predict_kw):
    """Predict every manifest scene, then score the written predictions."""
    from .training import load_model

    model, _, _ = load_model(checkpoint)
    tax = model.config.taxonomy
    root, entries = load_manifest(manifest)
    out = Path(out)
    pred_dir = Path(pred_dir) if pred_dir else out.parent / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        cloud = read_cloud(root / entry["path"])
        tax.check_cloud(cloud)
        labels, fwd = model.predict(cloud, **predict_kw)
        write_prediction(cloud, labels.semantic, labels.instance, prediction_path(pred_dir, entry["path"]))
        if plots_dir is not None:
            from .plots import save_heatmaps

            save_heatmaps(fwd.maps, Path(entry["path"]).stem, plots_dir)
    total, per_scene = evaluate_dataset(pred_dir, manifest, tax)
    write_report(out, total, per_scene, {"checkpoint": str(checkpoint)})
    return total


def cmd_infer(checkpoint, cloud_path, out_path):
    from .training import load_model

    model, _, _ = load_model(checkpoint)
    cloud = read_cloud(cloud_path)
    model.config.taxonomy.check_cloud(cloud)
    labels, _ = model.predict(cloud)
    labels.validate(model.n_things)
    write_prediction(cloud, labels.semantic, labels.instance, out_path)
    return labels


def _config(args) -> RunConfig:
    cfg = PRESETS[args.preset]()
    if args.config:
        cfg = RunConfig.load(args.config, base=cfg)
    if args.set:
        cfg = cfg.replace(**parse_assignments(args.set))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="key = value file (or JSON object)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="default")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate synthetic labelled scenes")
    config_args(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a manifest")
    config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")

    p = sub.add_parser("eval", help="predict and score a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pred-dir")
    p.add_argument("--plots", metavar="DIR", help="write BEV heatmap images here")

    p = sub.add_parser("infer", help="label one DQPC cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("DQF_THREADS")
    try:
        if threads:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        if args.command == "synth":
            print(cmd_synth(_config(args), args.count, args.out))
        elif args.command == "train":
            last, records = cmd_train(_config(args), args.manifest, args.out, args.resume)
            print(json.dumps(records[-1]) if records else last)
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.manifest, args.out, args.pred_dir, args.plots)
            print(json.dumps(report.summary()))
        else:
            labels = cmd_infer(args.checkpoint, args.cloud, args.out)
            print(f"{args.out}: {len(labels.semantic)} points, {int(labels.instance.max(initial=0))} instances")
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
