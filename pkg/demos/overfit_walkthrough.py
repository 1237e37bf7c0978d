"""Toy overfit run end to end: synth, train, evaluate, plot heatmaps.

Uses the ``toy`` preset at reduced size so it finishes in about a minute.
Pass ``--full`` for the 16-scene, 200-epoch run (close to 20 minutes on
one core).

    python3 demos/overfit_walkthrough.py [--full] [--out DIR]
"""
import argparse
import json
import time
from pathlib import Path

from dqseg.cli import cmd_eval, cmd_synth, cmd_train
from dqseg.config import toy_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--out", default="demo_run")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = toy_config() if args.full else toy_config(epochs=60, eval_every=30)
    count = 16 if args.full else 4
    manifest = cmd_synth(cfg, count, out / "data")
    print(f"{count} scenes -> {manifest}")

    t0 = time.perf_counter()
    last, records = cmd_train(cfg, manifest, out / "run")
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.0f}s, final loss {records[-1]['L']:.4f}")

    report = cmd_eval(last, manifest, out / "report.json", plots_dir=out / "plots")
    summary = json.loads((out / "report.json").read_text())
    print(f"PQ {report.pq:.3f}  PQ_Th {report.pq_th:.3f}  PQ_St {report.pq_st:.3f}")
    for name, row in summary["classes"].items():
        print(f"  {name:<11} PQ {row['PQ']:5.1f}  TP {row['TP']:3d}  FP {row['FP']:3d}  FN {row['FN']:3d}")
    print(f"heatmaps in {out / 'plots'}")


if __name__ == "__main__":
    main()
