#!/usr/bin/env python3
"""Serial training queue for the full experiment grid.

Runs every configuration the evaluation suite expects, one after another
(the box has a single core; parallelism would just thrash), writing each
run under ``--out/<name>/``: metrics.csv, last/best checkpoints,
report_test.json, train.log, wall.txt and a done.txt sentinel.  Completed
runs are skipped on re-invocation, so the queue can be restarted after an
interruption without redoing finished work.  When all four decoder/loss
variants of the three-ball scene have finished, their test scores are
collected into ``--out/ablation.json``.

Usage:
    python3 scripts/run_queue.py [--data-root DIR] [--out DIR] [--only A,B]
"""
from __future__ import annotations

import argparse
import datetime
import json
import subprocess
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

from pixphys import datagen, training

# (run name, dataset directory name, config overrides)
RUNS: list[tuple[str, str, dict]] = [
    ("spring2-joint", "spring2", {}),
    ("gravity3-joint", "gravity3-g", {}),
    ("pendulum-joint", "pendulum", {}),
    ("gravity3-pred-only", "gravity3-g", {"variant": "pred-only"}),
    ("gravity3-separate-gradients", "gravity3-g", {"variant": "separate-gradients"}),
    ("gravity3-blackbox-decoder", "gravity3-g", {"variant": "blackbox-decoder"}),
    ("gravity3-n4", "gravity3-g", {"n_slots": 4}),
    ("gravity3-n2", "gravity3-g", {"n_slots": 2}),
]

ABLATION_RUNS = {
    "joint": "gravity3-joint",
    "pred-only": "gravity3-pred-only",
    "separate-gradients": "gravity3-separate-gradients",
    "blackbox-decoder": "gravity3-blackbox-decoder",
}


def code_stamp(repo: Path) -> str:
    try:
        head = subprocess.run(
            ["git", "-C", str(repo), "describe", "--always", "--dirty"],
            capture_output=True, text=True, check=True,
        ).stdout.strip()
    except Exception:
        head = "unknown"
    return head


def run_one(name: str, data_dir: Path, overrides: dict, out: Path,
            smoke: bool = False) -> None:
    run_dir = out / name
    if (run_dir / "done.txt").exists():
        print(f"[queue] {name}: already done, skipping", flush=True)
        return
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = datagen.load_dataset(data_dir)
    scene_name = data_dir.name
    cfg = training.train_config_for(
        scene_name,
        variant=overrides.get("variant", "joint"),
        n_slots=overrides.get("n_slots"),
    )
    extra = {k: v for k, v in overrides.items() if k not in ("variant", "n_slots")}
    if extra:
        cfg = replace(cfg, **extra)
    if smoke:
        cfg = replace(cfg, epochs=2, lr_drop_epoch=1, checkpoint_every=1)
    (run_dir / "config.json").write_text(
        json.dumps({**cfg.__dict__, "code": code_stamp(Path(__file__).parents[1])},
                   indent=1, sort_keys=True, default=str)
    )
    t0 = time.time()
    with open(run_dir / "train.log", "a") as fh:
        def log(msg: str) -> None:
            stamp = datetime.datetime.now().strftime("%H:%M:%S")
            fh.write(f"{stamp} {msg}\n")
            fh.flush()
            print(f"[{name}] {msg}", flush=True)

        log(f"start ({cfg.epochs} epochs, batch {cfg.batch_size})")
        model, _ = training.train(ds, cfg, run_dir, log=log)
        report = training.evaluate(model, ds, "test", out_dir=run_dir)
        wall = time.time() - t0
        log(f"finished in {wall/3600:.2f}h  l_pred={report['l_pred']:.5f}")
    (run_dir / "wall.txt").write_text(f"{wall:.1f}\n")
    (run_dir / "done.txt").write_text(
        datetime.datetime.now().isoformat(timespec="seconds") + "\n"
    )


def collect_ablation(out: Path) -> None:
    rows = []
    for variant in training.VARIANTS:
        report = out / ABLATION_RUNS[variant] / "report_test.json"
        if not report.exists():
            print(f"[queue] ablation: missing {report}, not writing ablation.json",
                  flush=True)
            return
    for variant in training.VARIANTS:
        r = json.loads((out / ABLATION_RUNS[variant] / "report_test.json").read_text())
        rows.append({"variant": variant, "l_pred": r["l_pred"], "l_rec": r["l_rec"]})
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    print("[queue] wrote ablation.json", flush=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-root", default="/root/data")
    ap.add_argument("--out", default="/root/runs")
    ap.add_argument("--only", default="",
                    help="comma-separated run names; default all")
    ap.add_argument("--smoke", action="store_true",
                    help="2-epoch plumbing check; point --out somewhere disposable")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    only = {s for s in args.only.split(",") if s}

    failures = []
    for name, ds_name, overrides in RUNS:
        if only and name not in only:
            continue
        try:
            run_one(name, Path(args.data_root) / ds_name, overrides, out,
                    smoke=args.smoke)
        except Exception:
            (out / name / "error.txt").write_text(traceback.format_exc())
            print(f"[queue] {name}: FAILED\n{traceback.format_exc()}", flush=True)
            failures.append(name)
    collect_ablation(out)
    print(f"[queue] complete; failures: {failures or 'none'}", flush=True)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
