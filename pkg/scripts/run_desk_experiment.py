#!/usr/bin/env python3
"""Run the desk-scale experiment end to end through the public CLI.

Synthesizes the dataset, trains all three stages, renders a held-out frame,
and writes eval + bench reports under --root. The full run takes tens of
minutes on one CPU core; --quick shrinks everything to a smoke test that
finishes in seconds (and proves nothing beyond plumbing).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from radfield.cli import main as radfield

DESK_GEN = {"num_frames": 500, "size": 64, "focal": 100.0}
QUICK_GEN = {"num_frames": 20, "size": 16, "focal": 25.0}
QUICK_TRAIN = {
    "head_steps": 12, "lips_steps": 4, "torso_steps": 6,
    "rays_per_step": 96, "lips_patch": 10,
    "levels": 4, "base_resolution": 4, "max_resolution": 32,
    "occupancy_resolution": 16, "candidates": 16, "max_samples": 8,
}


def run(argv: list[str]) -> None:
    print("$ radfield " + " ".join(argv), flush=True)
    t0 = time.time()
    rc = radfield(argv)
    print(f"  [{time.time() - t0:.1f}s]", flush=True)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/desk", help="working directory")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--quick", action="store_true",
                    help="tiny dataset and schedules, plumbing check only")
    ap.add_argument("--skip-data", action="store_true",
                    help="reuse an already-generated dataset under --root")
    args = ap.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    data_dir = root / "data"
    run_dir = root / "run"
    manifest = str(data_dir / "manifest.json")
    ckpt = str(run_dir / "checkpoint.radf")

    if not (args.skip_data and Path(manifest).exists()):
        gen = dict(QUICK_GEN if args.quick else DESK_GEN, seed=args.seed)
        (root / "gen.json").write_text(json.dumps(gen, indent=2))
        run(["synth-data", "--out", str(data_dir),
             "--config", str(root / "gen.json")])

    head = ["train-head", "--dataset", manifest, "--out", str(run_dir),
            "--seed", str(args.seed)]
    if args.quick:
        (root / "train.json").write_text(json.dumps(QUICK_TRAIN, indent=2))
        head += ["--config", str(root / "train.json")]
    else:
        head += ["--desk"]
    run(head)
    run(["finetune-lips", "--dataset", manifest, "--checkpoint", ckpt,
         "--out", str(run_dir)])
    run(["train-torso", "--dataset", manifest, "--checkpoint", ckpt,
         "--out", str(run_dir)])

    run(["render", "--checkpoint", ckpt, "--dataset", manifest,
         "--out", str(root / "holdout.png")])
    run(["eval", "--checkpoint", ckpt, "--dataset", manifest,
         "--out", str(root / "eval.json")])
    run(["bench", "--checkpoint", ckpt, "--dataset", manifest,
         "--timed", "5" if args.quick else "50",
         "--out", str(root / "bench.json")])
    print(f"done; reports under {root}")


if __name__ == "__main__":
    main()
