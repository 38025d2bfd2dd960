"""Command line interface.

Eight subcommands cover the whole workflow: dataset synthesis, the three
training stages, single-frame rendering, held-out evaluation, a render
throughput benchmark, and finite-difference gradient verification.

Configuration resolves in order: dataclass defaults, then a JSON --config
file, then the --desk preset, then explicit flags. The resolved config is
echoed as one JSON line before any work starts.

Training commands hold a lock file inside --out for the duration of the
run and refuse to start while one exists.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import Dataset, _load_rgb, load_dataset, save_rgb
from .evaluate import evaluate, make_renderer, render_frame
from .gradcheck import standard_op_checks
from .metrics import bench_render
from .synth import SyntheticSpec, generate_synthetic
from .trainer import (Bundle, LossReport, TrainConfig, finetune_lips,
                      train_head, train_torso)

LOCK_NAME = "lock"


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return doc


def _from_dict(cls, overrides: dict, source: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ValueError(f"{source}: unknown config keys: {', '.join(unknown)}")
    return cls(**overrides)


def _echo_config(cfg) -> None:
    print("resolved config:", json.dumps(asdict(cfg), sort_keys=True))


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = _from_dict(TrainConfig, _read_config(args.config),
                     args.config or "config")
    if getattr(args, "desk", False):
        cfg = cfg.desk()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "audio_dim", None) is not None:
        over["audio_dim"] = args.audio_dim
    if getattr(args, "max_samples", None) is not None:
        over["max_samples"] = args.max_samples
    if getattr(args, "beta", None) is not None:
        over["beta"] = args.beta
    if getattr(args, "no_prune", False):
        over["prune"] = False
    if over:
        cfg = replace(cfg, **over)

    if cfg.audio_dim not in (1, 2, 3):
        raise ValueError(f"audio_dim must be 1, 2, or 3, got {cfg.audio_dim}")
    if not 1 <= cfg.max_samples <= cfg.candidates:
        raise ValueError(f"max_samples must be in [1, candidates="
                         f"{cfg.candidates}], got {cfg.max_samples}")
    if cfg.warmup_samples < 1:
        raise ValueError(f"warmup_samples must be >= 1, "
                         f"got {cfg.warmup_samples}")
    if not 0.0 <= cfg.beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {cfg.beta}")
    if min(cfg.head_steps, cfg.lips_steps, cfg.torso_steps) < 1:
        raise ValueError("every stage needs at least one step")
    return cfg


class TrainingLock:
    """Exclusive marker file so two trainers cannot share an output dir."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME

    def __enter__(self) -> "TrainingLock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValueError(
                f"{self.path}: lock file exists; another run may own this "
                "output directory (delete the file if that run is gone)")
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eye_override(args: argparse.Namespace) -> float | None:
    e = getattr(args, "eye_ratio", None)
    if e is not None and not 0.0 <= e <= 0.01:
        raise ValueError(f"eye-ratio must be in [0, 0.01], got {e}")
    return e


def _cmd_synth_data(args: argparse.Namespace) -> int:
    spec = _from_dict(SyntheticSpec, _read_config(args.config),
                      args.config or "config")
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if spec.num_frames < 1 or spec.size < 8 or spec.focal <= 0:
        raise ValueError(f"bad generator spec: {spec}")
    _echo_config(spec)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def _cmd_train_head(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    dataset = load_dataset(args.dataset)
    _echo_config(cfg)
    out = _out_dir(args)
    with TrainingLock(out):
        bundle = Bundle(cfg, num_frames=len(dataset),
                        logit_dim=dataset.logits.values.shape[1])
        report = LossReport(str(out / "head_report.jsonl"))
        try:
            train_head(bundle, dataset, report, str(out))
        finally:
            report.close()
    print(f"wrote {out / 'checkpoint.radf'}")
    return 0


def _cmd_stage(args: argparse.Namespace, stage_fn, report_name: str) -> int:
    dataset = load_dataset(args.dataset)
    bundle = Bundle.load(args.checkpoint)
    _echo_config(bundle.config)
    out = _out_dir(args)
    with TrainingLock(out):
        report = LossReport(str(out / report_name))
        try:
            stage_fn(bundle, dataset, report, str(out))
        finally:
            report.close()
    print(f"wrote {out / 'checkpoint.radf'}")
    return 0


def _cmd_finetune_lips(args: argparse.Namespace) -> int:
    return _cmd_stage(args, finetune_lips, "lips_report.jsonl")


def _cmd_train_torso(args: argparse.Namespace) -> int:
    return _cmd_stage(args, train_torso, "torso_report.jsonl")


def _render_dataset(args: argparse.Namespace) -> Dataset:
    dataset = load_dataset(args.dataset)
    bg = getattr(args, "background", None)
    if bg is not None:
        img = _load_rgb(bg)
        if img.shape != dataset.background.shape:
            raise ValueError(f"{bg}: background shape {img.shape} does not "
                             f"match dataset {dataset.background.shape}")
        dataset = Dataset(dataset.camera, dataset.frames, dataset.logits,
                          img, dataset.root)
    return dataset


def _cmd_render(args: argparse.Namespace) -> int:
    dataset = _render_dataset(args)
    bundle = Bundle.load(args.checkpoint)
    if args.frame is None:
        test = dataset.test_indices
        frame = int(test[0]) if test.size else 0
    else:
        frame = args.frame
    if not 0 <= frame < len(dataset):
        raise ValueError(f"frame {frame} outside dataset of {len(dataset)}")
    img = render_frame(bundle, dataset, frame, beta=args.beta,
                       eye=_eye_override(args),
                       pruned=not args.no_prune,
                       max_samples=args.max_samples)
    save_rgb(args.out, img)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    bundle = Bundle.load(args.checkpoint)
    report = evaluate(bundle, dataset, beta=args.beta,
                      max_frames=args.max_frames,
                      pruning_check=False if args.no_prune else None)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    bundle = Bundle.load(args.checkpoint)
    render = make_renderer(bundle, dataset, pruned=not args.no_prune,
                           max_samples=args.max_samples)
    stats = bench_render(render, warmup=args.warmup, timed=args.timed)
    text = json.dumps(stats, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    results = standard_op_checks(rng, cases=args.cases)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<16} cases={r.cases:<4d} "
              f"max_rel={r.max_rel_error:.3e}  {status}")
        ok = ok and r.passed
    print("all gradients verified" if ok else "gradient check FAILED")
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="radfield",
        description="audio-driven volumetric talking-head toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sp = sub.add_parser("synth-data",
                        help="generate a synthetic articulated-head dataset")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.add_argument("--config", help="JSON file of generator fields")
    sp.add_argument("--seed", type=int, help="generator seed override")
    sp.set_defaults(fn=_cmd_synth_data)

    sp = sub.add_parser("train-head", help="stage 1: audio-conditioned head")
    sp.add_argument("--dataset", required=True, help="path to manifest.json")
    sp.add_argument("--out", required=True, help="checkpoint/report directory")
    sp.add_argument("--config", help="JSON file of training fields")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--desk", action="store_true",
                    help="shortened schedule sized for one desktop core")
    sp.add_argument("--audio-dim", type=int, choices=(1, 2, 3),
                    dest="audio_dim",
                    help="dimension of the audio coordinate space")
    sp.add_argument("--max-samples", type=int, dest="max_samples",
                    help="kept samples per ray")
    sp.add_argument("--beta", type=float,
                    help="inference-time audio smoothing momentum")
    sp.add_argument("--no-prune", action="store_true", dest="no_prune",
                    help="disable occupancy pruning")
    sp.set_defaults(fn=_cmd_train_head)

    for name, fn, help_ in (
            ("finetune-lips", _cmd_finetune_lips,
             "stage 2: patch-structured lip fine-tune"),
            ("train-torso", _cmd_train_torso,
             "stage 3: screen-space deformable torso")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--checkpoint", required=True,
                        help="checkpoint from the previous stage")
        sp.add_argument("--out", required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("render", help="render one frame to a PNG")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="output PNG path")
    sp.add_argument("--frame", type=int,
                    help="frame index (default: first held-out frame)")
    sp.add_argument("--eye-ratio", type=float, dest="eye_ratio",
                    help="override the eye openness input, in [0, 0.01]")
    sp.add_argument("--background", help="replacement background PNG")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--max-samples", type=int, dest="max_samples")
    sp.add_argument("--no-prune", action="store_true", dest="no_prune")
    sp.set_defaults(fn=_cmd_render)

    sp = sub.add_parser("eval", help="held-out metrics report as JSON")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", help="also write the report to this file")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--max-frames", type=int, dest="max_frames",
                    help="cap the number of held-out frames scored")
    sp.add_argument("--no-prune", action="store_true", dest="no_prune",
                    help="skip the pruned-vs-dense comparison")
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("bench", help="render throughput benchmark")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", help="also write the stats to this file")
    sp.add_argument("--max-samples", type=int, dest="max_samples")
    sp.add_argument("--no-prune", action="store_true", dest="no_prune")
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--timed", type=int, default=100)
    sp.set_defaults(fn=_cmd_bench)

    sp = sub.add_parser("gradcheck",
                        help="finite-difference check of every custom op")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cases", type=int, default=100,
                    help="random cases per op")
    sp.set_defaults(fn=_cmd_gradcheck)

    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
