"""Command-line front end for dataset generation, training, evaluation,
parameter reports, ablations, gradient batteries and pendulum control.

Exit codes: 0 on success, 1 on invalid usage or inputs, 2 on runtime
failure (divergence, non-finite values, a gradient battery out of
tolerance).  Every subcommand takes ``--seed`` (default 0) and
``--threads`` (default: the ``PIXPHYS_THREADS`` environment variable,
else 1), and writes only under its ``--out`` path.

Configuration files are JSON documents of the shape::

    {"preset": "spring2", "desk": false, "seed": 0,
     "scene": {...}, "train": {...}, "cem": {...}}

A preset expands to the exact published constants (time step, image
size, horizons, loss weights, schedule); any explicit key in the three
override sections replaces the preset value.  Command-line flags win
over file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import control, datagen, gradchecks, renderer, training
from . import diffcore as dc

PRESETS = datagen.PRESET_NAMES


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract reserves 2 for
    # runtime failures, so route usage problems through the exception path
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration ------------------------------------------------------------

_SCENE_KEYS = frozenset({
    "size", "channels", "n_input", "n_pred", "n_ext", "counts", "seed",
    "sprite_mode", "background", "sprite_dir",
})
_TRAIN_KEYS = frozenset(
    f.name for f in dataclasses.fields(training.TrainConfig)) - {"scene"}
_CEM_KEYS = frozenset(f.name for f in dataclasses.fields(control.CEMConfig))


@dataclass
class RunConfig:
    """One experiment document: a preset plus explicit overrides."""

    preset: Optional[str] = None
    desk: bool = False
    seed: int = 0
    scene: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    cem: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        rc = cls(**doc)
        for section, allowed in (("scene", _SCENE_KEYS), ("train", _TRAIN_KEYS),
                                 ("cem", _CEM_KEYS)):
            bad = set(getattr(rc, section)) - allowed
            if bad:
                raise ValueError(f"{path}: unknown {section} keys {sorted(bad)}")
        return rc

    def scene_config(self) -> datagen.SceneConfig:
        if self.preset is None:
            raise UsageError("a --preset (or config with one) is required; "
                             f"choose from {', '.join(PRESETS)}")
        overrides = dict(self.scene)
        sprite_dir = overrides.pop("sprite_dir", None)
        cfg = datagen.scene_preset(self.preset, desk=self.desk, seed=self.seed,
                                   sprite_dir=sprite_dir)
        if "counts" in overrides:
            counts = tuple(int(c) for c in overrides["counts"])
            if len(counts) != 3 or min(counts) < 1:
                raise ValueError("counts must be three positive integers")
            overrides["counts"] = counts
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    def train_config(self, scene_name: str) -> training.TrainConfig:
        overrides = dict(self.train)
        cfg = training.train_config_for(
            scene_name,
            desk=self.desk,
            variant=overrides.pop("variant", "joint"),
            seed=overrides.pop("seed", self.seed),
            n_slots=overrides.pop("n_slots", None),
        )
        if "trainable" in overrides:
            overrides["trainable"] = tuple(overrides["trainable"])
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    def cem_config(self) -> control.CEMConfig:
        return control.CEMConfig(**self.cem)


def _config_from_args(args) -> RunConfig:
    """File config (if any) with command-line flags layered on top."""
    path = getattr(args, "config", None)
    rc = RunConfig.load(path) if path else RunConfig()
    if getattr(args, "preset", None):
        rc.preset = args.preset
    if getattr(args, "desk", False):
        rc.desk = True
    if getattr(args, "seed", None) is not None:
        rc.seed = args.seed
    return rc


def _parse_floats(text: str) -> list:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}")
    if not values:
        raise UsageError("expected at least one number")
    return values


def _parse_counts(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--counts takes train,val,test (three integers), got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--counts takes three integers, got {text!r}")


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    rc = _config_from_args(args)
    if args.counts:
        rc.scene["counts"] = _parse_counts(args.counts)
    if args.sprite_dir:
        rc.scene["sprite_dir"] = args.sprite_dir
    cfg = rc.scene_config()
    manifest = datagen.write_dataset(cfg, args.out)
    splits = ", ".join(f"{k}={v}" for k, v in manifest["splits"].items())
    print(f"wrote {cfg.name} dataset ({splits}, {manifest['seq_len']} frames "
          f"of {cfg.size}x{cfg.size}x{cfg.channels}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = _config_from_args(args)
    dataset = datagen.load_dataset(args.data)
    name = dataset.manifest["name"]
    if rc.preset is not None and rc.preset != name:
        raise ValueError(f"config preset {rc.preset!r} does not match the "
                         f"dataset at {args.data} ({name!r})")
    for key, value in (("variant", args.variant), ("epochs", args.epochs),
                       ("batch_size", args.batch), ("n_slots", args.n_slots)):
        if value is not None:
            rc.train[key] = value
    cfg = rc.train_config(name)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"preset": name, "desk": rc.desk, "seed": cfg.seed,
           "train": dataclasses.asdict(cfg)}
    with open(out / "config.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)

    model, ckpt = training.train(dataset, cfg, out)
    print(f"final checkpoint: {ckpt}")
    for label, learned, true, _ in _param_rows(model):
        print(f"  {label} = {learned:.4f} (generating value {true:g})")
    return 0


def cmd_eval(args) -> int:
    model, epoch, _ = training.load_checkpoint(args.ckpt)
    dataset = datagen.load_dataset(args.data)
    report = training.evaluate(model, dataset, split=args.split,
                               out_dir=args.out, n_strips=args.strips)
    print(f"{report['scene']} ({report['variant']}, epoch {epoch}) on "
          f"{report['n_sequences']} {args.split} sequences:")
    print(f"  prediction loss {report['l_pred']:.6f}   "
          f"reconstruction loss {report['l_rec']:.6f}")
    line = f"  mean SSI, first {report['n_pred']} steps: {report['mean_ssi_pred']:.4f}"
    if report["mean_ssi_ext"] is not None:
        line += (f"   next {report['n_ext']} steps: {report['mean_ssi_ext']:.4f}")
    print(line)
    if not model.blackbox:
        with dc.no_grad():
            bank = model.bank()
        written = renderer.export_bank_pngs(bank, Path(args.out) / "templates")
        print(f"  wrote report_{args.split}.json, {len(report['strips'])} rollout "
              f"strips and {len(written)} template images under {args.out}")
    else:
        print(f"  wrote report_{args.split}.json and {len(report['strips'])} "
              f"rollout strips under {args.out}")
    return 0


def _param_rows(model: training.Model) -> list:
    """(label, learned, generating value, was-trained) per scalar entry."""
    learned = model.phys.values()
    true = model.scene.true_params
    trained = set(model.config.trainable)
    rows = []
    for name in sorted(learned):
        values = np.asarray(learned[name])
        target = float(true[name])
        if values.ndim:
            rows.extend((f"{name}[{i}]", float(v), target, name in trained)
                        for i, v in enumerate(values.ravel()))
        else:
            rows.append((name, float(values), target, name in trained))
    return rows


def cmd_params(args) -> int:
    model, epoch, _ = training.load_checkpoint(args.ckpt)
    rows = _param_rows(model)
    if args.json:
        doc = {
            "scene": model.scene.name,
            "variant": model.config.variant,
            "epoch": epoch,
            "params": {
                label: {"learned": learned, "true": true,
                        "error_pct": 100.0 * (learned - true) / abs(true),
                        "trained": trained}
                for label, learned, true, trained in rows
            },
        }
        print(json.dumps(doc, indent=1, sort_keys=True))
    else:
        print(f"{model.scene.name} ({model.config.variant}), epoch {epoch}")
        if not rows:
            print("  this system has no physical parameters")
        for label, learned, true, trained in rows:
            err = 100.0 * (learned - true) / abs(true)
            note = "" if trained else "  (held fixed)"
            print(f"  {label:<6} learned {learned:9.4f}   true {true:9.4f}   "
                  f"error {err:+.1f}%{note}")
    if args.out and not model.blackbox:
        with dc.no_grad():
            bank = model.bank()
        written = renderer.export_bank_pngs(bank, args.out)
        print(f"wrote {len(written)} template images to {args.out}")
    return 0


def cmd_ablation(args) -> int:
    rc = _config_from_args(args)
    dataset = datagen.load_dataset(args.data)
    name = dataset.manifest["name"]
    if args.epochs is not None:
        rc.train["epochs"] = args.epochs
    base = rc.train_config(name)
    print(f"training {len(training.VARIANTS)} variants of {name} for "
          f"{base.epochs} epochs each (serial; this is the long way around)")
    rows = training.run_ablation(dataset, base, args.out)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'pred loss':>12}  {'rec loss':>12}")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['l_pred']:>12.6f}  {r['l_rec']:>12.6f}")
    print(f"wrote ablation.json and per-variant runs under {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradchecks.run(args.suite, seed=args.seed or 0)
    print(gradchecks.format_rows(rows))
    return 0 if all(r.ok for r in rows) else 2


def _film_strip(frames, path, n_panels: int = 12) -> None:
    """Evenly sampled frames side by side as one PNG."""
    from PIL import Image

    k = min(n_panels, len(frames))
    idx = np.linspace(0, len(frames) - 1, k).round().astype(int)
    panels = [np.clip(np.rint(np.asarray(frames[i]) * 255.0), 0, 255).astype(np.uint8)
              for i in idx]
    strip = np.concatenate(panels, axis=1)
    if strip.shape[-1] == 1:
        Image.fromarray(strip[..., 0], mode="L").save(path)
    else:
        Image.fromarray(strip).save(path)


def _load_goal_image(path) -> np.ndarray:
    from PIL import Image

    frame = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if frame.ndim == 2:
        frame = frame[..., None]
    return frame


def cmd_mpc(args) -> int:
    rc = _config_from_args(args)
    if args.oracle:
        model = None
    else:
        if not args.ckpt:
            raise UsageError("vision mode needs --ckpt (or pass --oracle)")
        model, _, _ = training.load_checkpoint(args.ckpt)
    cem = rc.cem_config() if rc.cem else None
    goal_image = _load_goal_image(args.goal_image) if args.goal_image else None
    base_seed = args.seed or 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    settings = []
    for mult in _parse_floats(args.gravity_mults):
        env = control.PendulumEnv(gravity_mult=mult)
        for goal_angle in _parse_floats(args.goal_angles):
            goal = control.Goal(angle=goal_angle)
            successes, files = 0, []
            for episode in range(args.episodes):
                result = control.mpc_episode(
                    env, model=model, goal=goal, steps=args.steps,
                    goal_image=goal_image, cem=cem,
                    seed=base_seed + episode, oracle=args.oracle,
                )
                stem = f"ep_mult{mult:g}_goal{goal_angle:g}_{episode:02d}"
                result.write_csv(out / f"{stem}.csv")
                _film_strip(result.frames, out / f"{stem}.png")
                files.append(stem)
                successes += bool(result.success)
                residual = abs(control.angdiff(result.theta[-1], result.goal_angle))
                print(f"gravity x{mult:g} goal {goal_angle:+.2f} episode "
                      f"{episode:02d}: {'success' if result.success else 'MISS'} "
                      f"(final angle error {residual:.3f} rad)")
            settings.append({
                "gravity_mult": mult,
                "goal_angle": goal_angle,
                "episodes": args.episodes,
                "successes": successes,
                "success_rate": successes / args.episodes,
                "episode_files": files,
            })
            print(f"gravity x{mult:g} goal {goal_angle:+.2f}: "
                  f"{successes}/{args.episodes} successful")

    summary = {
        "version": "pixphys-mpc/1",
        "mode": "oracle" if args.oracle else "vision",
        "checkpoint": None if args.oracle else str(args.ckpt),
        "steps": args.steps,
        "seed": base_seed,
        "cem": dataclasses.asdict(cem) if cem else dataclasses.asdict(control.CEMConfig()),
        "settings": settings,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"wrote per-episode CSVs, film strips and summary.json under {out}")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="kernel thread cap (default: PIXPHYS_THREADS or 1)")

    parser = _Parser(
        prog="pixphys",
        description="Synthetic-video physics: generate data, fit models from "
                    "pixels, evaluate rollouts, and drive a pendulum by vision.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser, metavar="<command>")

    p = sub.add_parser("gen-data", parents=[common],
                       help="render a synthetic dataset to disk")
    p.add_argument("--preset", choices=PRESETS, help="scene to generate")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--config", help="JSON config with preset/scene overrides")
    p.add_argument("--desk", action="store_true",
                   help="small splits (1000/200/200) instead of 5000/500/500")
    p.add_argument("--counts", metavar="TR,VA,TE", help="explicit split sizes")
    p.add_argument("--sprite-dir", help="sprite/background images for digits2")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="fit a model to a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/metrics")
    p.add_argument("--config", help="JSON config with training overrides")
    p.add_argument("--variant", choices=training.VARIANTS,
                   help="training variant (default joint)")
    p.add_argument("--epochs", type=int, help="override the schedule length")
    p.add_argument("--batch", type=int, help="sequences per batch (default 32)")
    p.add_argument("--n-slots", type=int, help="object slots (default: true count)")
    p.add_argument("--desk", action="store_true",
                   help="desk-scale schedule (200 epochs) instead of the full one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--strips", type=int, default=3,
                   help="rollout strip images to write (default 3)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common],
                       help="print learned physical parameters vs. truth")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--out", help="also write template images here")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablation", parents=[common],
                       help="train all four variants and tabulate losses")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config with training overrides")
    p.add_argument("--epochs", type=int, help="override the schedule length")
    p.add_argument("--desk", action="store_true", help="desk-scale schedule")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare every gradient pathway to finite differences")
    p.add_argument("--suite", default="all",
                   choices=tuple(gradchecks.SUITES) + ("all",),
                   help="which battery to run (default all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mpc", parents=[common],
                       help="closed-loop pendulum control from pixels")
    p.add_argument("--ckpt", help="trained pendulum checkpoint (vision mode)")
    p.add_argument("--out", required=True, help="directory for CSVs/strips/summary")
    p.add_argument("--config", help="JSON config with planner overrides")
    p.add_argument("--oracle", action="store_true",
                   help="plan on true state and parameters instead of vision")
    p.add_argument("--episodes", type=int, default=20,
                   help="episodes per setting (default 20)")
    p.add_argument("--steps", type=int, default=100,
                   help="control steps per episode (default 100)")
    p.add_argument("--gravity-mults", default="1.0", metavar="M,...",
                   help="gravity multipliers to test (default 1.0)")
    p.add_argument("--goal-angles", default="0.0", metavar="A,...",
                   help="goal angles in radians (default 0.0 = upright)")
    p.add_argument("--goal-image", help="PNG whose decoded angle becomes the goal")
    p.set_defaults(func=cmd_mpc)
    return parser


def run(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("PIXPHYS_THREADS", "1") or 1)
        dc.set_threads(threads)
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
