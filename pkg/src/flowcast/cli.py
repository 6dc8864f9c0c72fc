"""Command-line entry point.

One command per process. Every command writes a run-manifest JSON next to its
outputs, recording the resolved configuration, seed, artifact paths, build
identifier, and wall-clock timestamps, so runs can be reproduced exactly.

Heavy imports happen inside the command handlers so that the thread cap
(``--threads`` or the ``FLOWCAST_THREADS`` environment variable) can be
applied to the BLAS backend before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

from .errors import FlowcastError


def _cap_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _build_id():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    from . import __version__
    return f"flowcast-{__version__}"


def _write_manifest(path, command, args, artifacts, seed, started, config_text=None):
    manifest = {
        "command": command,
        "flags": {k: v for k, v in vars(args).items()
                  if k not in ("func", "threads") and v is not None},
        "seed": seed,
        "config": config_text,
        "artifacts": [str(a) for a in artifacts],
        "build": _build_id(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from . import datasets, storage
    started = _now()
    if args.kind == "shapes":
        ds = datasets.gen_stochastic_movement(args.n, args.frames, args.size,
                                              args.size, seed=args.seed,
                                              speed=args.speed)
    else:
        ds = datasets.gen_moving_sprite(args.n, args.frames, args.size,
                                        args.size, seed=args.seed,
                                        speed=args.speed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    storage.write_dataset(out, ds.videos)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "gen-data",
                    args, [out], args.seed, started)
    print(f"wrote {out} ({ds.videos.shape[0]} videos, "
          f"{ds.videos.shape[1]} frames)")
    return 0


def cmd_train(args):
    from . import storage, training
    started = _now()
    config_text = Path(args.config).read_text()
    try:
        cfg = training.config_from_text(config_text)
    except ValueError as e:
        raise FlowcastError(f"bad config: {e}") from e
    ds = storage.read_dataset(args.data)
    out_dir = Path(args.out_dir)
    training.train(ds.videos, cfg, out_dir)
    artifacts = [out_dir / "metrics.csv", out_dir / "checkpoint.vfck"]
    _write_manifest(out_dir / "manifest.json", "train", args, artifacts,
                    cfg.seed, started, config_text=training.config_to_text(cfg))
    print(f"trained {cfg.total_steps} steps -> {out_dir}")
    return 0


def cmd_eval(args):
    from . import storage, training
    started = _now()
    model, net, _, cfg = storage.load_checkpoint(args.ckpt)
    ds = storage.read_dataset(args.data)
    mean_bpp, per_video = training.evaluate_bpp(
        ds.videos, model, net, context_len=args.context,
        n_targets=args.targets, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["video,bpp"] + [f"{i},{b:.6f}" for i, b in enumerate(per_video)]
    out.write_text("\n".join(lines) + "\n")
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "eval",
                    args, [out], args.seed, started,
                    config_text=training.config_to_text(cfg))
    print(f"mean_bpp {mean_bpp:.6f}")
    return 0


def cmd_sample(args):
    from . import generation, storage, training
    started = _now()
    model, net, _, cfg = storage.load_checkpoint(args.ckpt)
    ds = storage.read_dataset(args.context_video)
    context = ds.videos[0]
    scfg = generation.SampleConfig(temperature=args.temperature,
                                   rollout_len=args.frames, seed=args.seed)
    video = generation.rollout(context, model, net, scfg)
    out_dir = Path(args.out_dir)
    paths = storage.export_frames(video, out_dir, prefix="frame")
    _write_manifest(out_dir / "manifest.json", "sample", args, paths,
                    args.seed, started, config_text=training.config_to_text(cfg))
    print(f"wrote {len(paths)} frames to {out_dir}")
    return 0


def cmd_interpolate(args):
    from . import generation, storage, training
    started = _now()
    model, _, _, cfg = storage.load_checkpoint(args.ckpt)
    ds = storage.read_dataset(args.video)
    video = ds.videos[0]
    for idx in (args.frame_a, args.frame_b):
        if not 0 <= idx < video.shape[0]:
            raise FlowcastError(f"frame index {idx} out of range "
                                f"(video has {video.shape[0]} frames)")
    if args.levels == "all":
        mask = set(range(model.levels))
    else:
        try:
            mask = {int(s) - 1 for s in args.levels.split(",")}
        except ValueError as e:
            raise FlowcastError(f"bad --levels value {args.levels!r}") from e
        if not all(0 <= l < model.levels for l in mask):
            raise FlowcastError(f"--levels out of range 1..{model.levels}")
    frames = generation.interpolate(video[args.frame_a], video[args.frame_b],
                                    args.steps, mask, model, seed=args.seed)
    out_dir = Path(args.out_dir)
    paths = storage.export_frames(frames, out_dir, prefix="blend")
    _write_manifest(out_dir / "manifest.json", "interpolate", args, paths,
                    args.seed, started, config_text=training.config_to_text(cfg))
    print(f"wrote {len(paths)} frames to {out_dir}")
    return 0


def cmd_oos(args):
    from . import generation, storage, training
    started = _now()
    model, net, _, cfg = storage.load_checkpoint(args.ckpt)
    ds = storage.read_dataset(args.data)
    report = generation.oos_scores(ds.videos, model, net,
                                   context_len=args.context,
                                   max_offset=args.max_offset, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "oos",
                    args, [out], args.seed, started,
                    config_text=training.config_to_text(cfg))
    print(f"spearman {report.spearman:.4f}")
    return 0


def cmd_gradcheck(args):
    from . import verify
    results = verify.run_all()
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="flowcast",
                                description="Exact-likelihood video model: "
                                            "data, training, evaluation, "
                                            "sampling.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (default: FLOWCAST_THREADS "
                        "env var, else library default)")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic video dataset")
    g.add_argument("--kind", choices=("shapes", "sprite"), required=True)
    g.add_argument("--n", type=int, required=True, help="number of videos")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--size", type=int, required=True, help="square frame size")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--speed", type=float, default=1.0, help="pixels per frame")
    g.add_argument("--out", required=True, help="output .vfd path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--data", required=True, help=".vfd dataset")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out bits per pixel")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--context", type=int, default=3)
    e.add_argument("--targets", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval.csv", help="per-video bpp CSV")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="roll out frames from a context video")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--context-video", required=True,
                   help=".vfd whose first video provides the context frames")
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--temperature", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("interpolate", help="latent interpolation between frames")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help=".vfd; first video is used")
    i.add_argument("--frame-a", type=int, default=0)
    i.add_argument("--frame-b", type=int, default=12)
    i.add_argument("--steps", type=int, default=8)
    i.add_argument("--levels", default="all",
                   help="'all' or comma-separated 1-based level indices")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_interpolate)

    o = sub.add_parser("oos", help="out-of-sequence frame scoring")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--context", type=int, default=3)
    o.add_argument("--max-offset", type=int, default=10)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default="oos.csv")
    o.set_defaults(func=cmd_oos)

    c = sub.add_parser("gradcheck", help="run the 64-bit verification suites")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        env = os.environ.get("FLOWCAST_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                print("error:config: FLOWCAST_THREADS must be an integer",
                      file=sys.stderr)
                return 2
    if threads is not None:
        if threads < 1:
            print("error:config: thread count must be >= 1", file=sys.stderr)
            return 2
        _cap_threads(threads)
    try:
        return args.func(args)
    except FlowcastError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error:io: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # keep stderr machine-parsable
        print(f"error:internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
