"""`gp3` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gp3", description="Geometry-aware multi-view policy toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--config", type=Path, help="JSON run config; flags override it")
        return sp

    s = common(sub.add_parser("synth", help="write expert episode files"))
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--task", choices=("reach", "push"), default="reach")
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--decoy", action="store_true")
    s.add_argument("--res", type=int, default=32)

    s = common(sub.add_parser("train-geo", help="Stage 1: camera + depth fine-tuning"))
    s.add_argument("--scenes", type=int, default=200)
    s.add_argument("--val-scenes", type=int, default=0)
    s.add_argument("--resume", type=Path)

    s = common(sub.add_parser("train-act", help="Stage 2: action training"))
    s.add_argument("--episodes", type=Path, required=True, help="directory of .gp3e files")
    s.add_argument("--stage1", type=str, default="none", help="Stage-1 checkpoint, or 'none' for random init")

    s = common(sub.add_parser("eval-geo", help="point-map evaluation"))
    s.add_argument("--ckpt", type=str, required=True, help="encoder checkpoint, 'random' or 'oracle'")
    s.add_argument("--scenes", type=Path, required=True, help="directory of .gp3e files (first frame used)")
    s.add_argument("--threshold", type=float, default=0.35)

    s = common(sub.add_parser("eval-task", help="closed-loop success rate"))
    s.add_argument("--ckpt", type=str, default="expert", help="policy checkpoint, 'expert' or 'random'")
    s.add_argument("--task", choices=("reach", "push"), default="reach")
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--decoy", action="store_true")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed0", type=int, default=10_000)

    s = common(sub.add_parser("ablate", help="method x views success table"))
    s.add_argument("--stage1", type=str, required=True)
    s.add_argument("--task", choices=("reach", "push"), default="push")
    s.add_argument("--distractors", type=int, default=2)
    s.add_argument("--decoy", action="store_true")
    s.add_argument("--episodes", type=int, default=50)
    s.add_argument("--trials", type=int, default=30)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--views", type=_ints, default=[1, 2, 4])
    s.add_argument("--methods", type=lambda t: t.split(","), default=None)

    s = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), out_required=False)
    s.add_argument("--module", default="all")

    s = common(sub.add_parser("viz-attn", help="global-attention heatmaps as PGM files"))
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--episode", type=Path, required=True)
    s.add_argument("--step", type=int, default=0)
    return p


# ----------------------------------------------------------------- commands


def _train_config(args, extra: Sequence[str], **defaults):
    from .trainer import TrainConfig

    try:
        return TrainConfig.load(args.config, extra, **defaults)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _episode_files(directory: Path) -> list[Path]:
    files = sorted(Path(directory).glob("*.gp3e"))
    if not files:
        raise FileNotFoundError(f"no .gp3e files under {directory}")
    return files


def cmd_synth(args, extra) -> int:
    from .scenegen import make_episode, write_episode
    from .toytask import TaskSpec

    spec = TaskSpec(args.task, args.views, args.distractors, args.decoy)
    args.out.mkdir(parents=True, exist_ok=True)
    listing = []
    for i in range(args.episodes):
        ep = make_episode(args.seed + i, spec, (args.res, args.res))
        name = f"episode_{i:04d}.gp3e"
        write_episode(args.out / name, ep)
        listing.append({"file": name, "seed": args.seed + i, "steps": ep.shape["T"], "success": ep.meta["success"]})
    _write_json(args.out / "manifest.json", {"task": spec.to_dict(), "seed": args.seed, "episodes": listing})
    print(f"wrote {len(listing)} episodes to {args.out}")
    return EXIT_OK


def cmd_train_geo(args, extra) -> int:
    from .trainer import stage1_dataset, train_stage1

    cfg = _train_config(args, extra, stage=1, seed=args.seed)
    train = stage1_dataset(args.scenes, seed0=args.seed * 1_000_003)
    val = stage1_dataset(args.val_scenes, seed0=args.seed * 1_000_003 + 500_000) if args.val_scenes else None
    res = train_stage1(train, cfg, val=val, out_dir=args.out, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "final": last}, sort_keys=True))
    return EXIT_OK


def cmd_train_act(args, extra) -> int:
    from .scenegen import read_episode
    from .trainer import train_stage2

    cfg = _train_config(args, extra, stage=2, seed=args.seed, epochs=100, batch=32)
    episodes = [read_episode(f) for f in _episode_files(args.episodes)]
    stage1 = None if args.stage1 == "none" else args.stage1
    res = train_stage2(episodes, stage1, cfg, out_dir=args.out)
    print(json.dumps({"checkpoint": str(res.checkpoint), "final": res.history[-1] if res.history else {}}))
    return EXIT_OK


def cmd_eval_geo(args, extra) -> int:
    from .encoder import Encoder
    from .geoeval import encoder_model, eval_pointmaps, oracle_model
    from .scenegen import read_episode

    scenes = [read_episode(f).geo_sample(0) for f in _episode_files(args.scenes)]
    if args.ckpt == "oracle":
        model = oracle_model
    elif args.ckpt == "random":
        model = encoder_model(Encoder(seed=args.seed))
    else:
        model = encoder_model(Encoder.load(args.ckpt))
    report = eval_pointmaps(model, scenes, args.threshold, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "report.json", report)
    print(json.dumps(report["aggregate"], sort_keys=True))
    return EXIT_OK


def cmd_eval_task(args, extra) -> int:
    from .toytask import TaskSpec, expert_policy, random_policy, success_rate
    from .trainer import PolicyModel

    spec = TaskSpec(args.task, args.views, args.distractors, args.decoy)
    if args.ckpt == "expert":
        policy = expert_policy(spec)
    elif args.ckpt == "random":
        policy = random_policy(args.seed)
    else:
        policy = PolicyModel.load(args.ckpt, seed=args.seed)
    rate = success_rate(policy, spec, args.trials, args.seed0)
    args.out.mkdir(parents=True, exist_ok=True)
    result = {"policy": args.ckpt, "task": spec.to_dict(), "tier": spec.tier, "trials": args.trials,
              "seed0": args.seed0, "success_rate": rate}
    _write_json(args.out / "eval_task.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args, extra) -> int:
    from .toytask import METHODS, TaskSpec, format_table, table_json
    from .trainer import run_ablation

    cfg = _train_config(args, extra, stage=2, epochs=30, batch=32)
    spec = TaskSpec(args.task, 1, args.distractors, args.decoy)
    methods = args.methods or list(METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method {bad[0]!r}; expected a subset of {METHODS}")
    args.out.mkdir(parents=True, exist_ok=True)
    rows, summary = run_ablation(args.stage1, spec, cfg, seeds=args.seeds, views=args.views, methods=methods,
                                 n_episodes=args.episodes, n_trials=args.trials, out_dir=args.out)
    (args.out / "table.json").write_text(table_json(rows) + "\n")
    text = format_table(summary)
    (args.out / "table.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    from .gradsuite import timed_gradcheck

    try:
        results, seconds = timed_gradcheck(args.module, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    worst: dict[str, float] = {}
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.module:8s} {r.name:40s} rel.err {r.error:.3e} (tol {r.tolerance:.0e})")
        worst[r.module] = max(worst.get(r.module, 0.0), r.error)
    for m, e in worst.items():
        print(f"max rel. error [{m}]: {e:.3e}")
    print(f"elapsed {seconds:.1f}s")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "gradcheck.json", [r.__dict__ | {"ok": r.ok} for r in results])
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def attention_maps(encoder, images: np.ndarray, instruction: Sequence[int]) -> dict[int, np.ndarray]:
    """Per global block: (V, gh, gw) head-averaged attention from each view's camera token to its own patches."""
    from . import diffcore as dc

    record: dict = {}
    with dc.no_grad():
        lang = encoder.embed_batch([list(instruction)])
        encoder.forward(images[None], lang, record)
    v = images.shape[0]
    n = encoder.cfg.n_tokens
    gh, gw = encoder.cfg.grid
    maps = {}
    for j, block in enumerate(encoder.blocks):
        if block.kind != "global":
            continue
        w = record["attn"][j][0].mean(axis=0)  # (V*n, V*n)
        maps[j] = np.stack([w[k * n, k * n + 1 : (k + 1) * n].reshape(gh, gw) for k in range(v)])
    return maps


def heatmap(attn: np.ndarray, height: int, width: int) -> np.ndarray:
    """Min-max normalise (a constant map becomes all zeros), upsample bilinearly, clamp to [0, 1]."""
    from .diffcore import bilinear_matrix

    lo, hi = float(attn.min()), float(attn.max())
    norm = np.zeros_like(attn) if hi - lo <= 1e-12 * max(1.0, abs(hi)) else (attn - lo) / (hi - lo)
    up = bilinear_matrix(attn.shape[0], height) @ norm @ bilinear_matrix(attn.shape[1], width).T
    return np.clip(up, 0.0, 1.0)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5) of values in [0, 1]."""
    h, w = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)


def cmd_viz_attn(args, extra) -> int:
    from .checkpoint import load_checkpoint
    from .encoder import Encoder
    from .scenegen import read_episode

    arrays, meta = load_checkpoint(args.ckpt)
    encoder = Encoder.from_arrays(arrays, meta)
    ep = read_episode(args.episode)
    shape = ep.shape
    if (shape["H"], shape["W"]) != tuple(encoder.cfg.image_size):
        raise ValueError(f"episode resolution {shape['H']}x{shape['W']} does not match checkpoint "
                         f"{encoder.cfg.image_size[0]}x{encoder.cfg.image_size[1]}")
    if not 0 <= args.step < shape["T"]:
        raise ValueError(f"step {args.step} outside episode of length {shape['T']}")
    maps = attention_maps(encoder, ep.images[args.step].astype(np.float64), ep.instruction)
    args.out.mkdir(parents=True, exist_ok=True)
    count = 0
    for j, per_view in maps.items():
        for k, m in enumerate(per_view):
            write_pgm(args.out / f"attn_step{args.step:03d}_view{k}_block{j}.pgm", heatmap(m, shape["H"], shape["W"]))
            count += 1
    print(f"wrote {count} heatmaps to {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train-geo": cmd_train_geo,
    "train-act": cmd_train_act,
    "eval-geo": cmd_eval_geo,
    "eval-task": cmd_eval_task,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "viz-attn": cmd_viz_attn,
}
TRAIN_OVERRIDES = ("train-geo", "train-act", "ablate")


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    command = ""
    try:
        args, extra = parser.parse_known_args(argv)
        command = args.command
        if extra and (args.command not in TRAIN_OVERRIDES or not all(e.startswith("--") and "=" in e for e in extra)):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        return COMMANDS[args.command](args, extra)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"gp3 {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
