"""Command-line entry point: synth, track, eval, ablate, oracle, pretrain."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import Config
from .evaluation import eval_ope, read_annotations, write_annotations
from .geometry import Box


def _parse_box(text: str) -> Box:
    parts = [p for p in text.replace("\t", ",").split(",") if p.strip()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h, got {text!r}")
    try:
        return Box.from_corner(*(float(p) for p in parts))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def cmd_synth(args) -> int:
    from .sequences import write_sequence
    from .synth import SyntheticSceneSpec, gen_sequence

    spec = SyntheticSceneSpec.from_json(Path(args.spec).read_text())
    frames, gt = gen_sequence(spec)
    out = write_sequence(args.out, frames, gt)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_track(args) -> int:
    from .overlay import GREEN, render_overlay
    from .sequences import frame_paths, load_frames
    from .tracker import init, track_frame

    cfg = Config.load(args.config) if args.config else Config()
    frames = load_frames(args.seq)
    t0 = time.perf_counter()
    state = init(frames[0], args.init, cfg)
    boxes = [state.box]
    for f in frames[1:]:
        boxes.append(track_frame(state, f))
    dt = time.perf_counter() - t0
    write_annotations(args.out, boxes)
    if args.overlay:
        od = Path(args.overlay)
        od.mkdir(parents=True, exist_ok=True)
        for p, f, b in zip(frame_paths(args.seq), frames, boxes):
            render_overlay(f.to_uint8(), [(b, GREEN)], od / (p.stem + ".ppm"))
    print(f"tracked {len(frames)} frames in {dt:.2f}s ({(len(frames) - 1) / max(dt, 1e-9):.1f} fps)", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    res = eval_ope(read_annotations(args.pred), read_annotations(args.gt), fps=args.fps)
    if args.json:
        print(json.dumps(res.to_json_dict()))
    else:
        print(f"precision@20px {res.precision:.4f}  success AUC {res.success_auc:.4f}  frames {len(res.per_frame_iou)}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ARMS, run_ablation, standard_suite
    from .synth import TIERS

    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        print(f"unknown arms: {bad}; choose from {sorted(ARMS)}", file=sys.stderr)
        return 2
    if args.suite != "standard":
        print("only the 'standard' suite is defined", file=sys.stderr)
        return 2
    if args.tier not in TIERS:
        print(f"unknown tier {args.tier!r}", file=sys.stderr)
        return 2
    cfg = Config.load(args.config) if args.config else Config()
    seeds = range(1, args.sequences + 1)
    table = run_ablation(standard_suite(args.tier, seeds, args.frames), cfg, arms)
    out = table.to_json_dict()
    out["tier"] = args.tier
    if args.json:
        print(json.dumps(out))
    else:
        for arm, row in out["arms"].items():
            print(f"{arm:14s} SUC {row['success_auc']:.4f}  PRE {row['precision']:.4f}")
        for k, v in out["comparisons"].items():
            print(f"{k}: {v:.0%} of sequences")
    return 0


def cmd_oracle(args) -> int:
    from .oracles import run_all

    results = run_all(args.seed)
    for r in results:
        print(r.line())
    total = sum(r.seconds for r in results)
    ok = all(r.passed for r in results)
    print(f"{'all oracles passed' if ok else 'ORACLE FAILURE'} in {total:.2f}s")
    return 0 if ok else 1


def cmd_pretrain(args) -> int:
    from .models import builtin_path
    from .pretrain import pretrain

    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    for pooling in args.pooling:
        bundle, metrics = pretrain(pooling, n_pairs=args.pairs, epochs=args.epochs, seed=args.seed)
        out = Path(args.out_dir) / builtin_path(pooling).name if args.out_dir else builtin_path(pooling)
        bundle.save(out)
        print(f"{pooling}: {json.dumps(metrics)} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadetrack", description="Single-object tracker with cascaded proposal refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="render a synthetic sequence from a JSON scene description")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("track", help="track a sequence directory from an initial box")
    s.add_argument("--seq", required=True)
    s.add_argument("--init", required=True, type=_parse_box, help="x,y,w,h of the first-frame box")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--overlay")
    s.set_defaults(fn=cmd_track)

    s = sub.add_parser("eval", help="one-pass precision and success of a result file")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--fps", type=float, default=0.0)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="compare tracker variants on the standard synthetic suite")
    s.add_argument("--suite", default="standard")
    s.add_argument("--arms", required=True, help="comma-separated, e.g. cascaded,parallel")
    s.add_argument("--tier", default="sim0.9")
    s.add_argument("--sequences", type=int, default=20)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--config")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("oracle", help="compare kernels against brute-force references")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("pretrain", help="refit the shipped regressor/identifier weights")
    s.add_argument("--pooling", nargs="+", default=["proialign", "roialign"], choices=["proialign", "roialign"])
    s.add_argument("--pairs", type=int, default=8000)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_pretrain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
