"""Command line entry point: ``iat gen-data|train|track|eval|ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import IATConfig, load_config

log = logging.getLogger("iat")


def _dataset_spec(path: str | None):
    from .synthvid import spec_from_mapping

    if path is None:
        return IATConfig().data
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    # either a bare dataset spec or a full config with a ``data`` section
    return spec_from_mapping(data.get("data", data) if isinstance(data, dict) else {})


def cmd_gen_data(args) -> int:
    from .synthvid import generate_dataset, save_dataset

    spec = _dataset_spec(args.spec)
    videos = generate_dataset(spec)
    save_dataset(videos, args.out)
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .synthvid import generate_dataset, load_dataset
    from .trainer import fit

    cfg = load_config(args.config)
    if args.variant is not None:
        cfg = cfg.replace(inst__variant=args.variant)
    data = load_dataset(args.data) if args.data else generate_dataset(cfg.data)
    ckpt = fit(cfg, data, args.out, max_steps=args.max_steps, resume=args.resume, progress=True)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_track(args) -> int:
    from .synthvid import load_video
    from .tracker import Tracker, track_sequence, write_results

    vdir = Path(args.video)
    try:
        video_id = int(vdir.name)
    except ValueError:
        video_id = 0
    video = load_video(vdir, video_id)
    tracker = Tracker.from_checkpoint(args.checkpoint, load_config(args.config) if args.config else None)
    boxes, scores = track_sequence(tracker, video.frames, video.boxes[0])
    write_results(args.out, boxes, scores)
    print(f"tracked {len(boxes)} frames -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evalkit import evaluate_files

    report = evaluate_files(args.results, args.gt)
    print(json.dumps(report, indent=1))
    return 0


def cmd_ablate(args) -> int:
    from .evalkit import ablate, format_table

    cfg = load_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    report = ablate(args.axis, values, cfg, out_dir=args.out, max_steps=args.max_steps,
                    heldout_videos=args.heldout)
    print(format_table(report), end="")
    return 0 if all(r["status"] == "ok" for r in report["rows"]) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a seeded synthetic video set")
    p.add_argument("--spec", help="YAML dataset spec (or a full config with a data section)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the three-branch network")
    p.add_argument("--config", help="YAML config; defaults are used when omitted")
    p.add_argument("--data", help="dataset root written by gen-data; generated from the config if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("video", "object", "fused_shared", "fused_separated"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run one-pass tracking on a video directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="<root>/<video_id> directory with frames/ and groundtruth.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="override inference-only settings; must hash like the checkpoint")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="success AUC and precision@20 of one results file")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one model per axis value")
    p.add_argument("--axis", required=True, choices=("K", "F", "fusion", "variant"))
    p.add_argument("--values", required=True, help="comma separated, e.g. 0,10,100")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--heldout", type=int, default=10, help="number of held-out videos to track")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .trainer import CheckpointError, TrainingAborted

    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError, TrainingAborted) as exc:
        print(f"iat {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
