"""Train a small model on synthetic videos, track a held-out clip and score it.

    python demos/quickstart.py --steps 300 --out /tmp/iat_quickstart
"""

import argparse
import logging
from pathlib import Path

import numpy as np
import torch

from iat.config import DatasetSpec, IATConfig
from iat.evalkit import evaluate_tracker, precision_curve, success_curve
from iat.synthvid import generate_dataset
from iat.tracker import Tracker, track_sequence, write_results
from iat.trainer import fit, read_metrics


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--out", default="/tmp/iat_quickstart")
    ap.add_argument("--videos", type=int, default=5, help="held-out videos to track")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    cfg = IATConfig().replace(inst__K=100)
    out = Path(args.out)
    ckpt = fit(cfg, generate_dataset(cfg.data), out, max_steps=args.steps, progress=True)
    rows = read_metrics(out / "metrics.jsonl")
    head, tail = rows[: min(50, len(rows))], rows[-min(50, len(rows)):]
    print(f"total loss: first {np.mean([r['total'] for r in head]):.2f}, "
          f"last {np.mean([r['total'] for r in tail]):.2f}")
    print(f"cos(q, k+) - cos(q, negatives) at the end: {tail[-1]['pos_sim'] - tail[-1]['neg_sim']:.3f}")

    # tracking never touches the instance head or the bank
    tracker = Tracker.from_checkpoint(ckpt)
    videos = generate_dataset(DatasetSpec(num_videos=args.videos, occlusion_prob=0.0, speed=(0.5, 1.0), seed=1234),
                              first_id=1000)
    results = evaluate_tracker(tracker, videos)
    for r in results:
        print(f"video {r.sequence}: mean IoU {r.ious.mean():.3f}")
    print(f"success AUC {success_curve(results)[1]:.3f}, precision@20 {precision_curve(results)[1]:.3f}")

    boxes, scores = track_sequence(tracker, videos[0].frames, videos[0].boxes[0])
    write_results(out / "video_1000.txt", boxes, scores)
    print(f"results for video 1000 in {out / 'video_1000.txt'}")


if __name__ == "__main__":
    main()
