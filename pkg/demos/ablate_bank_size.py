"""Sweep the memory bank size on one seeded dataset and print the table.

Short schedules make this a check of the harness; the ranking of the rows
only settles with full training.
"""

import argparse

import torch

from iat.config import IATConfig
from iat.evalkit import ablate, format_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--values", default="0,10,100")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--heldout", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)

    report = ablate("K", args.values.split(","), IATConfig(), out_dir=args.out,
                    max_steps=args.steps, heldout_videos=args.heldout)
    print(format_table(report), end="")


if __name__ == "__main__":
    main()
