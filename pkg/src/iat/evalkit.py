"""One-pass evaluation metrics, result files and the ablation harness.

Metric conventions:

* success: fraction of frames with IoU strictly greater than each threshold
  on a 21-point grid ``0, 0.05, ..., 1``; AUC is the mean over the grid.
* precision: fraction of frames with center error ``<=`` each threshold on
  ``0, 1, ..., 50`` pixels; the headline number is the value at 20 px.

Boxes here are top-left ``(x, y, w, h)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import IATConfig, DatasetSpec
from .geometry import ContractError, cxcywh_to_xywh

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)


def iou(box_a, box_b) -> float:
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ContractError(f"boxes need positive area: {box_a}, {box_b}")
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    # rounding can push identical boxes a hair above 1
    return min(1.0, inter / (aw * ah + bw * bh - inter))


def iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any() or (b[:, 2:] <= 0).any():
        raise ContractError("boxes need positive area")
    iw = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    return np.minimum(1.0, inter / (a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter))


def center_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.sqrt(((ca - cb) ** 2).sum(1))


@dataclass
class RunResult:
    sequence: str
    predicted: np.ndarray
    groundtruth: np.ndarray
    ious: np.ndarray = field(init=False)
    center_errors: np.ndarray = field(init=False)

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1, 4)
        self.groundtruth = np.asarray(self.groundtruth, dtype=np.float64).reshape(-1, 4)
        if len(self.predicted) != len(self.groundtruth):
            raise ContractError(
                f"{self.sequence}: {len(self.predicted)} predictions for {len(self.groundtruth)} frames")
        self.ious = iou_many(self.predicted, self.groundtruth)
        self.center_errors = center_error(self.predicted, self.groundtruth)


def _as_list(results) -> list[RunResult]:
    results = [results] if isinstance(results, RunResult) else list(results)
    if not results or sum(len(r.ious) for r in results) == 0:
        raise ContractError("need at least one evaluated frame")
    return results


def success_curve(results, thresholds=SUCCESS_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Success rates over IoU thresholds (frames pooled) and their mean (AUC)."""
    ious = np.concatenate([r.ious for r in _as_list(results)])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (ious[None, :] > thresholds[:, None]).mean(1)
    return curve, float(curve.mean())


def precision_curve(results, thresholds=PRECISION_THRESHOLDS,
                    report_at: float = 20.0) -> tuple[np.ndarray, float]:
    errs = np.concatenate([r.center_errors for r in _as_list(results)])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (errs[None, :] <= thresholds[:, None]).mean(1)
    return curve, float((errs <= report_at).mean())


def sequence_mean_auc(results) -> float:
    """Per-sequence success AUC averaged over sequences."""
    return float(np.mean([success_curve(r)[1] for r in _as_list(results)]))


# -- files -----------------------------------------------------------------

def read_results(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an ``x y w h score`` results file into boxes and scores."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected 'x y w h [score]'")
            vals = [float(p) for p in parts]
            rows.append(vals if len(vals) == 5 else vals + [float("nan")])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return arr[:, :4], arr[:, 4]


def read_groundtruth(path: str | Path) -> np.ndarray:
    """Ground truth as top-left boxes.

    Accepts the dataset's ``frame_idx cx cy w h`` files as well as plain
    ``x y w h`` (comma or space separated) files.
    """
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.replace(",", " ").split()
            if not parts:
                continue
            vals = [float(p) for p in parts]
            if len(vals) == 5:
                rows.append(cxcywh_to_xywh(vals[1:]))
            elif len(vals) == 4:
                rows.append(np.array(vals))
            else:
                raise ValueError(f"{path}: cannot parse {line.strip()!r}")
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def evaluate_files(results_path, gt_path) -> dict:
    boxes, _ = read_results(results_path)
    gt = read_groundtruth(gt_path)
    res = RunResult(Path(results_path).stem, boxes, gt)
    _, auc = success_curve(res)
    _, prec = precision_curve(res)
    return {"sequence": res.sequence, "frames": len(gt), "success_auc": auc, "precision@20": prec}


# -- ablation harness -------------------------------------------------------

AXES = {
    "K": ("inst", "K", int),
    "F": ("inst", "F", int),
    "fusion": ("inst", "variant", lambda v: {"shared": "fused_shared", "separated": "fused_separated"}.get(v, v)),
    "variant": ("inst", "variant", str),
}


def _config_diff(a: dict, b: dict, prefix: str = "") -> set[str]:
    diff = set()
    for key in set(a) | set(b):
        va, vb = a.get(key), b.get(key)
        path = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            diff |= _config_diff(va, vb, path + ".")
        elif va != vb:
            diff.add(path)
    return diff


def heldout_spec(cfg: IATConfig, num_videos: int = 10) -> DatasetSpec:
    d = cfg.data
    return DatasetSpec(num_videos=num_videos, frames_per_video=d.frames_per_video,
                       image_size=d.image_size, distractor_count=d.distractor_count,
                       occlusion_prob=d.occlusion_prob, speed=d.speed,
                       target_size=d.target_size, scale_variation=d.scale_variation,
                       seed=d.seed + 7919)


def evaluate_tracker(tracker, videos) -> list[RunResult]:
    from .tracker import track_sequence

    results = []
    for v in videos:
        boxes, _ = track_sequence(tracker, v.frames, v.boxes[0])
        results.append(RunResult(str(v.video_id),
                                 [cxcywh_to_xywh(b) for b in boxes],
                                 [cxcywh_to_xywh(b) for b in v.boxes]))
    return results


def ablate(axis: str, values, base: IATConfig, out_dir: str | Path | None = None,
           max_steps: int | None = None, heldout_videos: int = 10) -> dict:
    """Train one model per axis value on one seeded dataset and track a held-out split.

    Failed rows are recorded with their error and the sweep continues.
    """
    import tempfile

    from .synthvid import generate_dataset
    from .trainer import fit
    from .tracker import Tracker

    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    section, name, cast = AXES[axis]
    train_set = generate_dataset(base.data)
    heldout = generate_dataset(heldout_spec(base, heldout_videos), first_id=base.data.num_videos)
    base_dict = base.to_dict()

    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(out_dir) if out_dir is not None else Path(tmp)
        for value in values:
            value = cast(value)
            row = {"axis": axis, "value": value}
            try:
                cfg = base.replace(**{f"{section}__{name}": value})
                changed = _config_diff(base_dict, cfg.to_dict())
                if not changed <= {f"{section}.{name}"}:
                    raise RuntimeError(f"row changes more than the swept field: {sorted(changed)}")
                run_dir = root / f"{axis}={value}"
                ckpt = fit(cfg, train_set, run_dir, max_steps=max_steps)
                results = evaluate_tracker(Tracker.from_checkpoint(ckpt), heldout)
                _, auc = success_curve(results)
                _, prec = precision_curve(results)
                row.update(status="ok", config_hash=cfg.hash(), success_auc=auc,
                           sequence_auc=sequence_mean_auc(results), precision20=prec)
            except Exception as exc:  # noqa: BLE001 - a failed row must not stop the sweep
                log.exception("ablation row %s=%s failed", axis, value)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    report = {"axis": axis, "base_config_hash": base.hash(), "rows": rows}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.json", "w") as fh:
            json.dump(report, fh, indent=1)
        with open(out / "ablation.txt", "w") as fh:
            fh.write(format_table(report))
    return report


def format_table(report: dict) -> str:
    header = f"{report['axis']:>10} | {'AUC(%)':>8} | {'seqAUC(%)':>9} | {'Prec@20(%)':>10} | status"
    lines = [header, "-" * len(header)]
    for row in report["rows"]:
        if row["status"] == "ok":
            lines.append(f"{str(row['value']):>10} | {100 * row['success_auc']:8.2f} | "
                         f"{100 * row['sequence_auc']:9.2f} | {100 * row['precision20']:10.2f} | ok")
        else:
            lines.append(f"{str(row['value']):>10} | {'-':>8} | {'-':>9} | {'-':>10} | failed: {row['error']}")
    return "\n".join(lines) + "\n"
