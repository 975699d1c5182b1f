"""Online single-object tracking with the classification and regression branches.

The instance branch is a training-time device only: the tracker never
calls the boosting head and never reads or writes a memory bank.  The
counters on :class:`TrackState` make that checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .clsbranch import TargetModel, gaussian_label, init_target_model, maybe_update_target_model, score_map
from .config import IATConfig
from .geometry import CropWindow, clip_box, crop_window, cxcywh_to_xywh, extract_crop, image_to_tensor
from .instbranch import MemoryBank
from .regbranch import from_param, refine_box, to_param
from .trainer import IATNet, load_network

# relative (dx, dy, dw, dh) seeds around the classifier peak; dx, dy in box units
_SEEDS = ((0.0, 0.0, 1.0, 1.0), (0.0, 0.0, 0.9, 0.9), (0.0, 0.0, 1.1, 1.1),
          (0.0, 0.0, 1.1, 0.9), (0.0, 0.0, 0.9, 1.1), (0.1, 0.0, 1.0, 1.0),
          (-0.1, 0.0, 1.0, 1.0), (0.0, 0.1, 1.0, 1.0), (0.0, -0.1, 1.0, 1.0))


@dataclass
class TrackState:
    target: TargetModel
    box: np.ndarray
    frame_index: int
    window: CropWindow
    init_peak: float
    image_size: tuple[int, int]
    bank_reads: int = 0
    bank_writes: int = 0
    psi_calls: int = 0
    history: list[dict] = field(default_factory=list)
    counter_base: tuple[int, int, int] = (0, 0, 0)


class Tracker:
    """Wraps a trained :class:`IATNet`; one :class:`TrackState` per sequence."""

    def __init__(self, net: IATNet, cfg: IATConfig, bank: MemoryBank | None = None):
        self.net = net.eval()
        self.cfg = cfg
        self.bank = bank
        self.dtype = next(net.parameters()).dtype

    @classmethod
    def from_checkpoint(cls, path: str | Path, cfg: IATConfig | None = None) -> "Tracker":
        net, ck_cfg = load_network(path, cfg)
        return cls(net, ck_cfg)

    # instrumentation: the counters report activity since init
    def _counters(self) -> tuple[int, int, int]:
        reads = self.bank.reads if self.bank is not None else 0
        writes = self.bank.writes if self.bank is not None else 0
        return reads, writes, self.net.boosting_calls()

    def _sync_counters(self, state: TrackState) -> None:
        base = state.counter_base
        r, w, c = self._counters()
        state.bank_reads = r - base[0]
        state.bank_writes = w - base[1]
        state.psi_calls = c - base[2]

    @torch.no_grad()
    def init(self, frame: np.ndarray, box) -> TrackState:
        base = self._counters()
        box = np.asarray(box, dtype=np.float64)
        target = init_target_model(self.net.backbone, self.net.predictor, frame, box,
                                   self.cfg.cls, self.cfg.crop)
        window = crop_window(box, self.cfg.crop.search_area_factor, self.cfg.crop.search_size)
        score = score_map(target.features[0], target.g)
        state = TrackState(target=target, box=box, frame_index=0, window=window,
                           init_peak=float(score.max()), image_size=frame.shape[:2],
                           counter_base=base)
        self._sync_counters(state)
        return state

    def _peak(self, score: torch.Tensor) -> tuple[float, float, float]:
        h, w = score.shape
        idx = int(torch.argmax(score))
        py, px = divmod(idx, w)
        peak = float(score[py, px])
        dx = dy = 0.0
        if self.cfg.track.subpixel:
            # parabola through the peak and its two neighbours along each axis
            if 0 < px < w - 1:
                l, c, r = float(score[py, px - 1]), peak, float(score[py, px + 1])
                den = l - 2 * c + r
                dx = 0.5 * (l - r) / den if den < 0 else 0.0
            if 0 < py < h - 1:
                u, c, d = float(score[py - 1, px]), peak, float(score[py + 1, px])
                den = u - 2 * c + d
                dy = 0.5 * (u - d) / den if den < 0 else 0.0
        return px + float(np.clip(dx, -0.5, 0.5)), py + float(np.clip(dy, -0.5, 0.5)), peak

    def _refine(self, feat: torch.Tensor, center_crop, size_crop) -> np.ndarray:
        rc = self.cfg.reg
        S = self.cfg.crop.search_size
        w, h = size_crop
        seeds = _SEEDS[:max(rc.refine_candidates, 1)]
        init = np.stack([to_param((center_crop[0] + dx * w, center_crop[1] + dy * h, w * sw, h * sh), S)
                         for dx, dy, sw, sh in seeds])
        y0 = torch.as_tensor(init, dtype=self.dtype)

        def score_fn(y):
            return self.net.scorer(feat, y)

        best_y, best_s = refine_box(score_fn, y0, rc.refine_steps, rc.refine_step_size, S)
        top = torch.argsort(best_s, descending=True)[:3]
        boxes = from_param(best_y[top].detach().double().numpy(), S)
        return boxes.mean(0)

    @torch.no_grad()
    def step(self, state: TrackState, frame: np.ndarray) -> tuple[TrackState, np.ndarray]:
        cfg = self.cfg
        stride = self.net.backbone.stride
        window = crop_window(state.box, cfg.crop.search_area_factor, cfg.crop.search_size)
        crop = image_to_tensor(extract_crop(frame, window)).to(self.dtype)
        feat = self.net.backbone(crop)[0]
        score = score_map(feat, state.target.g)
        fx, fy, peak = self._peak(score)
        low_conf = peak < cfg.track.low_confidence * state.init_peak

        H, W = state.image_size
        if low_conf:
            box = state.box.copy()
        else:
            center = np.array([(fx + 0.5) * stride, (fy + 0.5) * stride])
            prev = window.to_crop(state.box)
            with torch.enable_grad():
                refined = self._refine(feat, center, prev[2:])
            lr = cfg.track.size_lr
            size = prev[2:] * (1 - lr) + refined[2:] * lr
            box = window.to_image(np.array([refined[0], refined[1], size[0], size[1]]))
            box = clip_box(box, W, H)
            label = gaussian_label(window.to_crop(box)[:2], stride, tuple(score.shape),
                                   cfg.cls.sigma, self.dtype)
            maybe_update_target_model(state.target, feat, label, score, cfg.cls)

        state.box = box
        state.window = window
        state.frame_index += 1
        state.history.append({"frame": state.frame_index, "peak": peak, "low_confidence": bool(low_conf)})
        self._sync_counters(state)
        return state, box.copy()


def track_sequence(tracker: Tracker, frames, box0) -> tuple[list[np.ndarray], list[float]]:
    """One-pass run: init on frame 0 (its output is the annotation itself)."""
    state = tracker.init(frames[0], box0)
    boxes = [np.asarray(box0, dtype=np.float64).copy()]
    scores = [1.0]
    for frame in frames[1:]:
        state, box = tracker.step(state, frame)
        boxes.append(box)
        scores.append(state.history[-1]["peak"] / max(state.init_peak, 1e-12))
    tracker.last_state = state
    return boxes, scores


def write_results(path: str | Path, boxes, scores) -> None:
    """One line per frame: ``x y w h score`` (top-left convention)."""
    with open(path, "w") as fh:
        for box, s in zip(boxes, scores):
            x, y, w, h = (float(v) for v in cxcywh_to_xywh(box))
            fh.write(f"{x!r} {y!r} {w!r} {h!r} {float(s)!r}\n")
