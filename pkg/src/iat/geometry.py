"""Box conventions, crop extraction and region pooling shared by all branches.

Boxes are ``(cx, cy, w, h)`` in pixels unless a function says otherwise.
The evaluation/result files use the top-left ``(x, y, w, h)`` convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F


class ContractError(ValueError):
    """Raised when an operation's input precondition is violated."""


def cxcywh_to_xywh(box) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    return np.array([cx - w / 2, cy - h / 2, w, h])


def xywh_to_cxcywh(box) -> np.ndarray:
    x, y, w, h = np.asarray(box, dtype=np.float64)
    return np.array([x + w / 2, y + h / 2, w, h])


def clip_box(box, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip a ``(cx, cy, w, h)`` box to the frame, keeping a positive area."""
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    w = float(np.clip(w, min_size, width))
    h = float(np.clip(h, min_size, height))
    cx = float(np.clip(cx, w / 2, width - w / 2))
    cy = float(np.clip(cy, h / 2, height - h / 2))
    return np.array([cx, cy, w, h])


@dataclass(frozen=True)
class CropWindow:
    """A square image window ``side`` pixels wide, resampled to ``out_size``."""

    cx: float
    cy: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_crop(self, box) -> np.ndarray:
        cx, cy, w, h = np.asarray(box, dtype=np.float64)
        s = self.scale
        return np.array([
            (cx - self.cx) * s + self.out_size / 2,
            (cy - self.cy) * s + self.out_size / 2,
            w * s,
            h * s,
        ])

    def to_image(self, box) -> np.ndarray:
        cx, cy, w, h = np.asarray(box, dtype=np.float64)
        s = self.scale
        return np.array([
            (cx - self.out_size / 2) / s + self.cx,
            (cy - self.out_size / 2) / s + self.cy,
            w / s,
            h / s,
        ])


def crop_window(box, area_factor: float, out_size: int,
                shift=(0.0, 0.0), scale: float = 1.0) -> CropWindow:
    """Square window of ``area_factor`` times the box area around its center."""
    _, _, w, h = box
    side = math.sqrt(area_factor * w * h) * scale
    return CropWindow(float(box[0] + shift[0]), float(box[1] + shift[1]), side, out_size)


def extract_crop(image: np.ndarray, window: CropWindow) -> np.ndarray:
    """Resample ``window`` out of an ``H x W x 3`` float image (edges replicated)."""
    s = window.scale
    # pixel-center aligned affine map from image to crop coordinates
    tx = window.out_size / 2 - window.cx * s + 0.5 * s - 0.5
    ty = window.out_size / 2 - window.cy * s + 0.5 * s - 0.5
    M = np.array([[s, 0.0, tx], [0.0, s, ty]], dtype=np.float64)
    interp = cv2.INTER_AREA if s < 1 else cv2.INTER_LINEAR
    out = cv2.warpAffine(np.ascontiguousarray(image, dtype=np.float32), M,
                         (window.out_size, window.out_size),
                         flags=interp, borderMode=cv2.BORDER_REPLICATE)
    return out


def image_to_tensor(images) -> torch.Tensor:
    """``[N x] H x W x 3`` float array(s) to an ``N x 3 x H x W`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def box_to_cells(box, stride: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Feature-cell span ``(x0, y0, x1, y1)`` (end exclusive) covered by a pixel box.

    A cell ``j`` covers pixels ``[j*stride, (j+1)*stride)``.  The span is
    clipped to the map; an empty intersection raises ContractError.
    """
    cx, cy, w, h = [float(v) for v in box]
    x0 = math.floor((cx - w / 2) / stride + 1e-9)
    y0 = math.floor((cy - h / 2) / stride + 1e-9)
    x1 = math.ceil((cx + w / 2) / stride - 1e-9)
    y1 = math.ceil((cy + h / 2) / stride - 1e-9)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        raise ContractError(f"box {box} does not intersect the {height}x{width} feature map")
    return x0, y0, x1, y1


def _bins(start: int, n: int, out: int) -> list[tuple[int, int]]:
    return [(start + (i * n) // out, start + -((-(i + 1) * n) // out)) for i in range(out)]


def roi_pool(features: torch.Tensor, cells: tuple[int, int, int, int], size: int,
             mode: str = "max") -> torch.Tensor:
    """Adaptive pooling of a ``C x h x w`` map over an integer cell span into ``C x size x size``.

    Bin ``i`` of an ``n``-cell span covers ``[floor(i*n/size), ceil((i+1)*n/size))``.
    """
    if features.dim() != 3:
        raise ContractError(f"expected C x h x w features, got {tuple(features.shape)}")
    _, h, w = features.shape
    x0, y0, x1, y1 = cells
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        raise ContractError(f"cell span {cells} does not intersect the {h}x{w} map")
    region = features[:, y0:y1, x0:x1]
    if mode == "max":
        return F.adaptive_max_pool2d(region, size)
    if mode == "avg":
        return F.adaptive_avg_pool2d(region, size)
    raise ValueError(f"unknown pooling mode {mode!r}")


def roi_align(features: torch.Tensor, boxes: torch.Tensor, size: int, stride: int,
              samples: int = 2) -> torch.Tensor:
    """Bilinear region pooling, differentiable in both features and box coordinates.

    ``features`` is ``C x h x w``; ``boxes`` is ``M x 4`` pixel ``(cx, cy, w, h)``.
    Each of the ``size x size`` bins averages ``samples x samples`` bilinear taps.
    Returns ``M x C x size x size``.
    """
    C, h, w = features.shape
    n = size * samples
    t = (torch.arange(n, dtype=boxes.dtype, device=boxes.device) + 0.5) / n - 0.5
    cx, cy, bw, bh = boxes.unbind(-1)
    # pixel coordinates of the taps, converted to feature-cell units
    px = (cx[:, None] + t[None, :] * bw[:, None]) / stride - 0.5
    py = (cy[:, None] + t[None, :] * bh[:, None]) / stride - 0.5
    # grid_sample normalized coordinates with align_corners=True
    gx = 2 * px / max(w - 1, 1) - 1
    gy = 2 * py / max(h - 1, 1) - 1
    M = boxes.shape[0]
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    fmap = features.unsqueeze(0).expand(M, C, h, w)
    taps = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return F.avg_pool2d(taps, samples) if samples > 1 else taps
