"""Target classification: filter prediction, correlation scoring and the online target model."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ClsConfig, CropConfig
from .geometry import (ContractError, box_to_cells, crop_window, extract_crop,
                       image_to_tensor, roi_pool)


class FilterPredictor(nn.Module):
    """Target model G: pools the template box into ``k x k`` cells, then mixes channels.

    Bias-free, so all-zero template features give an all-zero filter.
    """

    def __init__(self, channels: int, filter_size: int = 5, stride: int = 8):
        super().__init__()
        self.filter_size = filter_size
        self.stride = stride
        self.mix = nn.Conv2d(channels, channels, 1, bias=False)
        with torch.no_grad():
            nn.init.dirac_(self.mix.weight)
            self.mix.weight.add_(torch.randn_like(self.mix.weight) * 0.1)
        # fixed output scale: roughly unit scores for unit-scale features while
        # the weights themselves stay O(1) for the optimizer
        self.scale = 1.0 / (filter_size ** 2 * channels)

    def forward(self, template_features: torch.Tensor, template_boxes) -> torch.Tensor:
        """``N x C x h x w`` features and N pixel boxes to ``N x C x k x k`` filters."""
        if template_features.dim() == 3:
            return self.forward(template_features[None], [template_boxes])[0]
        _, _, h, w = template_features.shape
        pooled = []
        for feat, box in zip(template_features, template_boxes):
            cells = box_to_cells(box, self.stride, h, w)
            if (cells[2] - cells[0]) * (cells[3] - cells[1]) <= 1:
                raise ContractError(f"template box {box} covers at most one feature cell")
            pooled.append(roi_pool(feat, cells, self.filter_size, mode="avg"))
        return self.mix(torch.stack(pooled)) * self.scale


def predict_filter(predictor: FilterPredictor, template_features, template_box) -> torch.Tensor:
    return predictor(template_features, template_box)


def score_map(search_features: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Zero-padded correlation of features with filter(s); output keeps the input size.

    Accepts a single ``C x h x w`` / ``C x k x k`` pair or batches ``N x ...``
    (one filter per sample, or one filter broadcast over the batch).
    """
    single = search_features.dim() == 3
    feats = search_features[None] if single else search_features
    filt = g[None] if g.dim() == 3 else g
    N, C, h, w = feats.shape
    if filt.shape[1] != C:
        raise ContractError(f"filter has {filt.shape[1]} channels, features have {C}")
    k = filt.shape[-1]
    if k % 2 == 0:
        raise ContractError("filter size must be odd")
    if filt.shape[0] == 1 and N > 1:
        out = F.conv2d(feats, filt, padding=k // 2)[:, 0]
    else:
        if filt.shape[0] != N:
            raise ContractError(f"{filt.shape[0]} filters for {N} samples")
        out = F.conv2d(feats.reshape(1, N * C, h, w), filt, padding=k // 2, groups=N)[0]
    return out[0] if single else out


_BORDER_EPS = 1e-6


def gaussian_label(center, stride: int, size: tuple[int, int], sigma: float = 1.0,
                   dtype=torch.float32) -> torch.Tensor:
    """Gaussian confidence map peaked at the feature cell holding pixel ``center``.

    Cell ``j`` spans pixels ``[j*stride, (j+1)*stride)``, so a center lying
    exactly on a cell border belongs to the cell on its right/below; the tiny
    offset keeps the argmax unique in that case.
    """
    h, w = size
    u = center[0] / stride - 0.5 + _BORDER_EPS
    v = center[1] / stride - 0.5 + _BORDER_EPS
    xs = torch.arange(w, dtype=torch.float64)
    ys = torch.arange(h, dtype=torch.float64)
    g = torch.exp(-((xs[None, :] - u) ** 2 + (ys[:, None] - v) ** 2) / (2 * sigma ** 2))
    return g.to(dtype)


def cls_loss_terms(scores: torch.Tensor, labels: torch.Tensor, g: torch.Tensor,
                   reg_factor: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Data term (mean over samples of squared map error) and filter regularizer."""
    if scores.dim() == 2:
        scores, labels = scores[None], labels[None]
    if scores.shape[0] == 0:
        raise ContractError("classification loss needs at least one sample")
    if scores.shape != labels.shape:
        raise ContractError(f"score/label shape mismatch {tuple(scores.shape)} vs {tuple(labels.shape)}")
    data = ((scores - labels) ** 2).flatten(1).sum(1).mean()
    filt = g[None] if g.dim() == 3 else g
    reg = ((reg_factor * filt) ** 2).flatten(1).sum(1).mean()
    return data, reg


def cls_loss(scores, labels, g, reg_factor: float) -> torch.Tensor:
    data, reg = cls_loss_terms(scores, labels, g, reg_factor)
    return data + reg


@torch.no_grad()
def steepest_descent(g: torch.Tensor, features: torch.Tensor, labels: torch.Tensor,
                     reg_factor: float, steps: int) -> tuple[torch.Tensor, list[float]]:
    """Fit a single filter to ``S`` samples by steepest descent with exact line search.

    The loss is quadratic in ``g``, so the optimal step along the negative
    gradient has a closed form; each iterate therefore never increases it.
    """
    g = g.clone()
    history = []
    lam2 = reg_factor ** 2
    S = features.shape[0]
    for _ in range(steps):
        with torch.enable_grad():
            gv = g.clone().requires_grad_(True)
            data, reg = cls_loss_terms(score_map(features, gv), labels, gv, reg_factor)
            loss = data + reg
            (grad,) = torch.autograd.grad(loss, gv)
        history.append(float(loss))
        gnorm2 = float((grad ** 2).sum())
        if gnorm2 == 0.0:
            break
        curv = float((score_map(features, grad) ** 2).sum()) / S + lam2 * gnorm2
        if curv <= 0.0:
            break
        g = g - (gnorm2 / (2.0 * curv)) * grad
    data, reg = cls_loss_terms(score_map(features, g), labels, g, reg_factor)
    history.append(float(data + reg))
    return g, history


def peak_ratio(score: torch.Tensor, radius: int) -> tuple[float, tuple[int, int]]:
    """Secondary-to-primary peak ratio; the secondary peak lies beyond ``radius`` cells."""
    h, w = score.shape
    idx = int(torch.argmax(score))
    py, px = divmod(idx, w)
    primary = float(score[py, px])
    ys = torch.arange(h)[:, None]
    xs = torch.arange(w)[None, :]
    outside = (ys - py) ** 2 + (xs - px) ** 2 > radius ** 2
    if primary <= 0 or not bool(outside.any()):
        return 0.0, (py, px)
    secondary = float(score[outside].max())
    return max(secondary, 0.0) / primary, (py, px)


# -- online target model ----------------------------------------------------

AUGMENTATIONS = ("flip", "shift+x", "shift-x", "shift+y", "shift-y", "blur")
SHIFT_PX = 8


@dataclass
class TargetModel:
    g: torch.Tensor
    features: list[torch.Tensor] = field(default_factory=list)
    labels: list[torch.Tensor] = field(default_factory=list)
    filters: list[torch.Tensor] = field(default_factory=list)
    fit_history: list[float] = field(default_factory=list)
    updates: int = 0

    @property
    def size(self) -> int:
        return len(self.features)


def augmented_crops(frame: np.ndarray, box, crop: CropConfig, count: int):
    """Base search crop plus ``count`` augmented variants; yields ``(image, crop_box)``."""
    window = crop_window(box, crop.search_area_factor, crop.search_size)
    base = extract_crop(frame, window)
    base_box = window.to_crop(box)
    out = [(base, base_box)]
    for i in range(count):
        kind = AUGMENTATIONS[i % len(AUGMENTATIONS)]
        if kind == "flip":
            b = base_box.copy()
            b[0] = crop.search_size - b[0]
            out.append((np.ascontiguousarray(base[:, ::-1]), b))
        elif kind == "blur":
            out.append((cv2.GaussianBlur(base, (5, 5), 1.0), base_box.copy()))
        else:
            sign = 1.0 if kind[5] == "+" else -1.0
            axis = 0 if kind[6] == "x" else 1
            shift = [0.0, 0.0]
            # move the window by SHIFT_PX crop pixels (scaled to image pixels)
            shift[axis] = sign * SHIFT_PX / window.scale
            win = crop_window(box, crop.search_area_factor, crop.search_size, shift=tuple(shift))
            out.append((extract_crop(frame, win), win.to_crop(box)))
    return out


@torch.no_grad()
def init_target_model(encoder: nn.Module, predictor: FilterPredictor, frame: np.ndarray,
                      box, cfg: ClsConfig, crop: CropConfig) -> TargetModel:
    """Build the initial training set from the first frame and fit the filter to it."""
    twin = crop_window(box, crop.template_area_factor, crop.template_size)
    template = image_to_tensor(extract_crop(frame, twin))
    dtype = next(predictor.parameters()).dtype
    g0 = predictor(encoder(template.to(dtype)), [twin.to_crop(box)])[0]

    crops = augmented_crops(frame, box, crop, cfg.augmentation_count)
    feats = encoder(image_to_tensor([c for c, _ in crops]).to(dtype))
    stride = encoder.stride
    size = tuple(feats.shape[-2:])
    labels = torch.stack([gaussian_label(b[:2], stride, size, cfg.sigma, dtype) for _, b in crops])
    g, history = steepest_descent(g0, feats, labels, cfg.reg_factor, cfg.inner_steps)
    return TargetModel(
        g=g,
        features=list(feats),
        labels=list(labels),
        filters=[g.clone() for _ in crops],
        fit_history=history,
    )


@torch.no_grad()
def maybe_update_target_model(model: TargetModel, features: torch.Tensor, label: torch.Tensor,
                              score: torch.Tensor, cfg: ClsConfig) -> tuple[TargetModel, bool]:
    """Add the sample and refit when the latest score map shows a distractor peak."""
    ratio, _ = peak_ratio(score, cfg.peak_exclusion_radius)
    if ratio <= cfg.peak_ratio:
        return model, False
    fitted, _ = steepest_descent(model.g, features[None], label[None],
                                 cfg.reg_factor, cfg.inner_steps)
    model.features.append(features)
    model.labels.append(label)
    model.filters.append(fitted)
    while len(model.features) > cfg.max_set_size:
        model.features.pop(0)
        model.labels.pop(0)
        model.filters.pop(0)
    model.g = torch.stack(model.filters).mean(0)
    model.updates += 1
    return model, True
