"""Probabilistic box regression trained with a KL objective against a label-noise model.

Boxes are parameterized as ``y = (cx/S, cy/S, log(w/S), log(h/S))`` for a
search crop of side ``S``.  The predictive density over boxes is represented
by a scorer ``s(y, x)`` and approximated on a finite candidate set by
self-normalized importance sampling.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .geometry import ContractError, roi_align

UNIFORM_LOG_SIZE = (math.log(0.1), math.log(1.0))


class NumericError(ArithmeticError):
    pass


def to_param(box, crop_size: float) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    return np.array([cx / crop_size, cy / crop_size,
                     math.log(w / crop_size), math.log(h / crop_size)])


def from_param(y, crop_size: float):
    """Inverse of :func:`to_param`; works on numpy arrays and (differentiably) on tensors."""
    if isinstance(y, torch.Tensor):
        return torch.cat([y[..., :2] * crop_size, torch.exp(y[..., 2:]) * crop_size], dim=-1)
    y = np.asarray(y, dtype=np.float64)
    return np.concatenate([y[..., :2] * crop_size, np.exp(y[..., 2:]) * crop_size], axis=-1)


class BoxScorer(nn.Module):
    """IoU-Net style head: ROI-align the box, two fully connected layers, one score.

    Besides the box itself the head pools a ``context``-times larger box
    with the same center, so it can see where the object's edges fall
    relative to the candidate's.
    """

    def __init__(self, channels: int, crop_size: int, stride: int = 8,
                 pool_size: int = 3, hidden: int = 128, context: float = 2.0):
        super().__init__()
        self.crop_size = crop_size
        self.stride = stride
        self.pool_size = pool_size
        self.context = context
        self.fc1 = nn.Linear(2 * channels * pool_size ** 2 + 2, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, features: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """``C x h x w`` features and ``M x 4`` box parameters to ``M`` scores."""
        boxes = from_param(y, self.crop_size)
        outer = torch.cat([boxes[:, :2], boxes[:, 2:] * self.context], dim=1)
        inner = roi_align(features, boxes, self.pool_size, self.stride).flatten(1)
        ctx = roi_align(features, outer, self.pool_size, self.stride).flatten(1)
        z = torch.cat([inner, ctx, y[:, 2:]], dim=1)
        return self.fc2(torch.relu(self.fc1(z)))[:, 0]


def label_log_density(y: torch.Tensor, y_i: torch.Tensor, sigma_y) -> torch.Tensor:
    """``log N(y; y_i, diag(sigma_y^2))`` for each row of ``y``."""
    sigma = torch.as_tensor(sigma_y, dtype=y.dtype)
    z = (y - y_i) / sigma
    return -0.5 * (z ** 2).sum(-1) - torch.log(sigma).sum() - 2.0 * math.log(2 * math.pi)


def uniform_log_density(y: torch.Tensor) -> torch.Tensor:
    lo, hi = UNIFORM_LOG_SIZE
    inside = ((y[:, :2] >= 0) & (y[:, :2] <= 1)).all(1) & ((y[:, 2:] >= lo) & (y[:, 2:] <= hi)).all(1)
    logd = -2.0 * math.log(hi - lo)
    out = torch.full((y.shape[0],), -math.inf, dtype=y.dtype)
    out[inside] = logd
    return out


def sample_candidates(y_i, sigma_y, M: int, rng: np.random.Generator,
                      dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``M`` boxes from ``0.5 * N(y_i, sigma_y^2) + 0.5 * Uniform``.

    The first ``M // 2`` rows come from the Gaussian component.  Returns the
    candidates and the log proposal density of each.
    """
    if M < 2:
        raise ContractError(f"need at least 2 candidates, got {M}")
    y_i = np.asarray(y_i, dtype=np.float64)
    sigma = np.asarray(sigma_y, dtype=np.float64)
    n_gauss = M // 2
    gauss = y_i + sigma * rng.standard_normal((n_gauss, 4))
    lo, hi = UNIFORM_LOG_SIZE
    unif = np.concatenate([rng.uniform(0, 1, (M - n_gauss, 2)),
                           rng.uniform(lo, hi, (M - n_gauss, 2))], axis=1)
    cands = torch.as_tensor(np.concatenate([gauss, unif]), dtype=torch.float64)
    yt = torch.as_tensor(y_i, dtype=torch.float64)
    log_q = torch.logaddexp(label_log_density(cands, yt, sigma), uniform_log_density(cands)) - math.log(2)
    return cands.to(dtype), log_q.to(dtype)


def predictive_logits(scorer: nn.Module, features: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    logits = scorer(features, candidates)
    bad = torch.nonzero(~torch.isfinite(logits.detach()))
    if len(bad):
        raise NumericError(f"non-finite box score at candidate index {int(bad[0])}")
    return logits


def predictive_distribution(logits: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Self-normalized estimate of the predictive density on the candidates."""
    return torch.softmax(logits - log_q, dim=-1)


def kl_cross_entropy(logits: torch.Tensor, log_q: torch.Tensor, log_p_label: torch.Tensor) -> torch.Tensor:
    """``-sum_j w_j log p_hat_j`` with ``w`` the normalized label weights.

    Equal to the KL divergence from the label distribution to the
    predictive one, up to the (parameter-free) entropy of the labels.
    """
    weights = torch.softmax(log_p_label - log_q, dim=-1)
    log_p_hat = torch.log_softmax(logits - log_q, dim=-1)
    return -(weights * log_p_hat).sum(-1)


def reg_loss(scorer: nn.Module, features: torch.Tensor, y_i, sigma_y, M: int,
             rng: np.random.Generator, candidates=None) -> torch.Tensor:
    """Monte-Carlo KL loss for one sample; pass ``candidates=(y, log_q)`` to fix the draw."""
    dtype = features.dtype
    if candidates is None:
        candidates = sample_candidates(y_i, sigma_y, M, rng, dtype)
    cands, log_q = candidates
    logits = predictive_logits(scorer, features, cands)
    log_p = label_log_density(cands, torch.as_tensor(np.asarray(y_i), dtype=dtype), sigma_y)
    return kl_cross_entropy(logits, log_q, log_p)


def clip_param(y: torch.Tensor, crop_size: float) -> torch.Tensor:
    lo = math.log(2.0 / crop_size)
    return torch.cat([y[..., :2].clamp(0.0, 1.0), y[..., 2:].clamp(lo, 0.0)], dim=-1)


def refine_box(score_fn, y_init, steps: int, step_size: float,
               crop_size: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient ascent on ``score_fn`` from ``y_init``, keeping the best iterate per row.

    ``score_fn`` maps an ``M x 4`` tensor to ``M`` scores (rows independent).
    Returns ``(best_y, best_score)``; the best score is never below the
    initial one.
    """
    y = torch.as_tensor(y_init).detach().clone()
    step_size = torch.as_tensor(step_size, dtype=y.dtype)
    single = y.dim() == 1
    if single:
        y = y[None]
    with torch.no_grad():
        best_y = y.clone()
        best_s = score_fn(y).detach().clone()
    for _ in range(steps):
        y = y.detach().requires_grad_(True)
        s = score_fn(y)
        (grad,) = torch.autograd.grad(s.sum(), y)
        with torch.no_grad():
            y = y + step_size * grad
            if crop_size is not None:
                y = clip_param(y, crop_size)
            s_new = score_fn(y)
            better = s_new > best_s
            best_y[better] = y[better]
            best_s[better] = s_new[better]
    if single:
        return best_y[0], best_s[0]
    return best_y, best_s
