"""Instance classification: boosting head, FIFO key bank and the contrastive loss."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .geometry import ContractError, box_to_cells, roi_pool

VIDEO = "video"
OBJECT = "object"
SHARED = "shared"
SEPARATED = "separated"


class InstanceBoostingModule(nn.Module):
    """3x3 conv halving the channels, pooling, then two FC layers (batch-normalized hidden) to the embedding.

    ``variant="video"`` pools the whole map globally; ``variant="object"``
    max-pools the target box into an ``F x F`` grid.  ``calls`` counts
    forward passes so inference code can prove it never touches the head.
    """

    def __init__(self, channels: int, variant: str = OBJECT, roi_size: int = 3,
                 embed_dim: int = 128, hidden: int = 256, stride: int = 8,
                 global_pool: str = "avg"):
        super().__init__()
        if variant not in (VIDEO, OBJECT):
            raise ConfigError(f"unknown boosting variant {variant!r}")
        self.variant = variant
        self.roi_size = roi_size
        self.stride = stride
        self.global_pool = global_pool
        self.embed_dim = embed_dim
        reduced = channels // 2
        self.reduce = nn.Conv2d(channels, reduced, 3, padding=1)
        cells = 1 if variant == VIDEO else roi_size ** 2
        self.fc1 = nn.Linear(reduced * cells, hidden)
        self.norm = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)
        nn.init.kaiming_normal_(self.reduce.weight, nonlinearity="relu")
        nn.init.kaiming_normal_(self.fc1.weight, nonlinearity="relu")
        for m in (self.reduce, self.fc1, self.fc2):
            nn.init.zeros_(m.bias)
        self.calls = 0

    def reduced(self, features: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.reduce(features))

    def pool(self, reduced: torch.Tensor, boxes=None) -> torch.Tensor:
        """``N x C/2 x h x w`` to flat pooled vectors ``N x D``."""
        if self.variant == VIDEO:
            if self.global_pool == "avg":
                return reduced.mean(dim=(2, 3))
            return reduced.amax(dim=(2, 3))
        if boxes is None:
            raise ContractError("object-level boosting needs a target box")
        _, _, h, w = reduced.shape
        out = [roi_pool(r, box_to_cells(b, self.stride, h, w), self.roi_size, "max")
               for r, b in zip(reduced, boxes)]
        return torch.stack(out).flatten(1)

    def pool_frame(self, reduced: torch.Tensor) -> torch.Tensor:
        """Whole-map ``F x F`` max pooling, used as the video path of fused heads."""
        return F.adaptive_max_pool2d(reduced, self.roi_size).flatten(1)

    def head(self, pooled: torch.Tensor) -> torch.Tensor:
        hidden = self.fc1(pooled)
        if self.training and hidden.shape[0] == 1:
            # batch statistics are undefined for one sample; use the running ones
            n = self.norm
            hidden = F.batch_norm(hidden, n.running_mean, n.running_var, n.weight, n.bias,
                                  False, 0.0, n.eps)
        else:
            hidden = self.norm(hidden)
        return self.fc2(torch.relu(hidden))

    def forward(self, features: torch.Tensor, boxes=None) -> torch.Tensor:
        self.calls += 1
        single = features.dim() == 3
        if single:
            features = features[None]
            boxes = None if boxes is None else [boxes]
        out = self.head(self.pool(self.reduced(features), boxes))
        return out[0] if single else out


def ibm_forward(psi: InstanceBoostingModule, features: torch.Tensor, box=None) -> torch.Tensor:
    return psi(features, box)


def fused_forward(psi_v: InstanceBoostingModule, psi_o: InstanceBoostingModule,
                  features: torch.Tensor, boxes, mode: str,
                  path_weights: tuple[float, float] = (1.0, 1.0)) -> torch.Tensor:
    """Sum of a frame-level and a box-level embedding.

    ``shared`` runs both granularities through ``psi_o`` (``psi_v`` is
    ignored); ``separated`` uses ``psi_v`` for the frame and ``psi_o`` for the
    box.  Both heads are object-type modules with the same ``F x F`` input.
    """
    single = features.dim() == 3
    if single:
        features, boxes = features[None], [boxes]
    if mode == SHARED:
        frame_mod = psi_o
    elif mode == SEPARATED:
        frame_mod = psi_v
    else:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    frame_mod.calls += 1
    psi_o.calls += 1
    v = frame_mod.head(frame_mod.pool_frame(frame_mod.reduced(features)))
    o = psi_o.head(psi_o.pool(psi_o.reduced(features), boxes))
    out = path_weights[0] * v + path_weights[1] * o
    return out[0] if single else out


class MemoryBank:
    """Bounded FIFO of unit-norm keys, each tagged with the video it came from.

    Keys live in a ring buffer; ``keys()``/``tags()`` return them oldest
    first.  ``reads``/``writes`` count accesses for the inference silence check.
    """

    RANDOM_TAG = -1

    def __init__(self, capacity: int, dim: int = 128, init: str = "random",
                 seed: int = 0, dtype=torch.float32):
        if capacity < 0:
            raise ConfigError("memory bank capacity must be >= 0")
        self.capacity = capacity
        self.dim = dim
        self._keys = torch.zeros(capacity, dim, dtype=dtype)
        self._tags = torch.full((capacity,), self.RANDOM_TAG, dtype=torch.long)
        self._ptr = 0
        self._size = 0
        self.reads = 0
        self.writes = 0
        if init == "random" and capacity > 0:
            gen = torch.Generator().manual_seed(seed)
            self._keys = F.normalize(torch.randn(capacity, dim, generator=gen, dtype=torch.float64), dim=1).to(dtype)
            self._size = capacity
        elif init not in ("random", "empty"):
            raise ConfigError(f"unknown bank init {init!r}")

    def __len__(self) -> int:
        return self._size

    def _order(self) -> torch.Tensor:
        start = (self._ptr - self._size) % max(self.capacity, 1)
        return (torch.arange(self._size) + start) % max(self.capacity, 1)

    def keys(self) -> torch.Tensor:
        self.reads += 1
        return self._keys[self._order()].clone()

    def tags(self) -> torch.Tensor:
        return self._tags[self._order()].clone()

    def enqueue(self, key: torch.Tensor, tag: int) -> None:
        self.writes += 1
        if self.capacity == 0:
            return
        key = key.detach()
        if not bool(torch.isfinite(key).all()):
            raise ContractError("refusing to enqueue a non-finite key")
        self._keys[self._ptr] = key.to(self._keys.dtype)
        self._tags[self._ptr] = int(tag)
        self._ptr = (self._ptr + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def state(self) -> dict[str, np.ndarray]:
        order = self._order()
        return {"keys": self._keys[order].numpy().copy(),
                "tags": self._tags[order].numpy().copy()}

    def load_state(self, keys: np.ndarray, tags: np.ndarray) -> None:
        n = len(keys)
        if n > self.capacity or len(tags) != n or (n and keys.shape[1] != self.dim):
            raise ContractError("bank state does not fit this bank")
        self._keys = torch.zeros(self.capacity, self.dim, dtype=self._keys.dtype)
        self._tags = torch.full((self.capacity,), self.RANDOM_TAG, dtype=torch.long)
        if n:
            self._keys[:n] = torch.as_tensor(keys, dtype=self._keys.dtype)
            self._tags[:n] = torch.as_tensor(tags, dtype=torch.long)
        self._size = n
        self._ptr = n % max(self.capacity, 1)


def enqueue_dequeue(bank: MemoryBank, k_plus: torch.Tensor, video_id: int) -> MemoryBank:
    bank.enqueue(k_plus, video_id)
    return bank


def select_negatives(bank: MemoryBank, video_id: int) -> torch.Tensor:
    """All stored keys not tagged with ``video_id``, oldest first."""
    keys = bank.keys()
    if len(keys) == 0:
        return keys
    return keys[bank.tags() != video_id]


def infonce_loss(q: torch.Tensor, k_plus: torch.Tensor, negatives: torch.Tensor,
                 tau: float) -> torch.Tensor:
    """``-log softmax`` of the positive among ``[q.k+, q.k_1, ..., q.k_K] / tau``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    pos = (q * k_plus).sum(-1, keepdim=True)
    neg = negatives.to(q.dtype) @ q if negatives.numel() else q.new_zeros(0)
    logits = torch.cat([pos, neg]) / tau
    return torch.logsumexp(logits, 0) - logits[0]


def uniform_loss(num_negatives: int) -> float:
    """Loss value when every logit is equal."""
    return math.log(num_negatives + 1)
