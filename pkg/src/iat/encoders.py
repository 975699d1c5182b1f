"""Shared template/search feature extractor and its momentum-averaged twin."""

from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .config import BackboneConfig
from .geometry import ContractError


class Encoder(nn.Module):
    """Small strided CNN: 3x3 conv blocks, ReLU between blocks, linear last block."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = 3
        for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            layers.append(nn.Conv2d(in_ch, width, 3, stride=stride, padding=1))
            if i < len(cfg.widths) - 1:
                layers.append(nn.ReLU(inplace=False))
            in_ch = width
        self.body = nn.Sequential(*layers)
        self.out_channels = cfg.out_channels
        self.stride = cfg.stride
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def final_layer(self) -> nn.Conv2d:
        return self.body[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ContractError(f"expected N x 3 x H x W images, got {tuple(images.shape)}")
        # centre [0, 1] pixels and bring them to roughly unit scale
        return self.body((images - 0.5) * 4.0)

    def output_size(self, size: int) -> int:
        for s in self.cfg.strides:
            size = (size + 2 - 3) // s + 1
        return size


class EncoderSet(nn.Module):
    """The template extractor f1 and search extractor f2, one weight storage."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.backbone = Encoder(cfg)

    @property
    def f1(self) -> Encoder:
        return self.backbone

    @property
    def f2(self) -> Encoder:
        return self.backbone


class MemoryEncoder(nn.Module):
    """Frozen copy of an :class:`Encoder` that only moves by momentum updates."""

    def __init__(self, encoder: Encoder, momentum: float):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"momentum coefficient must lie in [0, 1], got {momentum}")
        self.net = copy.deepcopy(encoder)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.momentum = float(momentum)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)


def extract_features(encoder: nn.Module, images: torch.Tensor,
                     expected_size: int | None = None) -> torch.Tensor:
    """Run ``encoder`` on ``N x 3 x S x S`` crops, checking the configured crop size."""
    if expected_size is not None and tuple(images.shape[-2:]) != (expected_size, expected_size):
        raise ContractError(
            f"crop must be {expected_size}x{expected_size}, got {tuple(images.shape[-2:])}")
    return encoder(images)


def init_memory_encoder(encoder: Encoder, momentum: float) -> MemoryEncoder:
    return MemoryEncoder(encoder, momentum)


@torch.no_grad()
def momentum_update(memory: MemoryEncoder, encoder: Encoder) -> MemoryEncoder:
    """``p_mem <- m * p_mem + (1 - m) * p_enc`` for every parameter, in place."""
    mem_params = dict(memory.net.named_parameters())
    enc_params = dict(encoder.named_parameters())
    if mem_params.keys() != enc_params.keys():
        raise ContractError("memory encoder and encoder have different parameter sets")
    m = memory.momentum
    for name, p_mem in mem_params.items():
        p_enc = enc_params[name]
        if p_mem.shape != p_enc.shape:
            raise ContractError(f"shape mismatch for {name}: {tuple(p_mem.shape)} vs {tuple(p_enc.shape)}")
        p_mem.mul_(m).add_(p_enc.detach(), alpha=1.0 - m)
    return memory
