"""Channel attention driven by an anatomical mask.

The module sees two views of the feature map: the original F and a masked
copy F_m = F * M, with the mask broadcast over channels. Four per-channel
descriptors (average and max pooling of each view) pass through independent
1x1 conv blocks, are summed, and a final sigmoid block turns the sum into
channel weights W. The output blends the views per channel:

    A = W * F + (1 - W) * F_m

so a channel with weight 1 keeps the full map and a channel with weight 0
sees only the masked region. With M = 1 everywhere the module is exactly
the identity regardless of its parameters.
"""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F
from dataclasses import dataclass


def apply_mask(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """F_m = F * M with M broadcast over the channel dimension."""
    if features.ndim != 4:
        raise ValueError(f"features must be (B, C, H, W), got shape {tuple(features.shape)}")
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ValueError(f"mask must be (B, 1, H, W), got shape {tuple(mask.shape)}")
    if mask.shape[0] != features.shape[0] or mask.shape[2:] != features.shape[2:]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match features "
            f"{tuple(features.shape)}"
        )
    return features * mask


def pool_descriptors(features: torch.Tensor, masked: torch.Tensor):
    """Per-channel (avg_F, max_F, avg_Fm, max_Fm), each (B, C, 1, 1)."""
    f_avg = features.mean(dim=(2, 3), keepdim=True)
    f_max = features.amax(dim=(2, 3), keepdim=True)
    m_avg = masked.mean(dim=(2, 3), keepdim=True)
    m_max = masked.amax(dim=(2, 3), keepdim=True)
    return f_avg, f_max, m_avg, m_max


def attend(features: torch.Tensor, masked: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Convex per-channel blend of the two views."""
    return weight * features + (1.0 - weight) * masked


class ConvBlock(nn.Module):
    """1x1 conv + batch norm + activation on (B, C, 1, 1) descriptors."""

    def __init__(self, in_channels: int, out_channels: int, activation: str = "leaky_relu"):
        super().__init__()
        if activation not in ("leaky_relu", "sigmoid"):
            raise ValueError(f"unknown activation {activation!r}")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.bn(self.conv(x))
        if self.activation == "leaky_relu":
            return F.leaky_relu(x, negative_slope=0.2)
        return torch.sigmoid(x)


@dataclass
class AttentionOutput:
    attention: torch.Tensor  # (B, C, H, W)
    weight: torch.Tensor  # (B, C, 1, 1)
    masked: torch.Tensor  # (B, C, H, W)


class APAM(nn.Module):
    """Anatomy-prior attention over a feature map.

    Four descriptor branches (avg/max of the plain and masked views) each
    get their own conv block; their sum goes through a sigmoid conv block
    that emits the per-channel blend weights.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        hidden = hidden if hidden is not None else max(channels // 16, 8)
        self.channels = channels
        self.hidden = hidden
        self.branch_avg = ConvBlock(channels, hidden)
        self.branch_max = ConvBlock(channels, hidden)
        self.branch_masked_avg = ConvBlock(channels, hidden)
        self.branch_masked_max = ConvBlock(channels, hidden)
        self.fuse = ConvBlock(hidden, channels, activation="sigmoid")

    def channel_weights(self, features: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        f_avg, f_max, m_avg, m_max = pool_descriptors(features, masked)
        summed = (
            self.branch_avg(f_avg)
            + self.branch_max(f_max)
            + self.branch_masked_avg(m_avg)
            + self.branch_masked_max(m_max)
        )
        return self.fuse(summed)

    def forward(self, features: torch.Tensor, mask: torch.Tensor) -> AttentionOutput:
        if features.shape[1] != self.channels:
            raise ValueError(
                f"module was built for {self.channels} channels, got {features.shape[1]}"
            )
        if self.training and features.shape[0] == 1:
            # batch norm over a single (B, C, 1, 1) descriptor has zero
            # variance and a useless gradient
            raise RuntimeError(
                "attention batch norm needs batch size >= 2 in training mode"
            )
        masked = apply_mask(features, mask)
        weight = self.channel_weights(features, masked)
        if not torch.isfinite(weight).all():
            raise RuntimeError("attention produced non-finite channel weights")
        return AttentionOutput(
            attention=attend(features, masked, weight), weight=weight, masked=masked
        )
