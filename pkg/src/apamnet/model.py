"""Model assembly: backbone, optional feature pyramid, attention, heads.

The classifier produces one logit per class from a class-specific feature
map, and the same 1x1 head weights reproject that map into a class
activation map for localization, so GAP(cam) + head bias equals the logit
by construction.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import APAM

CHECKPOINT_FORMAT_VERSION = 1

BACKBONES = ("toy_cnn", "densenet121")
FPN_MODES = ("none", "additive", "concat")
ATTENTION_MODES = ("baseline", "roi_only", "prior_only", "prior_and_roi")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a compatible network."""

    backbone: str = "densenet121"
    fpn: str = "none"
    attention: str = "prior_and_roi"
    n_classes: int = 15
    per_class_params: bool = False
    fpn_channels: int = 256
    toy_channels: int = 64
    backbone_weights: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.fpn not in FPN_MODES:
            raise ValueError(f"unknown fpn mode {self.fpn!r}, expected one of {FPN_MODES}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(
                f"unknown attention mode {self.attention!r}, expected one of {ATTENTION_MODES}"
            )
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    @property
    def backbone_channels(self) -> int:
        return 1024 if self.backbone == "densenet121" else self.toy_channels

    @property
    def feature_channels(self) -> int:
        return self.fpn_channels if self.fpn != "none" else self.backbone_channels

    @property
    def feature_hw(self) -> tuple[int, int]:
        # 224 input: stride-16 map when the pyramid is on, stride-32 otherwise
        return (14, 14) if self.fpn != "none" else (7, 7)

    @property
    def needs_roi(self) -> bool:
        return self.attention in ("roi_only", "prior_and_roi")

    @property
    def needs_priors(self) -> bool:
        return self.attention in ("prior_only", "prior_and_roi")


class ToyBackbone(nn.Module):
    """Small from-scratch CNN for CPU experiments; taps at strides 16 and 32."""

    def __init__(self, out_channels: int = 64):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )

        self.stem = block(3, 16)
        self.layer1 = block(16, 32)
        self.layer2 = block(32, 48)
        self.layer3 = block(48, out_channels)
        self.layer4 = block(out_channels, out_channels)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        c16 = self.layer3(x)  # stride 16: 14x14 on a 224 input
        c32 = self.layer4(c16)  # stride 32: 7x7
        return c16, c32


class DenseNet121Backbone(nn.Module):
    """torchvision densenet121 feature extractor with two taps.

    Weights are randomly initialized unless a local state-dict path is
    given; nothing is downloaded.
    """

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import densenet121

        net = densenet121(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.features = net.features
        self.out_channels = 1024

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        c16 = None
        for name, module in self.features.named_children():
            x = module(x)
            if name == "denseblock3":
                c16 = x  # 1024 x 14 x 14 on a 224 input
        c32 = F.relu(x)  # after norm5: 1024 x 7 x 7
        return c16, c32


class FeaturePyramid(nn.Module):
    """Two-level top-down pyramid over the stride-16/32 taps.

    The stride-32 map is upsampled (nearest, x2) and merged with the lateral
    stride-16 projection, additively or by concatenation, then smoothed with
    a 3x3 conv. Output is a stride-16 map with `out_channels` channels.
    """

    def __init__(self, mode: str, c16_in: int, c32_in: int, out_channels: int = 256):
        super().__init__()
        if mode not in ("additive", "concat"):
            raise ValueError(f"unknown fpn mode {mode!r}")
        self.mode = mode
        self.lateral = nn.Conv2d(c16_in, out_channels, kernel_size=1)
        self.top = nn.Conv2d(c32_in, out_channels, kernel_size=1)
        merged = out_channels * (2 if mode == "concat" else 1)
        self.smooth = nn.Conv2d(merged, out_channels, kernel_size=3, padding=1)

    def forward(self, c16: torch.Tensor, c32: torch.Tensor) -> torch.Tensor:
        lat = self.lateral(c16)
        top = F.interpolate(self.top(c32), size=lat.shape[2:], mode="nearest")
        merged = torch.cat([lat, top], dim=1) if self.mode == "concat" else lat + top
        return self.smooth(merged)


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, K)
    cams: torch.Tensor  # (B, K, H, W)
    roi_weight: torch.Tensor | None = None
    prior_weights: torch.Tensor | None = None  # (B, K, C, 1, 1) stacked


class ApamClassifier(nn.Module):
    """Backbone -> (pyramid) -> mask attention -> per-class heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "toy_cnn":
            self.backbone = ToyBackbone(config.toy_channels)
        else:
            self.backbone = DenseNet121Backbone(config.backbone_weights)
        if config.fpn != "none":
            self.fpn = FeaturePyramid(
                config.fpn,
                self.backbone.out_channels,
                self.backbone.out_channels,
                config.fpn_channels,
            )
        else:
            self.fpn = None

        c = config.feature_channels
        self.apam = nn.Module()
        if config.needs_roi:
            self.apam.roi = APAM(c)
        if config.needs_priors:
            if config.per_class_params:
                self.apam.prior = nn.ModuleList(APAM(c) for _ in range(config.n_classes))
            else:
                self.apam.prior = APAM(c)

        head_in = 2 * c if config.attention == "prior_and_roi" else c
        self.heads = nn.ModuleList(
            nn.Conv2d(head_in, 1, kernel_size=1) for _ in range(config.n_classes)
        )

    def features(self, images: torch.Tensor) -> torch.Tensor:
        c16, c32 = self.backbone(images)
        if self.fpn is not None:
            return self.fpn(c16, c32)
        return c32

    def _prior_apam(self, class_id: int) -> APAM:
        if self.config.per_class_params:
            return self.apam.prior[class_id]
        return self.apam.prior

    def class_maps(
        self,
        features: torch.Tensor,
        roi: torch.Tensor | None = None,
        priors: torch.Tensor | None = None,
    ):
        """Per-class feature maps plus the attention weights that shaped them.

        `roi` is (B, 1, h, w); `priors` is (B, K, h, w), one map per class.
        """
        cfg = self.config
        if cfg.needs_roi:
            if roi is None:
                raise ValueError(f"attention mode {cfg.attention!r} requires a roi mask")
            roi_out = self.apam.roi(features, roi)
        else:
            roi_out = None
        if cfg.needs_priors:
            if priors is None:
                raise ValueError(f"attention mode {cfg.attention!r} requires prior maps")
            if priors.shape[1] != cfg.n_classes:
                raise ValueError(
                    f"got {priors.shape[1]} prior maps for {cfg.n_classes} classes"
                )

        maps = []
        prior_weights = []
        for k in range(cfg.n_classes):
            if cfg.attention == "baseline":
                maps.append(features)
            elif cfg.attention == "roi_only":
                maps.append(roi_out.attention)
            else:
                prior_out = self._prior_apam(k)(features, priors[:, k : k + 1])
                prior_weights.append(prior_out.weight)
                if cfg.attention == "prior_only":
                    maps.append(prior_out.attention)
                else:
                    maps.append(torch.cat([roi_out.attention, prior_out.attention], dim=1))
        return maps, roi_out, prior_weights

    def forward(
        self,
        images: torch.Tensor,
        roi: torch.Tensor | None = None,
        priors: torch.Tensor | None = None,
    ) -> ModelOutput:
        feats = self.features(images)
        maps, roi_out, prior_weights = self.class_maps(feats, roi, priors)
        logits = []
        cams = []
        for k, head in enumerate(self.heads):
            pooled = maps[k].mean(dim=(2, 3), keepdim=True)
            logits.append(head(pooled).flatten(1))
            # reuse the head weights on the unpooled map; bias excluded so the
            # map shows pure spatial evidence
            cams.append(F.conv2d(maps[k], head.weight))
        return ModelOutput(
            logits=torch.cat(logits, dim=1),
            cams=torch.cat(cams, dim=1),
            roi_weight=roi_out.weight if roi_out is not None else None,
            prior_weights=torch.stack(prior_weights, dim=1) if prior_weights else None,
        )


def build_model(config: ModelConfig, seed: int | None = None) -> ApamClassifier:
    if seed is not None:
        torch.manual_seed(seed)
    return ApamClassifier(config)


def save_checkpoint(model: ApamClassifier, path, extra: dict | None = None) -> Path:
    """Write a self-describing zip: config.json plus one .npy per tensor."""
    from . import __version__

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tool_version": __version__,
        "config": asdict(model.config),
    }
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(meta, indent=2))
        for key, tensor in model.state_dict().items():
            section, _, rest = key.partition(".")
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy())
            zf.writestr(f"{section}/{rest}.npy", buf.getvalue())
    return path


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Rebuild the model from a checkpoint zip; returns (model, meta)."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            with zf.open("config.json") as fh:
                meta = json.load(fh)
            version = meta.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(
                    f"checkpoint format version {version!r} is not supported "
                    f"(expected {CHECKPOINT_FORMAT_VERSION})"
                )
            config = ModelConfig(**meta["config"])
            if expect_config is not None and asdict(config) != asdict(expect_config):
                raise ValueError(
                    "checkpoint config does not match the expected config: "
                    f"{asdict(config)} vs {asdict(expect_config)}"
                )
            state = {}
            for info in zf.infolist():
                if info.filename == "config.json" or info.is_dir():
                    continue
                section, _, rest = info.filename.partition("/")
                if not rest.endswith(".npy"):
                    continue
                key = f"{section}.{rest[: -len('.npy')]}"
                with zf.open(info) as fh:
                    state[key] = torch.from_numpy(np.load(io.BytesIO(fh.read())))
    except zipfile.BadZipFile as exc:
        raise ValueError(f"checkpoint file is corrupt or truncated: {path}") from exc
    model = ApamClassifier(config)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
