"""3D residual backbone with per-block feature taps, plus heads.

The backbone mirrors the classic 18-layer basic-block layout: a 3x7x7 stem
with spatial stride 2 and a spatial max-pool, then four stages of two basic
blocks whose outputs are all exposed for dense alignment. Stages 2-4 halve
the spatial axes and, by default, the temporal axis. One instance is built
per modality; architectures match, parameters never do.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from itertools import islice
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1

# Input standardization: (0, 255) -> (-1, 1), identical for both modalities.
INPUT_MEAN = 127.5
INPUT_STD = 127.5


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 16
    dropout_rate: float = 0.5
    temporal_downsample: tuple[bool, bool, bool, bool] = (False, True, True, True)
    proj_dim: int = 32

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.temporal_downsample = tuple(bool(b) for b in self.temporal_downsample)
        if len(self.stage_channels) != 4 or len(self.temporal_downsample) != 4:
            raise ValueError("backbone has exactly 4 stages")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be non-decreasing")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.blocks_per_stage < 1 or self.num_classes < 1 or self.proj_dim < 1:
            raise ValueError("blocks_per_stage, num_classes, proj_dim must be >= 1")

    @classmethod
    def paper(cls, num_classes: int = 101, proj_dim: int = 128) -> "BackboneConfig":
        return cls(stage_channels=(64, 128, 256, 512), num_classes=num_classes,
                   proj_dim=proj_dim)


@dataclass
class BlockFeatureSet:
    """The four per-stage feature maps of one forward pass, each [B, C, T, H, W]."""

    features: list[torch.Tensor]
    modality: str = ""

    def detached(self) -> "BlockFeatureSet":
        return BlockFeatureSet([f.detach() for f in self.features], self.modality)

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(f.shape) for f in self.features]


@dataclass
class ModelOutputs:
    logits: torch.Tensor
    probabilities: torch.Tensor
    projection: torch.Tensor
    block_features: BlockFeatureSet


class BasicBlock3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: tuple[int, int, int]):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        if in_ch != out_ch or stride != (1, 1, 1):
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class VideoBackbone(nn.Module):
    """Stem + four tapped stages. ``forward`` returns all four stage outputs."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c0 = config.stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv3d(3, c0, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3), bias=False),
            nn.BatchNorm3d(c0),
            nn.ReLU(inplace=True),
            nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
        )
        stages = []
        in_ch = c0
        for i, out_ch in enumerate(config.stage_channels):
            blocks = []
            for b in range(config.blocks_per_stage):
                if b == 0 and i > 0:
                    stride = (2 if config.temporal_downsample[i] else 1, 2, 2)
                else:
                    stride = (1, 1, 1)
                blocks.append(BasicBlock3d(in_ch, out_ch, stride))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 5 or x.shape[1] != 3:
            raise ValueError(f"expected input [B, 3, T, H, W], got {tuple(x.shape)}")
        x = self.stem(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class ProjectionHead(nn.Module):
    """3-layer MLP (Linear-BN-ReLU twice, then Linear) with l2-normalized output."""

    def __init__(self, in_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim),
            nn.BatchNorm1d(in_dim),
            nn.ReLU(inplace=True),
            nn.Linear(in_dim, in_dim),
            nn.BatchNorm1d(in_dim),
            nn.ReLU(inplace=True),
            nn.Linear(in_dim, proj_dim),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(pooled), dim=1)


class ActionModel(nn.Module):
    """Backbone plus classification and projection heads for one modality."""

    def __init__(self, config: BackboneConfig, modality: str = ""):
        super().__init__()
        self.config = config
        self.modality = modality
        self.backbone = VideoBackbone(config)
        last = config.stage_channels[-1]
        self.dropout = nn.Dropout(config.dropout_rate)
        self.classifier = nn.Linear(last, config.num_classes)
        self.projector = ProjectionHead(last, config.proj_dim)

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        taps = self.backbone(x)
        pooled = taps[-1].mean(dim=(2, 3, 4))
        logits = self.classifier(self.dropout(pooled))
        return ModelOutputs(
            logits=logits,
            probabilities=F.softmax(logits, dim=1),
            projection=self.projector(pooled),
            block_features=BlockFeatureSet(taps, self.modality),
        )


def prepare_input(frames: np.ndarray | torch.Tensor) -> torch.Tensor:
    """[B, T, H, W, C] or [T, H, W, C] clips in (0, 255) -> standardized [B, 3, T, H, W]."""
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    frames = frames.float()
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
    if frames.dim() != 5:
        raise ValueError(f"expected [B, T, H, W, C] clips, got {tuple(frames.shape)}")
    x = frames.permute(0, 4, 1, 2, 3).contiguous()
    return (x - INPUT_MEAN) / INPUT_STD


def weight_decay_param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Two param groups: weight decay on conv/linear weights, none on norms/biases."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def precise_bn_recompute(model: nn.Module, batches: Iterable[torch.Tensor],
                         num_batches: int) -> None:
    """Replace BN running stats with true averages over ``num_batches`` batches.

    Every BN layer switches to cumulative-average momentum and accumulates
    fresh statistics from forward passes; all other layers stay in eval mode
    and no parameter is touched.
    """
    bn_layers = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bn_layers:
        return
    batch_iter = iter(islice(batches, num_batches))
    try:
        first = next(batch_iter)
    except StopIteration:
        raise ValueError("empty batch stream: no statistics to recompute") from None
    was_training = model.training
    momenta = [bn.momentum for bn in bn_layers]
    model.eval()
    for bn in bn_layers:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative moving average
        bn.train()
    with torch.no_grad():
        model(first)
        for batch in batch_iter:
            model(batch)
    for bn, momentum in zip(bn_layers, momenta):
        bn.momentum = momentum
    model.train(was_training)


def save_checkpoint(path: str | Path, models: dict[str, ActionModel], step: int,
                    metrics: dict | None = None, extra_config: dict | None = None) -> None:
    """Write a checkpoint: version header, config echo, step, metrics, weights."""
    payloads = {}
    configs = {}
    for name, model in models.items():
        payloads[name] = model.state_dict()
        configs[name] = asdict(model.config)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_configs": configs,
            "extra_config": extra_config or {},
            "step": step,
            "metrics": metrics or {},
            "state_dicts": payloads,
        },
        str(path),
    )


def load_checkpoint(path: str | Path, models: dict[str, ActionModel]) -> dict:
    """Load weights into ``models``; fail loudly on any config mismatch."""
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format {blob.get('format_version')} "
            f"!= supported {CHECKPOINT_VERSION}")
    for name, model in models.items():
        if name not in blob["state_dicts"]:
            raise ValueError(f"{path}: checkpoint has no model named {name!r}")
        saved_cfg = blob["model_configs"][name]
        live_cfg = asdict(model.config)
        if {k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in saved_cfg.items()} != \
           {k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in live_cfg.items()}:
            raise ValueError(
                f"{path}: config mismatch for model {name!r}: "
                f"checkpoint {saved_cfg} vs requested {live_cfg}")
        model.load_state_dict(blob["state_dicts"][name])
    return blob
