"""
End-to-end spotting model: per-frame bottleneck CNN with ASTRM blocks,
spatial average pooling, a pluggable temporal block, a linear classifier
and a projection head for contrastive embeddings.
"""

from typing import Callable, NamedTuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from .astrm import ASTRM
from .errors import ConfigurationError
from .models import BackboneSpec, TemporalBlockSpec, TrainConfig


class ModelOutput(NamedTuple):
    logits: torch.Tensor  # [B, T, K]
    scores: torch.Tensor  # sigmoid(logits)
    contrastive: torch.Tensor  # [B, T, E], unit rows


TEMPORAL_BLOCKS: dict[str, Callable[[int, TemporalBlockSpec, int], nn.Module]] = {}


def register_temporal_block(name: str):
    """Register a temporal block factory: (input_dim, spec, clip_len) -> module with `output_dim`."""

    def decorator(factory):
        TEMPORAL_BLOCKS[name] = factory
        return factory

    return decorator


class RecurrentBlock(nn.Module):
    def __init__(self, cell: type[nn.RNNBase], input_dim: int, hidden: int, num_layers: int):
        super().__init__()
        self.rnn = cell(input_dim, hidden, num_layers=num_layers, batch_first=True, bidirectional=True)
        self.output_dim = 2 * hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(x)
        return out


class IdentityBlock(nn.Module):
    def __init__(self, input_dim: int):
        super().__init__()
        self.output_dim = input_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class TransformerBlock(nn.Module):
    """Encoder layers over frames with a learned positional embedding."""

    def __init__(self, input_dim: int, spec: TemporalBlockSpec, clip_len: int):
        super().__init__()
        if input_dim % spec.num_heads:
            raise ConfigurationError(
                f"feature width {input_dim} not divisible by num_heads={spec.num_heads}",
                fields=["temporal.num_heads"],
            )
        self.position = nn.Parameter(torch.zeros(1, clip_len, input_dim))
        nn.init.normal_(self.position, std=0.02)
        layer = nn.TransformerEncoderLayer(
            input_dim, spec.num_heads, dim_feedforward=2 * input_dim, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, spec.num_layers, enable_nested_tensor=False)
        self.output_dim = input_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x + self.position[:, : x.shape[1]])


@register_temporal_block("bigru")
def _bigru(input_dim: int, spec: TemporalBlockSpec, clip_len: int) -> nn.Module:
    return RecurrentBlock(nn.GRU, input_dim, spec.hidden_size or input_dim, spec.num_layers)


@register_temporal_block("bilstm")
def _bilstm(input_dim: int, spec: TemporalBlockSpec, clip_len: int) -> nn.Module:
    return RecurrentBlock(nn.LSTM, input_dim, spec.hidden_size or input_dim, spec.num_layers)


@register_temporal_block("identity")
def _identity(input_dim: int, spec: TemporalBlockSpec, clip_len: int) -> nn.Module:
    return IdentityBlock(input_dim)


@register_temporal_block("transformer")
def _transformer(input_dim: int, spec: TemporalBlockSpec, clip_len: int) -> nn.Module:
    return TransformerBlock(input_dim, spec, clip_len)


def build_temporal_block(input_dim: int, spec: TemporalBlockSpec, clip_len: int) -> nn.Module:
    factory = TEMPORAL_BLOCKS.get(spec.kind)
    if factory is None:
        raise ConfigurationError(
            f"Unknown temporal block '{spec.kind}', available: {sorted(TEMPORAL_BLOCKS)}",
            fields=["temporal.kind"],
        )
    return factory(input_dim, spec, clip_len)


class Bottleneck(nn.Module):
    """1x1 -> [ASTRM] -> 3x3 (strided) -> 1x1 residual block applied frame by frame."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, spec: BackboneSpec, clip_len: int):
        super().__init__()
        mid = out_channels // spec.bottleneck_ratio
        self.conv1 = nn.Conv2d(in_channels, mid, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.astrm = (
            ASTRM(
                mid,
                clip_len,
                kernel_size=spec.astrm_kernel_size,
                temporal_ratio=spec.astrm_temporal_ratio,
                hidden_ratio=spec.astrm_hidden_ratio,
                use_local_spatial=spec.use_local_spatial,
                use_local_temporal=spec.use_local_temporal,
                use_global_temporal=spec.use_global_temporal,
            )
            if spec.astrm_enabled
            else None
        )
        self.conv2 = nn.Conv2d(mid, mid, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)

        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor, num_frames: int) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        if self.astrm is not None:
            bt, c, h, w = out.shape
            volume = out.view(bt // num_frames, num_frames, c, h, w).transpose(1, 2)
            out = self.astrm(volume).transpose(1, 2).reshape(bt, c, h, w)
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec, clip_len: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, spec.stem_width, kernel_size=3, stride=spec.stem_stride, padding=1, bias=False),
            nn.BatchNorm2d(spec.stem_width),
            nn.ReLU(inplace=True),
        )
        blocks = []
        in_channels = spec.stem_width
        for width, depth, stride in zip(spec.stage_widths, spec.blocks_per_stage, spec.stage_strides):
            for i in range(depth):
                blocks.append(Bottleneck(in_channels, width, stride if i == 0 else 1, spec, clip_len))
                in_channels = width
        self.blocks = nn.ModuleList(blocks)
        self.output_dim = spec.output_width

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, 3, T, H, W] -> per-frame features [B, T, D]."""
        b, c, t, h, w = frames.shape
        x = frames.transpose(1, 2).reshape(b * t, c, h, w)
        x = self.stem(x)
        for block in self.blocks:
            x = block(x, t)
        return x.mean(dim=(2, 3)).view(b, t, -1)


class SpotModel(nn.Module):
    """Per-frame event classifier over fixed-length clips."""

    def __init__(
        self,
        backbone: BackboneSpec,
        temporal: TemporalBlockSpec,
        num_classes: int,
        clip_len: int,
        embedding_dim: int = 128,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.clip_len = clip_len
        self.backbone = Backbone(backbone, clip_len)
        self.temporal = build_temporal_block(self.backbone.output_dim, temporal, clip_len)
        d_out = self.temporal.output_dim
        self.classifier = nn.Linear(d_out, num_classes)
        self.projection = nn.Sequential(
            nn.Linear(d_out, d_out),
            nn.ReLU(inplace=True),
            nn.Linear(d_out, embedding_dim),
        )

    def forward(self, frames: torch.Tensor) -> ModelOutput:
        unbatched = frames.dim() == 4
        if unbatched:
            frames = frames.unsqueeze(0)
        if frames.dim() != 5 or frames.shape[1] != 3 or frames.shape[2] != self.clip_len:
            raise ConfigurationError(
                f"Expected frames [B, 3, {self.clip_len}, H, W], got {tuple(frames.shape)}", fields=["clip_len"]
            )

        features = self.temporal(self.backbone(frames))
        logits = self.classifier(features)
        contrastive = F.normalize(self.projection(features), dim=-1)
        output = ModelOutput(logits, torch.sigmoid(logits), contrastive)
        if unbatched:
            output = ModelOutput(*(t.squeeze(0) for t in output))
        return output


def count_parameters(model: nn.Module) -> int:
    """Total number of scalar parameters."""
    return sum(p.numel() for p in model.parameters())


def parameter_table(model: nn.Module) -> pd.DataFrame:
    """Parameter count per top-level sub-module plus a total row."""
    rows = [{"module": name, "parameters": count_parameters(child)} for name, child in model.named_children()]
    rows.append({"module": "total", "parameters": count_parameters(model)})
    return pd.DataFrame(rows)


def build_model(config: TrainConfig) -> SpotModel:
    """Instantiate the model described by a training configuration."""
    model = SpotModel(
        config.backbone,
        config.temporal,
        num_classes=config.dataset.num_classes,
        clip_len=config.clip_len,
        embedding_dim=config.loss.embedding_dim,
    )
    logger.info(
        f"Built model: temporal={config.temporal.kind}, astrm={config.backbone.astrm_enabled}, "
        f"{count_parameters(model):,} parameters"
    )
    return model
