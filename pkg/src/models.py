"""
Data models for SpotIQ.
Defines the experiment configuration tree, videos and clips, predictions and run records.
"""

from datetime import datetime
from enum import Enum
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Number of distinct synthetic class signatures (3 colour channels x 3 shapes x 2 motions).
MAX_SYNTHETIC_CLASSES = 18


class Split(str, Enum):
    """Dataset partitions."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class StrictModel(BaseModel):
    """Configuration base: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


class SyntheticDatasetSpec(StrictModel):
    """Parameters of the synthetic event-video generator."""

    num_videos: int = Field(60, ge=1)
    frames_per_video: int = Field(256, ge=1)
    height: int = Field(32, ge=1)
    width: int = Field(32, ge=1)
    num_classes: int = Field(3, ge=1, le=MAX_SYNTHETIC_CLASSES)
    class_rates: list[float] = Field(default_factory=lambda: [10.0, 3.0, 1.0])
    class_names: Optional[list[str]] = None
    min_event_gap: int = Field(8, ge=1)
    noise_std: float = Field(0.05, ge=0.0)
    fps: float = Field(25.0, gt=0.0)
    val_fraction: float = Field(1 / 6, ge=0.0, lt=1.0)
    test_fraction: float = Field(1 / 6, ge=0.0, lt=1.0)
    seed: int = 7

    @field_validator("class_rates")
    @classmethod
    def rates_valid(cls, v):
        if any(rate < 0 for rate in v):
            raise ValueError("class rates must be non-negative")
        if not any(rate > 0 for rate in v):
            raise ValueError("at least one class rate must be positive")
        return v

    @model_validator(mode="after")
    def shapes_consistent(self):
        if len(self.class_rates) != self.num_classes:
            raise ValueError(
                f"class_rates has {len(self.class_rates)} entries, expected num_classes={self.num_classes}"
            )
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave room for training videos")
        return self

    def resolved_class_names(self) -> list[str]:
        """Class names, defaulting to event_<id>."""
        return self.class_names or [f"event_{c}" for c in range(self.num_classes)]


class BackboneSpec(StrictModel):
    """Bottleneck CNN stand-in for the RegNet-Y feature extractor."""

    stem_width: int = Field(16, ge=1)
    stem_stride: int = Field(2, ge=1)
    stage_widths: list[int] = Field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: list[int] = Field(default_factory=lambda: [2, 2, 2])
    stage_strides: list[int] = Field(default_factory=lambda: [2, 2, 2])
    bottleneck_ratio: int = Field(1, ge=1)
    astrm_enabled: bool = True
    astrm_kernel_size: int = Field(3, ge=1)
    astrm_temporal_ratio: int = Field(2, ge=1)
    astrm_hidden_ratio: int = Field(2, ge=1)
    use_local_spatial: bool = True
    use_local_temporal: bool = True
    use_global_temporal: bool = True

    @model_validator(mode="after")
    def stages_consistent(self):
        if not (len(self.stage_widths) == len(self.blocks_per_stage) == len(self.stage_strides)):
            raise ValueError("stage_widths, blocks_per_stage and stage_strides must have equal length")
        if not self.stage_widths:
            raise ValueError("at least one stage is required")
        for width in self.stage_widths:
            if width % self.bottleneck_ratio:
                raise ValueError(f"stage width {width} not divisible by bottleneck_ratio")
            mid = width // self.bottleneck_ratio
            if self.astrm_enabled and mid % self.astrm_temporal_ratio:
                raise ValueError(
                    f"bottleneck width {mid} not divisible by astrm_temporal_ratio={self.astrm_temporal_ratio}"
                )
        if any(b < 1 for b in self.blocks_per_stage) or any(s < 1 for s in self.stage_strides):
            raise ValueError("blocks and strides must be positive")
        return self

    @property
    def output_width(self) -> int:
        return self.stage_widths[-1]


class TemporalBlockSpec(StrictModel):
    """Long-range temporal block placed after spatial pooling."""

    kind: str = "bigru"
    hidden_size: Optional[int] = Field(None, ge=1)
    num_layers: int = Field(1, ge=1)
    num_heads: int = Field(4, ge=1)


class LossConfig(StrictModel):
    """Objective: BCE plus weighted instance contrastive term."""

    temperature: float = Field(0.07, gt=0.0)
    lambda_sic: float = Field(0.001, ge=0.0)
    mixup_alpha: float = Field(0.1, gt=0.0)
    mixup_enabled: bool = True
    contrastive: Literal["softic", "ic", "none"] = "softic"
    embedding_dim: int = Field(128, ge=1)
    bank_size: int = Field(256, ge=1)
    contrastive_warmup_epochs: int = Field(1, ge=0)


class OptimConfig(StrictModel):
    """AdamW base optimizer, sharpness-aware wrapper and schedule."""

    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    rho: float = Field(2.0, ge=0.0)
    sharpness: Literal["none", "sam", "asam"] = "asam"
    asam_eta: float = Field(0.01, ge=0.0)
    warmup_epochs: float = Field(3, ge=0)
    total_epochs: Optional[float] = Field(None, gt=0)
    warmup_lr: float = Field(1e-5, ge=0.0)

    @model_validator(mode="after")
    def warmup_within_total(self):
        if self.total_epochs is not None and self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")
        return self

    @property
    def adaptive(self) -> bool:
        return self.sharpness == "asam"


class EvalSpec(StrictModel):
    """Tolerance-mAP evaluation and post-processing settings."""

    deltas: list[int] = Field(default_factory=lambda: list(range(9)))
    ranges: dict[str, list[int]] = Field(
        default_factory=lambda: {"tight": [1, 2, 3, 4], "loose": [5, 6, 7, 8]}
    )
    class_names: Optional[list[str]] = None
    matching_policy: Literal["greedy_nearest"] = "greedy_nearest"
    nms_window: int = Field(20, ge=1)
    score_threshold: float = Field(0.01, ge=0.0)
    selection_delta: int = Field(1, ge=0)

    @field_validator("deltas")
    @classmethod
    def deltas_non_negative(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("tolerances must be non-negative")
        if not v:
            raise ValueError("at least one tolerance is required")
        return sorted(set(v))

    @model_validator(mode="after")
    def ranges_within_deltas(self):
        for name, members in self.ranges.items():
            missing = sorted(set(members) - set(self.deltas))
            if missing:
                raise ValueError(f"range '{name}' uses tolerances {missing} not listed in deltas")
        if self.selection_delta not in self.deltas:
            raise ValueError("selection_delta must be one of deltas")
        return self

    @classmethod
    def from_seconds(
        cls,
        fps: float,
        tight: tuple[float, float] = (1.0, 4.0),
        loose: tuple[float, float] = (5.0, 60.0),
        **kwargs,
    ) -> "EvalSpec":
        """Build tight/loose δ-sets (in frames) from second ranges at a given fps."""
        tight_frames = seconds_to_frames(*tight, fps)
        loose_frames = seconds_to_frames(*loose, fps)
        deltas = sorted(set(kwargs.pop("deltas", [])) | set(tight_frames) | set(loose_frames) | {1})
        return cls(
            deltas=deltas,
            ranges={"tight": tight_frames, "loose": loose_frames},
            **kwargs,
        )


def seconds_to_frames(low: float, high: float, fps: float) -> list[int]:
    """Every integer frame tolerance between two second values, inclusive."""
    return list(range(int(round(low * fps)), int(round(high * fps)) + 1))


class AugmentConfig(StrictModel):
    """Training-time photometric augmentation, drawn once per clip."""

    photometric: bool = False
    brightness: float = Field(0.1, ge=0.0)
    contrast: float = Field(0.1, ge=0.0)
    # saturation factor ~ U(max(0, 1 - s), 1 + s); 0 disables
    saturation: float = Field(0.0, ge=0.0)
    blur_prob: float = Field(0.0, ge=0.0, le=1.0)
    blur_kernel_size: int = Field(3, ge=3)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    hflip: bool = False

    @field_validator("blur_kernel_size")
    @classmethod
    def kernel_odd(cls, v):
        if v % 2 == 0:
            raise ValueError("blur kernel size must be odd")
        return v

    @field_validator("blur_sigma")
    @classmethod
    def sigma_range(cls, v):
        low, high = v
        if not 0 < low <= high:
            raise ValueError("blur sigma range must satisfy 0 < low <= high")
        return v

    @property
    def enabled(self) -> bool:
        return self.photometric or self.hflip or self.saturation > 0 or self.blur_prob > 0


class AblationFlags(BaseModel):
    """View of the switches varied by ablation runs."""
    model_config = ConfigDict(frozen=True)

    astrm: bool
    sharpness: Literal["none", "sam", "asam"]
    contrastive: Literal["softic", "ic", "none"]
    mixup: bool


class TrainConfig(StrictModel):
    """Complete experiment configuration, stored in every checkpoint."""

    dataset: SyntheticDatasetSpec = Field(default_factory=SyntheticDatasetSpec)
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    temporal: TemporalBlockSpec = Field(default_factory=TemporalBlockSpec)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    clip_len: int = Field(128, ge=2)
    clips_per_video: int = Field(8, ge=1)
    batch_size: int = Field(4, ge=1)
    eval_batch_size: int = Field(4, ge=1)
    epochs: int = Field(30, ge=1)
    eval_every: int = Field(1, ge=1)
    label_dilation: int = Field(0, ge=0)
    seed: int = 0

    @field_validator("clip_len")
    @classmethod
    def clip_len_even(cls, v):
        if v % 2:
            raise ValueError("clip_len must be even for half-overlap windows")
        return v

    @model_validator(mode="after")
    def epochs_consistent(self):
        if self.optim.total_epochs is None:
            self.optim.total_epochs = float(self.epochs)
        elif self.optim.total_epochs != self.epochs:
            raise ValueError("optim.total_epochs must equal epochs")
        if self.optim.warmup_epochs > self.epochs:
            raise ValueError("optim.warmup_epochs must not exceed epochs")
        return self

    @property
    def ablation(self) -> AblationFlags:
        return AblationFlags(
            astrm=self.backbone.astrm_enabled,
            sharpness=self.optim.sharpness,
            contrastive=self.loss.contrastive,
            mixup=self.loss.mixup_enabled,
        )

    def with_ablation(self, **flags) -> "TrainConfig":
        """Copy of this config with ablation switches overridden."""
        data = self.model_dump()
        mapping = {
            "astrm": ("backbone", "astrm_enabled"),
            "sharpness": ("optim", "sharpness"),
            "contrastive": ("loss", "contrastive"),
            "mixup": ("loss", "mixup_enabled"),
        }
        for name, value in flags.items():
            if name not in mapping:
                raise ValueError(f"unknown ablation flag: {name}")
            section, key = mapping[name]
            data[section][key] = value
        return TrainConfig.model_validate(data)


class VideoRecord(BaseModel):
    """A full synthetic video with its ground-truth events."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    frames: np.ndarray  # float32 [3, N, H, W] in [0, 1]
    events: list[tuple[int, int]]  # (frame_index, class_id)
    num_classes: int
    fps: float = 25.0

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[1])

    def event_frames(self, class_id: int) -> list[int]:
        return [t for t, c in self.events if c == class_id]


class VideoClip(BaseModel):
    """A chunk of consecutive frames with per-frame soft labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    start_frame: int
    frames: torch.Tensor  # [3, T, H, W]
    labels: torch.Tensor  # [T, K]
    valid_length: int  # frames past this index are zero padding

    @property
    def clip_len(self) -> int:
        return int(self.frames.shape[1])

    @property
    def padding(self) -> int:
        return self.clip_len - self.valid_length

    @property
    def mask(self) -> torch.Tensor:
        mask = torch.zeros(self.clip_len, dtype=torch.bool)
        mask[: self.valid_length] = True
        return mask


class FrameScoreTrack(BaseModel):
    """Per-frame class scores of a whole video, averaged over covering windows."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    scores: np.ndarray  # float64 [N, K]
    coverage: np.ndarray  # int [N], contributing windows per frame

    @property
    def num_frames(self) -> int:
        return int(self.scores.shape[0])


class EventPrediction(BaseModel):
    """A sparse spotted event."""
    model_config = ConfigDict(frozen=True)

    video_id: str
    frame: int = Field(ge=0)
    class_id: int = Field(ge=0)
    score: float = Field(gt=0.0, le=1.0)


class EpochRecord(BaseModel):
    """One row of the training log."""

    epoch: int
    bce: float
    contrastive: float
    total: float
    lr: float
    skipped_steps: int = 0
    contrastive_samples: int = 0
    bank_ready: bool = False
    val_map: Optional[float] = None
    is_best: bool = False
    seconds: float = 0.0
    recorded_at: datetime = Field(default_factory=datetime.now)
