"""
Synthetic event-video generation, persistence and clip sampling.

Each class has a fixed visual signature rendered around its event frames:

  - colour channel  = class_id % 3
  - shape           = (class_id // 3) % 3   (0 square, 1 horizontal bar, 2 vertical bar)
  - motion          = class_id // 9          (0 left->right, 1 top->bottom)

The shape sits at the frame centre, moves one motion step per frame and its
amplitude is 1 - |dt|/4 for dt in [-3, 3], so it peaks exactly on the event
frame. Backgrounds are a slowly drifting low-resolution colour field plus
Gaussian pixel noise. Intensities are quantized to k/255 so that saving and
reloading a dataset is lossless.
"""

import hashlib
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from loguru import logger
from pydantic import BaseModel, ValidationError

from .errors import ConfigurationError, DatasetError
from .models import (
    AugmentConfig,
    Split,
    SyntheticDatasetSpec,
    VideoClip,
    VideoRecord,
)

SIGNATURE_RADIUS = 3
SIGNATURE_GAIN = 0.8
BACKGROUND_LEVEL = 0.3
BACKGROUND_GRID = 4
FRAMES_FILE = "frames.u8"
ANNOTATION_FILE = "annotations.json"
MANIFEST_FILE = "manifest.json"


class EventAnnotation(BaseModel):
    frame: int
    class_id: int


class VideoAnnotation(BaseModel):
    """Annotation file stored next to each raw frame tensor."""

    video_id: str
    num_frames: int
    channels: int = 3
    height: int
    width: int
    dtype: str = "uint8"
    byte_order: str = "little"
    fps: float
    num_classes: int
    class_names: list[str]
    events: list[EventAnnotation]


class DatasetManifest(BaseModel):
    """Top-level description of a generated dataset directory."""

    spec: SyntheticDatasetSpec
    class_names: list[str]
    fps: float
    splits: dict[str, list[str]]
    class_counts: list[int]


def _validated_spec(spec: SyntheticDatasetSpec) -> SyntheticDatasetSpec:
    try:
        return SyntheticDatasetSpec.model_validate(spec.model_dump())
    except ValidationError as e:
        from .config import as_configuration_error
        raise as_configuration_error(e, "dataset spec") from e


def class_signature(class_id: int) -> tuple[int, int, int]:
    """(channel, shape, motion) of a class."""
    return class_id % 3, (class_id // 3) % 3, (class_id // 9) % 2


def _signature_box(shape: int, height: int, width: int) -> tuple[int, int]:
    if shape == 0:
        side = max(2, min(height, width) // 4)
        return side, side
    if shape == 1:
        return max(1, height // 8), max(2, width // 2)
    return max(2, height // 2), max(1, width // 8)


def render_signature(frames: np.ndarray, event_frame: int, class_id: int):
    """Add a class signature around one event frame, in place."""
    _, num_frames, height, width = frames.shape
    channel, shape, motion = class_signature(class_id)
    box_h, box_w = _signature_box(shape, height, width)
    step = max(1, (width if motion == 0 else height) // 16)

    for dt in range(-SIGNATURE_RADIUS, SIGNATURE_RADIUS + 1):
        t = event_frame + dt
        if t < 0 or t >= num_frames:
            continue
        amplitude = SIGNATURE_GAIN * (1.0 - abs(dt) / (SIGNATURE_RADIUS + 1))
        cy, cx = height // 2, width // 2
        if motion == 0:
            cx += dt * step
        else:
            cy += dt * step
        y0, x0 = max(0, cy - box_h // 2), max(0, cx - box_w // 2)
        y1, x1 = min(height, y0 + box_h), min(width, x0 + box_w)
        if y1 > y0 and x1 > x0:
            frames[channel, t, y0:y1, x0:x1] += amplitude


def _background(rng: np.random.Generator, num_frames: int, height: int, width: int, noise_std: float) -> np.ndarray:
    grid = rng.normal(0.0, 0.1, size=(3, BACKGROUND_GRID, BACKGROUND_GRID))
    fields = np.empty((3, num_frames, BACKGROUND_GRID, BACKGROUND_GRID), dtype=np.float64)
    for t in range(num_frames):
        grid = 0.95 * grid + 0.05 * rng.normal(0.0, 0.1, size=grid.shape)
        fields[:, t] = grid

    rep_h = -(-height // BACKGROUND_GRID)
    rep_w = -(-width // BACKGROUND_GRID)
    upsampled = np.repeat(np.repeat(fields, rep_h, axis=2), rep_w, axis=3)[:, :, :height, :width]
    noise = rng.normal(0.0, noise_std, size=upsampled.shape) if noise_std > 0 else 0.0
    return BACKGROUND_LEVEL + upsampled + noise


def _place_events(rng: np.random.Generator, spec: SyntheticDatasetSpec) -> list[tuple[int, int]]:
    # Rare classes are placed first so the gap constraint drops common events, if any.
    order = sorted(range(spec.num_classes), key=lambda c: (spec.class_rates[c], c))
    taken: list[int] = []
    events: list[tuple[int, int]] = []

    for class_id in order:
        rate = spec.class_rates[class_id]
        count = int(np.floor(rate)) + int(rng.random() < rate - np.floor(rate))
        for _ in range(count):
            for _attempt in range(200):
                t = int(rng.integers(0, spec.frames_per_video))
                if all(abs(t - other) >= spec.min_event_gap for other in taken):
                    taken.append(t)
                    events.append((t, class_id))
                    break
            else:
                logger.debug(f"Could not place an event of class {class_id}, frame budget exhausted")

    return sorted(events)


def generate_video(spec: SyntheticDatasetSpec, index: int) -> VideoRecord:
    """Generate one video; a pure function of (spec, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    events = _place_events(rng, spec)
    frames = _background(rng, spec.frames_per_video, spec.height, spec.width, spec.noise_std)

    for t, class_id in events:
        render_signature(frames, t, class_id)

    frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0
    return VideoRecord(
        video_id=f"video_{index:04d}",
        frames=frames.astype(np.float32),
        events=events,
        num_classes=spec.num_classes,
        fps=spec.fps,
    )


def generate_dataset(spec: SyntheticDatasetSpec) -> list[VideoRecord]:
    """
    Generate the synthetic event-spotting dataset.

    Args:
        spec: Generator parameters

    Returns:
        One VideoRecord per video, deterministic in spec.seed
    """
    spec = _validated_spec(spec)
    records = [generate_video(spec, i) for i in range(spec.num_videos)]
    counts = class_distribution(records, spec.num_classes)
    logger.info(f"Generated {len(records)} videos, events per class: {counts}")
    return records


def class_distribution(records: list[VideoRecord], num_classes: int) -> list[int]:
    """Total number of events per class."""
    counts = [0] * num_classes
    for record in records:
        for _, class_id in record.events:
            counts[class_id] += 1
    return counts


def _hash_fraction(video_id: str) -> float:
    digest = hashlib.sha256(video_id.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) / 2**32


def split_videos(video_ids: list[str], val_fraction: float, test_fraction: float) -> dict[str, list[str]]:
    """Assign each video to train/val/test by a hash of its id."""
    splits: dict[str, list[str]] = {s.value: [] for s in Split}
    for video_id in video_ids:
        u = _hash_fraction(video_id)
        if u < test_fraction:
            splits[Split.TEST.value].append(video_id)
        elif u < test_fraction + val_fraction:
            splits[Split.VAL.value].append(video_id)
        else:
            splits[Split.TRAIN.value].append(video_id)
    return splits


def dense_labels(record: VideoRecord, start: int, clip_len: int, dilation: int = 0) -> torch.Tensor:
    """Per-frame label matrix [clip_len, K] for a window starting at `start`."""
    labels = torch.zeros(clip_len, record.num_classes, dtype=torch.float32)
    end = min(start + clip_len, record.num_frames)
    for t, class_id in record.events:
        for u in range(t - dilation, t + dilation + 1):
            if start <= u < end:
                labels[u - start, class_id] = 1.0
    return labels


def clip_from_record(record: VideoRecord, start: int, clip_len: int, dilation: int = 0) -> VideoClip:
    """Cut a clip, zero-padding past the end of the video."""
    end = min(start + clip_len, record.num_frames)
    valid = end - start
    frames = np.zeros((3, clip_len) + record.frames.shape[2:], dtype=np.float32)
    frames[:, :valid] = record.frames[:, start:end]
    return VideoClip(
        video_id=record.video_id,
        start_frame=start,
        frames=torch.from_numpy(frames),
        labels=dense_labels(record, start, clip_len, dilation),
        valid_length=valid,
    )


def sample_training_clips(
    record: VideoRecord,
    clips_per_video: int,
    clip_len: int,
    rng: np.random.Generator,
    dilation: int = 0,
) -> list[VideoClip]:
    """
    Sample training clips with uniformly random start frames.

    Args:
        record: Source video
        clips_per_video: Number of clips to draw
        clip_len: Frames per clip (T_s)
        rng: Generator owned by the caller
        dilation: Label dilation radius in frames

    Returns:
        List of VideoClip; clips may overlap
    """
    if clip_len < 1:
        raise ConfigurationError("clip_len must be at least 1", fields=["clip_len"])

    if record.num_frames < clip_len:
        logger.debug(f"{record.video_id} shorter than clip ({record.num_frames} < {clip_len}), padding")
        starts = [0] * clips_per_video
    else:
        starts = rng.integers(0, record.num_frames - clip_len + 1, size=clips_per_video).tolist()

    return [clip_from_record(record, int(s), clip_len, dilation) for s in starts]


def window_starts(num_frames: int, clip_len: int) -> list[int]:
    """Half-overlapping window starts covering [0, num_frames)."""
    if clip_len % 2:
        raise ConfigurationError("clip_len must be even for half-overlap windows", fields=["clip_len"])
    hop = clip_len // 2
    starts = [0]
    while starts[-1] + clip_len < num_frames:
        starts.append(starts[-1] + hop)
    return starts


def evaluation_windows(record: VideoRecord, clip_len: int, dilation: int = 0) -> list[VideoClip]:
    """Sliding windows with half overlap; the last one is zero-padded if needed."""
    return [clip_from_record(record, s, clip_len, dilation) for s in window_starts(record.num_frames, clip_len)]


def collate_clips(clips: list[VideoClip]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack clips into frames [B,3,T,H,W], labels [B,T,K] and mask [B,T]."""
    frames = torch.stack([c.frames for c in clips])
    labels = torch.stack([c.labels for c in clips])
    mask = torch.stack([c.mask for c in clips])
    return frames, labels, mask


def augment_batch(frames: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """
    Per-clip brightness/contrast and saturation jitter, Gaussian blur and
    horizontal flip. All frames of a clip share one draw.

    Args:
        frames: [B, 3, T, H, W] in [0, 1]
        rng: Step generator; nothing is drawn for disabled augmentations
        cfg: Augmentation settings

    Returns:
        Augmented copy, or `frames` itself when nothing is enabled
    """
    if not cfg.enabled:
        return frames

    out = frames.clone()
    for b in range(out.shape[0]):
        if cfg.photometric:
            brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
            contrast = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
            mean = out[b].mean()
            out[b] = ((out[b] - mean) * contrast + mean + brightness).clamp_(0.0, 1.0)
        if cfg.saturation > 0:
            factor = float(rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation))
            # torchvision expects [..., 3, H, W]
            out[b] = TF.adjust_saturation(out[b].transpose(0, 1), factor).transpose(0, 1)
        if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
            sigma = float(rng.uniform(*cfg.blur_sigma))
            size = [cfg.blur_kernel_size, cfg.blur_kernel_size]
            out[b] = TF.gaussian_blur(out[b].transpose(0, 1), size, [sigma, sigma]).transpose(0, 1)
        if cfg.hflip and rng.random() < 0.5:
            out[b] = out[b].flip(-1)
    return out


def save_dataset(records: list[VideoRecord], out_dir: Union[str, Path], spec: SyntheticDatasetSpec) -> Path:
    """
    Write a dataset directory: one sub-directory per video plus a manifest.

    Args:
        records: Generated videos
        out_dir: Destination directory (created if missing)
        spec: Spec the records were generated from

    Returns:
        Path of the manifest file
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_names = spec.resolved_class_names()

    for record in records:
        video_dir = out_dir / record.video_id
        video_dir.mkdir(exist_ok=True)
        quantized = np.round(record.frames * 255.0).astype("<u1")
        (video_dir / FRAMES_FILE).write_bytes(quantized.tobytes(order="C"))

        annotation = VideoAnnotation(
            video_id=record.video_id,
            num_frames=record.num_frames,
            height=int(record.frames.shape[2]),
            width=int(record.frames.shape[3]),
            fps=record.fps,
            num_classes=record.num_classes,
            class_names=class_names,
            events=[EventAnnotation(frame=t, class_id=c) for t, c in record.events],
        )
        (video_dir / ANNOTATION_FILE).write_text(annotation.model_dump_json(indent=2) + "\n", encoding="utf-8")

    manifest = DatasetManifest(
        spec=spec,
        class_names=class_names,
        fps=spec.fps,
        splits=split_videos([r.video_id for r in records], spec.val_fraction, spec.test_fraction),
        class_counts=class_distribution(records, spec.num_classes),
    )
    manifest_path = out_dir / MANIFEST_FILE
    manifest_path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(records)} videos to {out_dir}")
    return manifest_path


def load_manifest(data_dir: Union[str, Path]) -> DatasetManifest:
    """Read the manifest of a dataset directory."""
    path = Path(data_dir) / MANIFEST_FILE
    if not path.exists():
        raise DatasetError(f"No dataset manifest at {path}")
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError) as e:
        raise DatasetError(f"Corrupt dataset manifest {path}: {e}") from e


def load_video(video_dir: Union[str, Path]) -> VideoRecord:
    """Read one video directory back into a VideoRecord."""
    video_dir = Path(video_dir)
    try:
        annotation = VideoAnnotation.model_validate_json((video_dir / ANNOTATION_FILE).read_text(encoding="utf-8"))
        raw = np.frombuffer((video_dir / FRAMES_FILE).read_bytes(), dtype="<u1")
    except (OSError, ValidationError) as e:
        raise DatasetError(f"Cannot read video in {video_dir}: {e}") from e

    shape = (annotation.channels, annotation.num_frames, annotation.height, annotation.width)
    if raw.size != int(np.prod(shape)):
        raise DatasetError(f"{video_dir / FRAMES_FILE} holds {raw.size} values, expected {shape}")

    return VideoRecord(
        video_id=annotation.video_id,
        frames=(raw.reshape(shape).astype(np.float32) / 255.0).astype(np.float32),
        events=[(e.frame, e.class_id) for e in annotation.events],
        num_classes=annotation.num_classes,
        fps=annotation.fps,
    )


def load_dataset(
    data_dir: Union[str, Path], split: Optional[Split] = None
) -> tuple[DatasetManifest, list[VideoRecord]]:
    """
    Load a dataset directory, optionally restricted to one split.

    Returns:
        (manifest, records) with records ordered by video id
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    if split is None:
        video_ids = sorted(v for ids in manifest.splits.values() for v in ids)
    else:
        video_ids = sorted(manifest.splits.get(Split(split).value, []))

    records = [load_video(data_dir / video_id) for video_id in video_ids]
    logger.info(f"Loaded {len(records)} videos from {data_dir}" + (f" ({Split(split).value})" if split else ""))
    return manifest, records
