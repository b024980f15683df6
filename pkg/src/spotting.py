"""
From window scores to sparse events: overlap aggregation and Soft-NMS,
plus the prediction file format.
"""

from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger

from .data_synth import collate_clips, evaluation_windows
from .errors import DatasetError, SpotIQRuntimeError
from .models import EventPrediction, FrameScoreTrack, VideoRecord

PREDICTION_COLUMNS = ["video_id", "frame", "class_name", "score"]


def aggregate_windows(
    video_id: str,
    num_frames: int,
    window_outputs: list[tuple[int, np.ndarray, np.ndarray]],
) -> FrameScoreTrack:
    """
    Average window scores per frame over every unpadded covering window.

    Args:
        video_id: Video the windows belong to
        num_frames: Video length N
        window_outputs: (start, scores [T, K], valid mask [T]) per window

    Returns:
        FrameScoreTrack with float64 scores [N, K]
    """
    if not window_outputs:
        raise SpotIQRuntimeError(f"No windows for {video_id}")

    num_classes = np.asarray(window_outputs[0][1]).shape[1]
    sums = np.zeros((num_frames, num_classes), dtype=np.float64)
    coverage = np.zeros(num_frames, dtype=np.int64)

    for start, scores, mask in window_outputs:
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        frames = start + np.flatnonzero(mask)
        inside = frames < num_frames
        sums[frames[inside]] += scores[mask][inside]
        coverage[frames[inside]] += 1

    if (coverage == 0).any():
        missing = int(np.flatnonzero(coverage == 0)[0])
        raise SpotIQRuntimeError(f"Frame {missing} of {video_id} is not covered by any window")

    return FrameScoreTrack(video_id=video_id, scores=sums / coverage[:, None], coverage=coverage)


def soft_nms(
    track: FrameScoreTrack,
    window: int = 20,
    score_threshold: float = 0.01,
    classes: Optional[list[int]] = None,
) -> list[EventPrediction]:
    """
    Per-class Soft-NMS with linear decay.

    Repeatedly emits the top frame t* of a class and multiplies every frame with
    |t - t*| < window / 2 by |t - t*| / (window / 2); stops once the best
    remaining score falls below score_threshold. Ties go to the earliest frame.

    Returns:
        Predictions sorted by score descending
    """
    if window < 1:
        raise ValueError(f"Soft-NMS window must be >= 1, got {window}")

    radius = window / 2.0
    positions = np.arange(track.num_frames)
    classes = range(track.scores.shape[1]) if classes is None else classes
    predictions = []

    for class_id in classes:
        remaining = track.scores[:, class_id].astype(np.float64, copy=True)
        while remaining.size:
            peak = int(np.argmax(remaining))
            score = float(remaining[peak])
            if score < score_threshold or score <= 0.0:
                break
            predictions.append(
                EventPrediction(video_id=track.video_id, frame=peak, class_id=class_id, score=min(score, 1.0))
            )
            distance = np.abs(positions - peak)
            near = distance < radius
            remaining[near] *= distance[near] / radius

    predictions.sort(key=lambda p: (-p.score, p.frame, p.class_id))
    return predictions


@torch.no_grad()
def score_video(
    model: torch.nn.Module,
    record: VideoRecord,
    clip_len: int,
    batch_size: int = 4,
    device: Union[str, torch.device] = "cpu",
) -> FrameScoreTrack:
    """Run the model over half-overlapping windows and aggregate their scores."""
    model.eval()
    windows = evaluation_windows(record, clip_len)
    if windows[-1].padding:
        logger.debug(f"{record.video_id}: last window padded by {windows[-1].padding} frames")

    outputs = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        frames, _, mask = collate_clips(chunk)
        scores = model(frames.to(device)).scores.float().cpu().numpy()
        for clip, clip_scores, clip_mask in zip(chunk, scores, mask.numpy()):
            outputs.append((clip.start_frame, clip_scores, clip_mask))

    return aggregate_windows(record.video_id, record.num_frames, outputs)


def predictions_frame(predictions: list[EventPrediction], class_names: list[str]) -> pd.DataFrame:
    """Predictions as a table ordered by (video_id, class, -score, frame)."""
    rows = [
        {
            "video_id": p.video_id,
            "frame": p.frame,
            "class_id": p.class_id,
            "class_name": class_names[p.class_id],
            "score": p.score,
        }
        for p in predictions
    ]
    df = pd.DataFrame(rows, columns=["video_id", "frame", "class_id", "class_name", "score"])
    df = df.sort_values(
        ["video_id", "class_id", "score", "frame"], ascending=[True, True, False, True], kind="mergesort"
    )
    return df.reset_index(drop=True)


def write_predictions(predictions: list[EventPrediction], path: Union[str, Path], class_names: list[str]) -> Path:
    """Write the prediction file (CSV, six-decimal scores)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = predictions_frame(predictions, class_names)
    df[PREDICTION_COLUMNS].to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logger.info(f"Wrote {len(df)} predictions to {path}")
    return path


def read_predictions(path: Union[str, Path], class_names: list[str]) -> list[EventPrediction]:
    """Read a prediction file written by write_predictions."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Prediction file not found: {path}")

    df = pd.read_csv(path, dtype={"video_id": str, "class_name": str})
    missing = set(PREDICTION_COLUMNS) - set(df.columns)
    if missing:
        raise DatasetError(f"{path} is missing columns {sorted(missing)}")

    index = {name: i for i, name in enumerate(class_names)}
    unknown = set(df["class_name"]) - set(index)
    if unknown:
        raise DatasetError(f"{path} names unknown classes {sorted(unknown)}")

    predictions = []
    for row in df.itertuples(index=False):
        if row.score <= 0:
            continue
        predictions.append(
            EventPrediction(
                video_id=row.video_id, frame=int(row.frame), class_id=index[row.class_name], score=float(row.score)
            )
        )
    return predictions
