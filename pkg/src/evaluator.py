"""
Evaluation workflow: checkpoint -> sliding-window scores -> Soft-NMS ->
tolerance mAP, with the prediction file and report artifacts.
"""

from pathlib import Path
from typing import Optional, Union

import torch
from loguru import logger

from .checkpoint import load_checkpoint, restore_model
from .data_synth import load_dataset
from .errors import EvaluationError
from .metrics import EvaluationReport, evaluate_predictions
from .models import EvalSpec, EventPrediction, Split, VideoRecord
from .reporting import plot_per_class_ap
from .spotting import read_predictions, score_video, soft_nms, write_predictions

REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.csv"
AP_TABLE_FILE = "per_class_ap.csv"
SUMMARY_FILE = "summary.csv"
AP_PLOT_FILE = "per_class_ap.png"


def ground_truth(records: list[VideoRecord]) -> dict[str, list[tuple[int, int]]]:
    """video_id -> [(frame, class_id)]"""
    return {r.video_id: list(r.events) for r in records}


def oracle_predictions(records: list[VideoRecord]) -> list[EventPrediction]:
    """Ground truth as score-1 predictions."""
    return [
        EventPrediction(video_id=r.video_id, frame=t, class_id=c, score=1.0) for r in records for t, c in r.events
    ]


def predict_videos(
    model: torch.nn.Module,
    records: list[VideoRecord],
    clip_len: int,
    spec: EvalSpec,
    batch_size: int = 4,
    device: Union[str, torch.device] = "cpu",
) -> list[EventPrediction]:
    """Spot events in every video."""
    predictions = []
    for record in records:
        track = score_video(model, record, clip_len, batch_size=batch_size, device=device)
        found = soft_nms(track, window=spec.nms_window, score_threshold=spec.score_threshold)
        logger.debug(f"{record.video_id}: {len(found)} predictions")
        predictions.extend(found)
    return predictions


def evaluate_model(
    model: torch.nn.Module,
    records: list[VideoRecord],
    clip_len: int,
    spec: EvalSpec,
    class_names: list[str],
    batch_size: int = 4,
    device: Union[str, torch.device] = "cpu",
) -> tuple[EvaluationReport, list[EventPrediction]]:
    """Predict and score a set of videos."""
    predictions = predict_videos(model, records, clip_len, spec, batch_size=batch_size, device=device)
    report = evaluate_predictions(predictions, ground_truth(records), spec, class_names)
    return report, predictions


def selection_spec(spec: EvalSpec) -> EvalSpec:
    """Single-tolerance spec used for checkpoint selection."""
    return EvalSpec(
        deltas=[spec.selection_delta],
        ranges={},
        class_names=spec.class_names,
        nms_window=spec.nms_window,
        score_threshold=spec.score_threshold,
        selection_delta=spec.selection_delta,
    )


def write_report(
    report: EvaluationReport,
    predictions: list[EventPrediction],
    output_dir: Union[str, Path],
) -> Path:
    """Write report.json, predictions.csv, per_class_ap.csv, summary.csv and the AP plot."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    class_names = [c.class_name for c in report.classes]

    write_predictions(predictions, output_dir / PREDICTIONS_FILE, class_names)
    (output_dir / REPORT_FILE).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    report.ap_frame().to_csv(output_dir / AP_TABLE_FILE, index=False, float_format="%.6f")
    report.summary_frame().to_csv(output_dir / SUMMARY_FILE, index=False, float_format="%.6f")
    plot_per_class_ap(
        {"run": report.ap_frame().set_index("class_name")[f"ap@{report.spec.selection_delta}"]},
        output_dir / AP_PLOT_FILE,
        title=f"Per-class AP at delta={report.spec.selection_delta}",
    )
    return output_dir / REPORT_FILE


def load_report(path: Union[str, Path]) -> EvaluationReport:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"No evaluation report at {path}")
    return EvaluationReport.model_validate_json(path.read_text(encoding="utf-8"))


def resolve_eval_spec(
    spec: EvalSpec, override: Optional[EvalSpec] = None, tolerance_seconds: bool = False, fps: float = 25.0
) -> EvalSpec:
    """
    The EvalSpec an evaluation runs with.

    An explicit override replaces the checkpoint's spec. With
    tolerance_seconds the tolerance set becomes the 1-4 s (tight) and
    5-60 s (loose) ranges converted to frames at the dataset fps, keeping
    the Soft-NMS and selection settings.
    """
    spec = override or spec
    if tolerance_seconds:
        spec = EvalSpec.from_seconds(
            fps,
            deltas=[spec.selection_delta],
            class_names=spec.class_names,
            nms_window=spec.nms_window,
            score_threshold=spec.score_threshold,
            selection_delta=spec.selection_delta,
        )
    return spec


def run_evaluation(
    checkpoint_path: Union[str, Path],
    data_dir: Union[str, Path],
    output_dir: Optional[Union[str, Path]] = None,
    split: Split = Split.TEST,
    oracle: bool = False,
    device: Union[str, torch.device] = "cpu",
    eval_spec: Optional[EvalSpec] = None,
    tolerance_seconds: bool = False,
    predictions_path: Optional[Union[str, Path]] = None,
) -> EvaluationReport:
    """
    Evaluate a checkpoint on one split of a dataset directory.

    Args:
        checkpoint_path: Checkpoint written by training
        data_dir: Dataset directory
        output_dir: Destination (default: <checkpoint dir>/eval/<split>)
        split: Dataset split to evaluate
        oracle: Score the ground truth itself instead of model predictions
        device: Torch device for inference
        eval_spec: Replaces the evaluation spec stored in the checkpoint
        tolerance_seconds: Use second-based tolerance ranges at the dataset fps
        predictions_path: Re-score an existing prediction file instead of running the model

    Returns:
        The EvaluationReport that was written
    """
    if oracle and predictions_path is not None:
        raise EvaluationError("Oracle mode and a prediction file are mutually exclusive")

    split = Split(split)
    checkpoint = load_checkpoint(checkpoint_path)
    manifest, records = load_dataset(data_dir, split)
    if not records:
        raise EvaluationError(f"Split '{split.value}' of {data_dir} holds no videos")

    config = checkpoint.config
    if len(manifest.class_names) != config.dataset.num_classes:
        raise EvaluationError(
            f"Checkpoint predicts {config.dataset.num_classes} classes, dataset has {len(manifest.class_names)}"
        )

    spec = resolve_eval_spec(config.eval, eval_spec, tolerance_seconds, manifest.fps)
    class_names = spec.class_names or manifest.class_names
    output_dir = Path(output_dir) if output_dir else Path(checkpoint_path).parent / "eval" / split.value

    if oracle:
        logger.info("Oracle mode: scoring ground truth as predictions")
        predictions = oracle_predictions(records)
        report = evaluate_predictions(predictions, ground_truth(records), spec, class_names)
    elif predictions_path is not None:
        predictions = read_predictions(predictions_path, class_names)
        known = {r.video_id for r in records}
        stray = sorted({p.video_id for p in predictions} - known)
        if stray:
            raise EvaluationError(f"{predictions_path} has predictions for videos outside '{split.value}': {stray[:5]}")
        logger.info(f"Re-scoring {len(predictions)} predictions from {predictions_path}")
        report = evaluate_predictions(predictions, ground_truth(records), spec, class_names)
    else:
        model = restore_model(checkpoint).to(device)
        report, predictions = evaluate_model(
            model, records, config.clip_len, spec, class_names, batch_size=config.eval_batch_size, device=device
        )

    write_report(report, predictions, output_dir)
    logger.info(
        f"Evaluated {len(records)} {split.value} videos: "
        f"mAP@{spec.selection_delta}={report.selection_map:.4f}, "
        + ", ".join(f"{name}={value:.4f}" for name, value in report.range_maps.items())
    )
    return report
