"""
Tolerance-based average precision.

A prediction is a true positive when an unmatched ground-truth event of the
same class and video lies within delta frames. Predictions are processed by
score descending (ties: frame ascending, then video id) and each one takes the
nearest unmatched truth (ties: the earlier frame). AP is the non-interpolated
area under the precision/recall staircase:

    AP = (1 / |truths|) * sum over true positives k of precision@k
"""

import math
from typing import Optional, Sequence, Union

import pandas as pd
from loguru import logger
from pydantic import BaseModel

from .errors import EvaluationError
from .models import EvalSpec, EventPrediction

Truth = Union[int, tuple[str, int]]


def _truth_key(truth: Truth) -> tuple[Optional[str], int]:
    if isinstance(truth, tuple):
        return truth[0], int(truth[1])
    return None, int(truth)


def match_predictions(predictions: Sequence[EventPrediction], truths: Sequence[Truth], delta: int) -> list[bool]:
    """
    Greedy matching in score order.

    Args:
        predictions: Predictions of one class
        truths: Event frames, or (video_id, frame) pairs when pooling videos
        delta: Tolerance in frames

    Returns:
        True-positive flag per prediction, in processing order
    """
    keyed = [_truth_key(t) for t in truths]
    by_video = any(video is not None for video, _ in keyed)
    unmatched: dict[Optional[str], list[int]] = {}
    for video, frame in keyed:
        unmatched.setdefault(video, []).append(frame)

    flags = []
    for p in sorted(predictions, key=lambda p: (-p.score, p.frame, p.video_id)):
        pool = unmatched.get(p.video_id if by_video else None, [])
        best = None
        for i, frame in enumerate(pool):
            gap = abs(frame - p.frame)
            if gap <= delta and (best is None or (gap, frame) < (abs(pool[best] - p.frame), pool[best])):
                best = i
        if best is None:
            flags.append(False)
        else:
            pool.pop(best)
            flags.append(True)
    return flags


def average_precision(predictions: Sequence[EventPrediction], truths: Sequence[Truth], delta: int) -> float:
    """AP in [0, 1] for one class; 0.0 when there are no truths."""
    if delta < 0:
        raise EvaluationError(f"Tolerance must be non-negative, got {delta}")
    if not truths:
        return 0.0

    flags = match_predictions(predictions, truths, delta)
    precisions = []
    hits = 0
    for rank, hit in enumerate(flags, start=1):
        if hit:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / len(truths)


def mean_ap(per_class_ap: dict[int, float]) -> float:
    """Unweighted mean over included classes."""
    if not per_class_ap:
        raise EvaluationError("No class with ground-truth events; mAP is undefined")
    return math.fsum(per_class_ap.values()) / len(per_class_ap)


def range_map(per_delta_map: dict[int, float], deltas: Sequence[int]) -> float:
    """Unweighted mean of mAP over a set of tolerances."""
    missing = sorted(set(deltas) - set(per_delta_map))
    if missing:
        raise EvaluationError(f"mAP not computed for tolerances {missing}")
    if not deltas:
        raise EvaluationError("Empty tolerance range")
    return math.fsum(per_delta_map[d] for d in deltas) / len(deltas)


class ClassResult(BaseModel):
    class_id: int
    class_name: str
    num_truths: int
    num_predictions: int
    included: bool
    ap: dict[int, float]


class EvaluationReport(BaseModel):
    """Per-class AP at every tolerance, per-tolerance mAP and range mAPs."""

    spec: EvalSpec
    classes: list[ClassResult]
    map_by_delta: dict[int, float]
    range_maps: dict[str, float]
    num_predictions: int
    num_truths: int

    @property
    def selection_map(self) -> float:
        return self.map_by_delta[self.spec.selection_delta]

    def ap_frame(self) -> pd.DataFrame:
        """One row per class, one column per tolerance."""
        rows = []
        for result in self.classes:
            row = {
                "class_id": result.class_id,
                "class_name": result.class_name,
                "num_truths": result.num_truths,
                "num_predictions": result.num_predictions,
                "included": result.included,
            }
            row.update({f"ap@{d}": result.ap[d] for d in self.spec.deltas})
            rows.append(row)
        return pd.DataFrame(rows)

    def summary_frame(self) -> pd.DataFrame:
        rows = [{"metric": f"map@{d}", "value": v} for d, v in sorted(self.map_by_delta.items())]
        rows += [{"metric": f"map_{name}", "value": v} for name, v in self.range_maps.items()]
        return pd.DataFrame(rows)


def evaluate_predictions(
    predictions: Sequence[EventPrediction],
    truths: dict[str, list[tuple[int, int]]],
    spec: EvalSpec,
    class_names: list[str],
) -> EvaluationReport:
    """
    Evaluate predictions of many videos against their ground truth.

    Args:
        predictions: Predictions of every video and class
        truths: video_id -> [(frame, class_id)]
        spec: Tolerances and named ranges
        class_names: Name per class id

    Returns:
        EvaluationReport; classes without truths are reported but excluded from mAP
    """
    num_classes = len(class_names)
    pred_by_class: dict[int, list[EventPrediction]] = {c: [] for c in range(num_classes)}
    truth_by_class: dict[int, list[tuple[str, int]]] = {c: [] for c in range(num_classes)}

    for p in predictions:
        if p.class_id >= num_classes:
            raise EvaluationError(f"Prediction class {p.class_id} outside the {num_classes} known classes")
        pred_by_class[p.class_id].append(p)
    for video_id, events in truths.items():
        for frame, class_id in events:
            if class_id >= num_classes:
                raise EvaluationError(f"Ground-truth class {class_id} outside the {num_classes} known classes")
            truth_by_class[class_id].append((video_id, frame))

    results = []
    for c in range(num_classes):
        ap = {d: average_precision(pred_by_class[c], truth_by_class[c], d) for d in spec.deltas}
        results.append(
            ClassResult(
                class_id=c,
                class_name=class_names[c],
                num_truths=len(truth_by_class[c]),
                num_predictions=len(pred_by_class[c]),
                included=bool(truth_by_class[c]),
                ap=ap,
            )
        )
        if not truth_by_class[c]:
            logger.warning(f"Class {class_names[c]} has no ground-truth events, excluded from mAP")

    included = [r for r in results if r.included]
    map_by_delta = {d: mean_ap({r.class_id: r.ap[d] for r in included}) for d in spec.deltas}
    range_maps = {name: range_map(map_by_delta, members) for name, members in spec.ranges.items()}

    return EvaluationReport(
        spec=spec,
        classes=results,
        map_by_delta=map_by_delta,
        range_maps=range_maps,
        num_predictions=len(predictions),
        num_truths=sum(r.num_truths for r in results),
    )
