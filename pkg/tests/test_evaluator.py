"""
Tests for the evaluation workflow and run comparison.
"""

import json

import pandas as pd
import pytest

from src.data_synth import generate_dataset, save_dataset
from src.errors import CheckpointError, EvaluationError
from src.evaluator import (
    AP_PLOT_FILE,
    PREDICTIONS_FILE,
    REPORT_FILE,
    SUMMARY_FILE,
    load_report,
    oracle_predictions,
    run_evaluation,
    selection_spec,
)
from src.models import EvalSpec, Split, SyntheticDatasetSpec
from src.network import build_model, count_parameters
from src.reporting import compare_runs, write_class_distribution, write_comparison
from src.spotting import read_predictions
from src.trainer import BEST_CHECKPOINT


class TestRunEvaluation:
    """Tests for run_evaluation."""

    def test_oracle_scores_one(self, trained_run, tiny_dataset_dir):
        """Test that ground truth scored as predictions gives mAP 1 at every tolerance."""
        report = run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN, oracle=True)

        assert all(value == 1.0 for value in report.map_by_delta.values())
        assert report.range_maps["tight"] == 1.0

    def test_default_output_dir(self, trained_run, tiny_dataset_dir):
        """Test that reports land next to the checkpoint by default."""
        run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN)

        out = trained_run / "eval" / "train"
        for name in (REPORT_FILE, PREDICTIONS_FILE, SUMMARY_FILE, AP_PLOT_FILE, "per_class_ap.csv"):
            assert (out / name).exists()
        report = load_report(out / REPORT_FILE)
        assert set(report.map_by_delta) == {0, 1, 2}
        assert all(0.0 <= v <= 1.0 for v in report.map_by_delta.values())

    def test_predictions_file_matches_report(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test that the written predictions are the ones evaluated."""
        report = run_evaluation(
            trained_run / BEST_CHECKPOINT, tiny_dataset_dir, output_dir=temp_dir / "ev", split=Split.TRAIN
        )
        names = [c.class_name for c in report.classes]

        assert len(read_predictions(temp_dir / "ev" / PREDICTIONS_FILE, names)) == report.num_predictions

    def test_empty_predictions_score_zero(self, trained_run, tiny_dataset_dir, monkeypatch):
        """Test that a model that spots nothing scores mAP 0."""
        monkeypatch.setattr("src.evaluator.predict_videos", lambda *args, **kwargs: [])

        report = run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN)

        assert all(value == 0.0 for value in report.map_by_delta.values())
        assert report.num_predictions == 0

    def test_missing_checkpoint(self, tiny_dataset_dir, temp_dir):
        """Test that a missing checkpoint is reported."""
        with pytest.raises(CheckpointError):
            run_evaluation(temp_dir / "none.npz", tiny_dataset_dir)

    def test_class_count_mismatch(self, trained_run, temp_dir):
        """Test that the dataset must match the checkpoint's classes."""
        spec = SyntheticDatasetSpec(
            num_videos=4,
            frames_per_video=32,
            height=16,
            width=16,
            num_classes=2,
            class_rates=[1.0, 1.0],
            val_fraction=0.0,
            test_fraction=0.0,
        )
        save_dataset(generate_dataset(spec), temp_dir / "other", spec)

        with pytest.raises(EvaluationError):
            run_evaluation(trained_run / BEST_CHECKPOINT, temp_dir / "other", split=Split.TRAIN)

    def test_eval_spec_override(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test that an explicit spec replaces the tolerances stored in the checkpoint."""
        override = EvalSpec(deltas=[1, 4], ranges={"wide": [4]}, nms_window=6)

        report = run_evaluation(
            trained_run / BEST_CHECKPOINT, tiny_dataset_dir, temp_dir / "ev", split=Split.TRAIN, eval_spec=override
        )

        assert set(report.map_by_delta) == {1, 4}
        assert set(report.range_maps) == {"wide"}
        assert load_report(temp_dir / "ev" / REPORT_FILE).spec == override

    def test_tolerance_seconds(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test second-based ranges at 25 fps: tight 25..100 and loose 125..1500 frames."""
        report = run_evaluation(
            trained_run / BEST_CHECKPOINT,
            tiny_dataset_dir,
            temp_dir / "ev",
            split=Split.TRAIN,
            oracle=True,
            tolerance_seconds=True,
        )

        assert report.spec.ranges["tight"] == list(range(25, 101))
        assert report.spec.ranges["loose"] == list(range(125, 1501))
        assert report.spec.selection_delta == 1 and 1 in report.map_by_delta
        assert report.spec.nms_window == 6
        assert report.range_maps == {"tight": 1.0, "loose": 1.0}

    def test_rescore_prediction_file(self, trained_run, tiny_dataset_dir, temp_dir, monkeypatch):
        """Test that a written prediction file re-scores to the same report without running the model."""
        first = run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, temp_dir / "a", split=Split.TRAIN)
        monkeypatch.setattr("src.evaluator.restore_model", lambda *args: pytest.fail("model was restored"))

        second = run_evaluation(
            trained_run / BEST_CHECKPOINT,
            tiny_dataset_dir,
            temp_dir / "b",
            split=Split.TRAIN,
            predictions_path=temp_dir / "a" / PREDICTIONS_FILE,
        )

        assert second.num_predictions == first.num_predictions
        written = [(temp_dir / run / PREDICTIONS_FILE).read_text().splitlines() for run in ("a", "b")]
        assert sorted(written[0]) == sorted(written[1])
        assert second.map_by_delta == pytest.approx(first.map_by_delta, abs=1e-6)

    def test_prediction_file_from_other_split(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test that predictions for videos outside the split are rejected."""
        path = temp_dir / "p.csv"
        path.write_text("video_id,frame,class_name,score\nnot_a_video,3,event_0,0.5\n")

        with pytest.raises(EvaluationError):
            run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN, predictions_path=path)

    def test_oracle_excludes_prediction_file(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test that oracle mode and a prediction file cannot be combined."""
        with pytest.raises(EvaluationError):
            run_evaluation(
                trained_run / BEST_CHECKPOINT, tiny_dataset_dir, oracle=True, predictions_path=temp_dir / "p.csv"
            )

    def test_oracle_predictions(self, single_event_record):
        """Test that oracle predictions mirror the annotations."""
        (prediction,) = oracle_predictions([single_event_record])

        assert (prediction.frame, prediction.class_id, prediction.score) == (10, 1, 1.0)

    def test_selection_spec(self):
        """Test the single-tolerance spec used during training."""
        spec = selection_spec(EvalSpec(deltas=[0, 1, 2], ranges={"tight": [1, 2]}, nms_window=6))

        assert spec.deltas == [1]
        assert spec.ranges == {}
        assert spec.nms_window == 6


class TestReporting:
    """Tests for the comparison table and plots."""

    def test_single_run_comparison(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test one row per run with ablation switches and AP columns."""
        run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN)

        df = write_comparison([trained_run], temp_dir / "cmp", split="train")

        assert len(df) == 1
        row = df.iloc[0]
        assert row["run"] == "run"
        assert bool(row["astrm"]) is True
        assert row["sharpness"] == "asam"
        assert "map@1" in df.columns and "map_tight" in df.columns
        assert any(c.startswith("ap@1/") for c in df.columns)
        assert (temp_dir / "cmp" / "comparison.csv").exists()
        assert (temp_dir / "cmp" / "per_class_ap.png").exists()

    def test_parameter_columns(self, trained_run, tiny_dataset_dir, tiny_train_config):
        """Test the total parameter count and its per-sub-module breakdown."""
        run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN)

        row = compare_runs([trained_run], split="train").iloc[0]

        parts = ["backbone", "temporal", "classifier", "projection"]
        assert row["parameters"] == count_parameters(build_model(tiny_train_config))
        assert sum(row[f"params/{name}"] for name in parts) == row["parameters"]

    def test_incompatible_specs(self, trained_run, tiny_dataset_dir, temp_dir):
        """Test that runs evaluated with different tolerances are not compared."""
        run_evaluation(trained_run / BEST_CHECKPOINT, tiny_dataset_dir, split=Split.TRAIN)
        other = temp_dir / "other"
        (other / "eval" / "train").mkdir(parents=True)
        (other / "config.json").write_text((trained_run / "config.json").read_text())
        report = json.loads((trained_run / "eval" / "train" / REPORT_FILE).read_text())
        report["spec"]["deltas"] = [0, 1, 2, 3]
        (other / "eval" / "train" / REPORT_FILE).write_text(json.dumps(report))

        with pytest.raises(EvaluationError):
            compare_runs([trained_run, other], split="train")

    def test_missing_evaluation(self, trained_run):
        """Test that a run without an evaluation report is an error."""
        with pytest.raises(EvaluationError):
            compare_runs([trained_run], split="val")

    def test_class_distribution(self, temp_dir):
        """Test the class distribution table and chart."""
        df = write_class_distribution([10, 3, 1], ["a", "b", "c"], temp_dir)

        assert df["events"].tolist() == [10, 3, 1]
        assert pd.read_csv(temp_dir / "class_distribution.csv")["class_name"].tolist() == ["a", "b", "c"]
        assert (temp_dir / "class_distribution.png").exists()
