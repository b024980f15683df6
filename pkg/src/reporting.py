"""
Static plots and the cross-run comparison table.
"""

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from .config import load_train_config  # noqa: E402
from .errors import EvaluationError  # noqa: E402
from .network import build_model, parameter_table  # noqa: E402

COMPARISON_FILE = "comparison.csv"
COMPARISON_PLOT = "per_class_ap.png"
DISTRIBUTION_FILE = "class_distribution.csv"
DISTRIBUTION_PLOT = "class_distribution.png"


def plot_per_class_ap(series_by_run: dict[str, pd.Series], path: Union[str, Path], title: str = "") -> Path:
    """Grouped bar chart: one group per class, one bar per run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(series_by_run)

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(frame)), 3.5))
    width = 0.8 / max(1, len(frame.columns))
    positions = np.arange(len(frame))
    for i, run in enumerate(frame.columns):
        ax.bar(positions + i * width, frame[run].fillna(0.0).values, width, label=str(run))
    ax.set_xticks(positions + width * (len(frame.columns) - 1) / 2)
    ax.set_xticklabels([str(name) for name in frame.index], rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("AP")
    if title:
        ax.set_title(title)
    if len(frame.columns) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_class_distribution(counts: list[int], class_names: list[str], output_dir: Union[str, Path]) -> pd.DataFrame:
    """Per-class event counts as CSV and bar chart."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({"class_id": range(len(counts)), "class_name": class_names, "events": counts})
    df.to_csv(output_dir / DISTRIBUTION_FILE, index=False)

    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(counts)), 3.0))
    ax.bar(df["class_name"], df["events"])
    ax.set_ylabel("events")
    ax.set_title("Class distribution")
    fig.tight_layout()
    fig.savefig(output_dir / DISTRIBUTION_PLOT, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return df


def compare_runs(run_dirs: list[Union[str, Path]], split: str = "test") -> pd.DataFrame:
    """
    One row per run: ablation switches, selection mAP, parameter counts
    (total and per sub-module), range mAPs and per-class AP at the
    selection tolerance.

    Args:
        run_dirs: Training output directories, each evaluated on `split`
        split: Which evaluation to read (<run>/eval/<split>/report.json)

    Returns:
        Comparison DataFrame
    """
    from .evaluator import REPORT_FILE, load_report

    if not run_dirs:
        raise EvaluationError("No runs to compare")

    rows = []
    reference = None
    for run_dir in map(Path, run_dirs):
        report = load_report(run_dir / "eval" / split / REPORT_FILE)
        signature = (report.spec.deltas, report.spec.ranges, report.spec.selection_delta)
        if reference is None:
            reference = signature
        elif signature != reference:
            raise EvaluationError(f"{run_dir} was evaluated with a different tolerance spec")

        config = load_train_config(run_dir / "config.json")
        flags = config.ablation
        delta = report.spec.selection_delta
        row = {
            "run": run_dir.name,
            "astrm": flags.astrm,
            "sharpness": flags.sharpness,
            "contrastive": flags.contrastive,
            "mixup": flags.mixup,
            "temporal": config.temporal.kind,
            f"map@{delta}": report.selection_map,
        }
        sizes = parameter_table(build_model(config)).set_index("module")["parameters"]
        row["parameters"] = int(sizes["total"])
        row.update({f"params/{name}": int(n) for name, n in sizes.drop("total").items()})
        row.update({f"map_{name}": value for name, value in report.range_maps.items()})
        row.update({f"ap@{delta}/{c.class_name}": (c.ap[delta] if c.included else np.nan) for c in report.classes})
        rows.append(row)

    return pd.DataFrame(rows)


def write_comparison(
    run_dirs: list[Union[str, Path]], output_dir: Union[str, Path], split: str = "test"
) -> pd.DataFrame:
    """Write comparison.csv and the grouped per-class AP chart."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    df = compare_runs(run_dirs, split)
    df.to_csv(output_dir / COMPARISON_FILE, index=False, float_format="%.6f")

    ap_columns = [c for c in df.columns if c.startswith("ap@")]
    series = {
        row["run"]: pd.Series({c.split("/", 1)[1]: row[c] for c in ap_columns}) for _, row in df.iterrows()
    }
    plot_per_class_ap(series, output_dir / COMPARISON_PLOT, title="Per-class AP by run")
    logger.info(f"Compared {len(df)} runs, table written to {output_dir / COMPARISON_FILE}")
    return df
