"""
Training log module: one CSV row per epoch, read back with pandas for
summaries and plots.
"""

import csv
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from loguru import logger

from .models import EpochRecord

LOG_COLUMNS = list(EpochRecord.model_fields)


class TrainingLog:
    """Per-epoch loss components, learning rate and validation score."""

    def __init__(self, log_path: Union[str, Path]):
        self.log_path = Path(log_path)
        self._ensure_log_exists()

    def _ensure_log_exists(self):
        """Create the CSV file with headers if it doesn't exist."""
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        if not self.log_path.exists():
            with open(self.log_path, "w", newline="", encoding="utf-8") as file:
                csv.writer(file).writerow(LOG_COLUMNS)
            logger.info(f"Created training log: {self.log_path}")

    def append(self, record: EpochRecord):
        """Append one epoch row."""
        row = record.model_dump()
        row["recorded_at"] = record.recorded_at.isoformat()
        row["val_map"] = "" if record.val_map is None else repr(record.val_map)
        with open(self.log_path, "a", newline="", encoding="utf-8") as file:
            csv.writer(file).writerow([row[c] for c in LOG_COLUMNS])
        logger.debug(f"Logged epoch {record.epoch}")

    def truncate(self, last_epoch: int) -> int:
        """
        Drop rows after `last_epoch`, used when resuming from a checkpoint.

        Returns:
            Number of rows removed
        """
        df = self.frame()
        if df.empty:
            return 0
        kept = df[df["epoch"] <= last_epoch]
        kept.to_csv(self.log_path, index=False)
        removed = len(df) - len(kept)
        if removed:
            logger.info(f"Removed {removed} log rows after epoch {last_epoch}")
        return removed

    def frame(self) -> pd.DataFrame:
        """The log as a DataFrame (empty if nothing was logged)."""
        if not self.log_path.exists():
            return pd.DataFrame(columns=LOG_COLUMNS)
        return pd.read_csv(self.log_path)

    def records(self, limit: Optional[int] = None) -> list[EpochRecord]:
        """Parse the log back into EpochRecords."""
        df = self.frame()
        if limit:
            df = df.tail(limit)

        records = []
        for data in df.to_dict(orient="records"):
            if pd.isna(data.get("val_map")):
                data["val_map"] = None
            records.append(EpochRecord.model_validate(data))
        return records

    def stats(self) -> dict:
        """Summary statistics of the run so far."""
        df = self.frame()
        if df.empty:
            return {}

        evaluated = df.dropna(subset=["val_map"])
        best = evaluated.loc[evaluated["val_map"].idxmax()] if not evaluated.empty else None
        return {
            "epochs": int(df["epoch"].max()),
            "final_total_loss": float(df["total"].iloc[-1]),
            "final_bce": float(df["bce"].iloc[-1]),
            "skipped_steps": int(df["skipped_steps"].sum()),
            "best_epoch": int(best["epoch"]) if best is not None else None,
            "best_val_map": float(best["val_map"]) if best is not None else None,
            "train_seconds": float(df["seconds"].sum()),
        }
