"""
Training workflow: clip sampling, mixup, the combined objective under
sharpness-aware optimization, memory bank updates, validation-based
checkpoint selection and the per-epoch training log.
"""

import math
import time
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel

from .checkpoint import CheckpointInfo, load_checkpoint, save_checkpoint
from .config import save_train_config, settings
from .data_synth import augment_batch, collate_clips, load_dataset, sample_training_clips
from .errors import ConfigurationError, EvaluationError, NumericalError
from .evaluator import evaluate_model, selection_spec
from .losses import LossBreakdown, MemoryBank, combined_loss, mixup_batch, update_bank
from .models import EpochRecord, Split, TrainConfig, VideoClip
from .network import build_model, count_parameters
from .optim import build_optimizer, lr_at, set_learning_rate
from .training_log import TrainingLog

LAST_CHECKPOINT = "last.npz"
BEST_CHECKPOINT = "best.npz"
CONFIG_FILE = "config.json"
LOG_FILE = "train_log.csv"


class TrainResult(BaseModel):
    output_dir: str
    epochs_run: int
    best_epoch: Optional[int] = None
    best_map: Optional[float] = None
    parameters: int
    skipped_steps: int = 0


class Trainer:
    """Owns the model, optimizer and memory bank of one training run."""

    def __init__(
        self,
        config: TrainConfig,
        data_dir: Union[str, Path],
        output_dir: Union[str, Path],
        device: Optional[Union[str, torch.device]] = None,
    ):
        self.config = config
        self.data_dir = Path(data_dir)
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.device = torch.device(device) if device is not None else settings.resolve_device()
        self.training_log = TrainingLog(self.output_dir / LOG_FILE)
        self._sink_id: Optional[int] = None

        manifest, records = load_dataset(self.data_dir)
        if len(manifest.class_names) != config.dataset.num_classes:
            raise ConfigurationError(
                f"Dataset has {len(manifest.class_names)} classes, config expects {config.dataset.num_classes}",
                fields=["dataset.num_classes"],
            )
        self.class_names = config.eval.class_names or manifest.class_names
        by_id = {r.video_id: r for r in records}
        self.train_records = [by_id[v] for v in sorted(manifest.splits.get(Split.TRAIN.value, []))]
        self.val_records = [by_id[v] for v in sorted(manifest.splits.get(Split.VAL.value, []))]
        if not self.train_records:
            raise ConfigurationError("Dataset has no training videos", fields=["dataset.val_fraction"])

        torch.manual_seed(config.seed)
        self.model = build_model(config).to(self.device)
        self.optimizer = build_optimizer(self.model, config.optim)
        self.bank = MemoryBank(config.dataset.num_classes, config.loss.bank_size, config.loss.embedding_dim)
        self.start_epoch = 0
        self.best_map: Optional[float] = None
        self.best_epoch: Optional[int] = None

    def _setup_logging(self):
        """Add a run-local file sink."""
        self._sink_id = logger.add(
            self.output_dir / "train.log",
            level=settings.log_level,
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
            rotation="10 MB",
            retention=5,
        )

    def _teardown_logging(self):
        if self._sink_id is not None:
            logger.remove(self._sink_id)
            self._sink_id = None

    def resume(self) -> bool:
        """
        Restore state from last.npz if present.

        Returns:
            True if a checkpoint was loaded
        """
        path = self.output_dir / LAST_CHECKPOINT
        if not path.exists():
            logger.info(f"No checkpoint in {self.output_dir}, starting from scratch")
            return False

        checkpoint = load_checkpoint(path)
        if checkpoint.config.model_dump() != self.config.model_dump():
            raise ConfigurationError(
                f"{path} was written with a different configuration; resume needs the same config",
                fields=["config"],
            )
        self.model.load_state_dict(checkpoint.weights)
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.bank_state is not None:
            self.bank.load_state_dict(checkpoint.bank_state)
        self.start_epoch = checkpoint.info.epoch
        self.best_map = checkpoint.info.best_map
        self.best_epoch = checkpoint.info.best_epoch
        self.training_log.truncate(self.start_epoch)
        logger.info(f"Resumed from {path} after epoch {self.start_epoch}")
        return True

    def epoch_clips(self, epoch: int) -> list[VideoClip]:
        """Shuffled training clips of one epoch; a pure function of (seed, epoch)."""
        rng = np.random.default_rng([self.config.seed, epoch])
        clips = []
        for record in self.train_records:
            clips.extend(
                sample_training_clips(
                    record, self.config.clips_per_video, self.config.clip_len, rng, self.config.label_dilation
                )
            )
        order = rng.permutation(len(clips))
        return [clips[i] for i in order]

    def _dump_batch(self, step: int, frames: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> Path:
        path = self.output_dir / f"nonfinite_batch_{step}.npz"
        np.savez(
            path,
            frames=frames.detach().cpu().numpy(),
            labels=labels.detach().cpu().numpy(),
            mask=mask.detach().cpu().numpy(),
        )
        return path

    def train_epoch(self, epoch: int) -> EpochRecord:
        """Run one epoch (1-based)."""
        cfg = self.config
        started = time.monotonic()
        self.model.train()
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        clips = self.epoch_clips(epoch)
        steps = math.ceil(len(clips) / cfg.batch_size)
        contrastive_enabled = epoch > cfg.loss.contrastive_warmup_epochs
        skipped_before = self.optimizer.skipped_steps
        if contrastive_enabled and cfg.loss.contrastive != "none" and not self.bank.is_ready():
            logger.warning(
                f"epoch {epoch}: memory bank not ready (sizes {self.bank.sizes()}), "
                "contrastive term covers only classes with positives and negatives"
            )

        totals = {"bce": 0.0, "contrastive": 0.0, "total": 0.0}
        samples = 0
        lr = lr_at(epoch - 1, cfg.optim)

        for i in range(steps):
            step_id = (epoch - 1) * steps + i
            lr = lr_at(epoch - 1 + i / steps, cfg.optim)
            set_learning_rate(self.optimizer, lr)

            frames, labels, mask = collate_clips(clips[i * cfg.batch_size : (i + 1) * cfg.batch_size])
            frames = augment_batch(frames, rng, cfg.augment)
            if cfg.loss.mixup_enabled and frames.shape[0] > 1:
                frames, labels, mask, _ = mixup_batch(frames, labels, mask, cfg.loss.mixup_alpha, rng)
            frames, labels, mask = frames.to(self.device), labels.to(self.device), mask.to(self.device)

            evaluations: list[LossBreakdown] = []

            def closure():
                output = self.model(frames)
                breakdown = combined_loss(
                    output.logits, labels, mask, output.contrastive, self.bank, cfg.loss, contrastive_enabled
                )
                breakdown.total.backward()
                evaluations.append(breakdown)
                return breakdown.total

            self.optimizer.step(closure)
            first = evaluations[0]

            if not torch.isfinite(first.total):
                path = self._dump_batch(step_id, frames, labels, mask)
                logger.error(f"Non-finite loss at epoch {epoch}, batch {step_id}; batch saved to {path}")
                raise NumericalError(f"Non-finite loss at batch {step_id}", batch_id=step_id, dump_path=str(path))

            update_bank(self.bank, first.samples)
            totals["bce"] += float(first.bce.detach())
            totals["contrastive"] += float(first.contrastive.detach())
            totals["total"] += float(first.total.detach())
            samples += first.num_samples
            logger.debug(
                f"epoch {epoch} batch {i + 1}/{steps}: loss={float(first.total):.5f} lr={lr:.2e} bank={len(self.bank)}"
            )

        return EpochRecord(
            epoch=epoch,
            bce=totals["bce"] / steps,
            contrastive=totals["contrastive"] / steps,
            total=totals["total"] / steps,
            lr=lr,
            skipped_steps=self.optimizer.skipped_steps - skipped_before,
            contrastive_samples=samples,
            bank_ready=self.bank.is_ready(),
            seconds=time.monotonic() - started,
        )

    def validate(self) -> Optional[float]:
        """mAP at the selection tolerance on the validation videos."""
        if not self.val_records:
            return None
        try:
            report, _ = evaluate_model(
                self.model,
                self.val_records,
                self.config.clip_len,
                selection_spec(self.config.eval),
                self.class_names,
                batch_size=self.config.eval_batch_size,
                device=self.device,
            )
        except EvaluationError as e:
            logger.warning(f"Validation skipped: {e}")
            return None
        return report.selection_map

    def _info(self, epoch: int) -> CheckpointInfo:
        return CheckpointInfo(
            epoch=epoch,
            best_map=self.best_map,
            best_epoch=self.best_epoch,
            skipped_steps=self.optimizer.skipped_steps,
            class_names=self.class_names,
        )

    def train(self, resume: bool = False) -> TrainResult:
        """
        Train for the configured number of epochs.

        Args:
            resume: Continue from last.npz in the output directory

        Returns:
            TrainResult summary
        """
        self._setup_logging()
        try:
            if resume:
                self.resume()
            save_train_config(self.config, self.output_dir / CONFIG_FILE)

            logger.info(
                f"Training {count_parameters(self.model):,} parameters on {self.device}: "
                f"{len(self.train_records)} train / {len(self.val_records)} val videos, "
                f"epochs {self.start_epoch + 1}..{self.config.epochs}"
            )

            for epoch in range(self.start_epoch + 1, self.config.epochs + 1):
                record = self.train_epoch(epoch)

                if epoch % self.config.eval_every == 0 or epoch == self.config.epochs:
                    record.val_map = self.validate()

                improved = (
                    record.val_map is not None and (self.best_map is None or record.val_map > self.best_map)
                ) or (not self.val_records and epoch == self.config.epochs)
                if improved:
                    self.best_map = record.val_map
                    self.best_epoch = epoch
                    record.is_best = True

                info = self._info(epoch)
                state = (self.model, self.config, info, self.optimizer, self.bank)
                save_checkpoint(self.output_dir / LAST_CHECKPOINT, *state)
                if improved:
                    save_checkpoint(self.output_dir / BEST_CHECKPOINT, *state)
                    logger.info(f"New best checkpoint at epoch {epoch}")

                self.training_log.append(record)
                logger.info(
                    f"Epoch {epoch}/{self.config.epochs}: total={record.total:.5f} bce={record.bce:.5f} "
                    f"contrastive={record.contrastive:.5f} lr={record.lr:.2e} skipped={record.skipped_steps}"
                    + (f" val_map={record.val_map:.4f}" if record.val_map is not None else "")
                )

            if not (self.output_dir / BEST_CHECKPOINT).exists() and (self.output_dir / LAST_CHECKPOINT).exists():
                # Validation never produced a score; fall back to the final weights.
                (self.output_dir / BEST_CHECKPOINT).write_bytes((self.output_dir / LAST_CHECKPOINT).read_bytes())

            stats = self.training_log.stats()
            return TrainResult(
                output_dir=str(self.output_dir),
                epochs_run=stats.get("epochs", 0),
                best_epoch=self.best_epoch,
                best_map=self.best_map,
                parameters=count_parameters(self.model),
                skipped_steps=self.optimizer.skipped_steps,
            )
        finally:
            self._teardown_logging()


def run_training(
    config: TrainConfig,
    data_dir: Union[str, Path],
    output_dir: Union[str, Path],
    resume: bool = False,
    device: Optional[Union[str, torch.device]] = None,
) -> TrainResult:
    """Convenience wrapper used by the CLI."""
    return Trainer(config, data_dir, output_dir, device=device).train(resume=resume)