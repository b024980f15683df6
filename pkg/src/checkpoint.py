"""
Checkpoint container: a single uncompressed .npz of named little-endian arrays.

Keys:
  model/<state_dict key>          parameters and buffers
  optim/state/<index>/<name>      base optimizer state tensors
  optim/param_groups              JSON (uint8 bytes)
  bank/<class>/embeddings|weights memory bank queues
  meta/config                     TrainConfig JSON (uint8 bytes)
  meta/info                       CheckpointInfo JSON (uint8 bytes)
"""

import json
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import CheckpointError
from .losses import MemoryBank
from .models import TrainConfig
from .network import SpotModel, build_model
from .optim import SharpnessAwareMinimizer


class CheckpointInfo(BaseModel):
    epoch: int  # last completed epoch, 1-based
    best_map: Optional[float] = None
    best_epoch: Optional[int] = None
    skipped_steps: int = 0
    class_names: list[str]


class LoadedCheckpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: TrainConfig
    info: CheckpointInfo
    weights: dict[str, Any]
    optimizer_state: Optional[dict[str, Any]] = None
    bank_state: Optional[dict[str, np.ndarray]] = None


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def _text(payload: str) -> np.ndarray:
    return np.frombuffer(payload.encode("utf-8"), dtype=np.uint8)


def _read_text(array: np.ndarray) -> str:
    return array.tobytes().decode("utf-8")


def _tensor_array(value: torch.Tensor) -> np.ndarray:
    return _little_endian(value.detach().cpu().numpy())


def save_checkpoint(
    path: Union[str, Path],
    model: SpotModel,
    config: TrainConfig,
    info: CheckpointInfo,
    optimizer: Optional[SharpnessAwareMinimizer] = None,
    bank: Optional[MemoryBank] = None,
) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename).

    Returns:
        Path of the written checkpoint
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}

    for name, value in model.state_dict().items():
        arrays[f"model/{name}"] = _tensor_array(value)

    if optimizer is not None:
        state = optimizer.base_optimizer.state_dict()
        for index, slots in state["state"].items():
            for slot, value in slots.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"optim/state/{index}/{slot}"] = _tensor_array(value)
                else:
                    arrays[f"optim/state/{index}/{slot}"] = np.asarray(value)
        arrays["optim/param_groups"] = _text(json.dumps(state["param_groups"]))

    if bank is not None:
        for key, value in bank.state_dict().items():
            arrays[f"bank/{key}"] = _little_endian(value)

    arrays["meta/config"] = _text(config.model_dump_json())
    arrays["meta/info"] = _text(info.model_dump_json())

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        np.savez(handle, **arrays)
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path} (epoch {info.epoch})")
    return path


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    """Read a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    try:
        config = TrainConfig.model_validate_json(_read_text(arrays["meta/config"]))
        info = CheckpointInfo.model_validate_json(_read_text(arrays["meta/info"]))
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"Checkpoint {path} has no valid metadata: {e}") from e

    weights = {k[len("model/") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}

    optimizer_state = None
    if "optim/param_groups" in arrays:
        state: dict[int, dict[str, torch.Tensor]] = {}
        for key, value in arrays.items():
            if key.startswith("optim/state/"):
                _, _, index, slot = key.split("/", 3)
                state.setdefault(int(index), {})[slot] = torch.from_numpy(value.copy())
        optimizer_state = {
            "base": {"state": state, "param_groups": json.loads(_read_text(arrays["optim/param_groups"]))},
            "skipped_steps": info.skipped_steps,
        }

    bank_state = {k[len("bank/") :]: v for k, v in arrays.items() if k.startswith("bank/")} or None

    return LoadedCheckpoint(
        config=config,
        info=info,
        weights=weights,
        optimizer_state=optimizer_state,
        bank_state=bank_state,
    )


def restore_model(checkpoint: LoadedCheckpoint) -> SpotModel:
    """Build the checkpoint's model and load its weights."""
    model = build_model(checkpoint.config)
    try:
        model.load_state_dict(checkpoint.weights, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint weights do not match the configured model: {e}") from e
    return model
