"""
Sharpness-aware optimization around an AdamW base optimizer, and the
warmup + cosine learning-rate schedule.
"""

import math
from typing import Callable, Iterable, Optional

import torch
import torch.nn as nn
from loguru import logger
from torch.nn.modules.batchnorm import _BatchNorm

from .models import OptimConfig

NORM_EPS = 1e-12


@torch.no_grad()
def compute_perturbation(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    rho: float,
    adaptive: bool,
    eta: float = 0.01,
) -> list[torch.Tensor]:
    """
    Ascent perturbation for every parameter.

    SAM:  eps = rho * g / ||g||
    ASAM: eps = rho * T^2 g / ||T g||,  T = |w| + eta (element-wise)

    Args:
        params: Parameter tensors w
        grads: Gradients at w, same order
        rho: Neighbourhood radius
        adaptive: Use the scale-adaptive (ASAM) neighbourhood
        eta: Element-scale floor for ASAM

    Returns:
        Perturbations, one per parameter
    """
    if adaptive:
        scales = [p.abs() + eta for p in params]
        scaled = [t * g for t, g in zip(scales, grads)]
    else:
        scales = [None] * len(params)
        scaled = list(grads)

    norm = torch.norm(torch.stack([torch.norm(s, p=2) for s in scaled]), p=2)
    factor = rho / (norm + NORM_EPS)
    return [(t * s if t is not None else s) * factor for t, s in zip(scales, scaled)]


RunningStats = list[tuple[_BatchNorm, dict[str, torch.Tensor]]]


def disable_running_stats(model: nn.Module) -> RunningStats:
    """Snapshot the BatchNorm buffers before a forward pass that must not update them."""
    saved = []
    for module in model.modules():
        if isinstance(module, _BatchNorm) and module.track_running_stats:
            buffers = {name: buf.detach().clone() for name, buf in module.named_buffers(recurse=False)}
            saved.append((module, buffers))
    return saved


@torch.no_grad()
def enable_running_stats(saved: RunningStats):
    """Put back the BatchNorm buffers captured by disable_running_stats."""
    for module, buffers in saved:
        for name, value in buffers.items():
            getattr(module, name).copy_(value)


class SharpnessAwareMinimizer:
    """
    Two-pass step: gradient at w, ascend to w + eps, gradient there, return to w,
    then let the base optimizer apply the second gradient.

    mode "none" performs a plain single-pass base optimizer step. When `model`
    is given, its BatchNorm running statistics only see the pass at w.
    """

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        base_optimizer: torch.optim.Optimizer,
        mode: str = "asam",
        rho: float = 2.0,
        eta: float = 0.01,
        model: Optional[nn.Module] = None,
    ):
        if rho < 0:
            raise ValueError(f"Invalid rho, should be non-negative: {rho}")
        if eta < 0:
            raise ValueError(f"Invalid eta, should be non-negative: {eta}")
        if mode not in ("none", "sam", "asam"):
            raise ValueError(f"Unknown sharpness mode: {mode}")

        self.params = [p for p in params if p.requires_grad]
        self.base_optimizer = base_optimizer
        self.mode = mode
        self.rho = rho
        self.eta = eta
        self.model = model
        self.skipped_steps = 0
        self._origin: dict[int, torch.Tensor] = {}

    @property
    def param_groups(self):
        return self.base_optimizer.param_groups

    def zero_grad(self):
        self.base_optimizer.zero_grad(set_to_none=True)

    def _active(self) -> list[torch.nn.Parameter]:
        return [p for p in self.params if p.grad is not None]

    def _grads_finite(self) -> bool:
        return all(torch.isfinite(p.grad).all() for p in self._active())

    @torch.no_grad()
    def ascent_step(self):
        """Move every parameter with a gradient to w + eps, remembering w."""
        active = self._active()
        eps = compute_perturbation(active, [p.grad for p in active], self.rho, self.mode == "asam", self.eta)
        self._origin = {}
        for p, e in zip(active, eps):
            self._origin[id(p)] = p.detach().clone()
            p.add_(e)
        self.zero_grad()

    @torch.no_grad()
    def restore(self):
        for p in self.params:
            origin = self._origin.get(id(p))
            if origin is not None:
                p.copy_(origin)
        self._origin = {}

    @torch.no_grad()
    def descent_step(self):
        """Return to w and apply the base update with the perturbed-point gradient."""
        self.restore()
        self.base_optimizer.step()
        self.zero_grad()

    def _skip(self, stage: str):
        self.skipped_steps += 1
        logger.warning(f"Non-finite gradient at {stage}, skipping step ({self.skipped_steps} skipped so far)")
        self.restore()
        self.zero_grad()

    def step(self, closure: Callable[[], torch.Tensor]) -> Optional[torch.Tensor]:
        """
        Run one optimization step.

        Args:
            closure: Runs forward and backward at the current parameters and returns
                the loss. Gradients are cleared before every call.

        Returns:
            Loss at the unperturbed parameters
        """
        closure = torch.enable_grad()(closure)
        self.zero_grad()
        loss = closure()
        if not self._grads_finite():
            self._skip("w")
            return loss

        if self.mode == "none":
            self.base_optimizer.step()
            self.zero_grad()
            return loss

        self.ascent_step()
        saved = disable_running_stats(self.model) if self.model is not None else []
        try:
            closure()
        finally:
            enable_running_stats(saved)
        if not self._grads_finite():
            self._skip("w + eps")
            return loss
        self.descent_step()
        return loss

    def state_dict(self) -> dict:
        return {"base": self.base_optimizer.state_dict(), "skipped_steps": self.skipped_steps}

    def load_state_dict(self, state: dict):
        self.base_optimizer.load_state_dict(state["base"])
        self.skipped_steps = int(state.get("skipped_steps", 0))


def lr_at(progress: float, cfg: OptimConfig) -> float:
    """
    Learning rate after `progress` epochs (fractional).

    Linear ramp warmup_lr -> lr over warmup_epochs, then cosine decay to 0
    at total_epochs.
    """
    total = cfg.total_epochs if cfg.total_epochs is not None else cfg.warmup_epochs
    if cfg.warmup_epochs > 0 and progress < cfg.warmup_epochs:
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * progress / cfg.warmup_epochs
    span = total - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr
    decay = min(max((progress - cfg.warmup_epochs) / span, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * decay))


def set_learning_rate(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def build_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> SharpnessAwareMinimizer:
    """AdamW wrapped in the configured sharpness-aware mode."""
    base = torch.optim.AdamW(
        model.parameters(),
        lr=lr_at(0.0, cfg),
        betas=tuple(cfg.betas),
        weight_decay=cfg.weight_decay,
    )
    logger.debug(f"Optimizer: AdamW + {cfg.sharpness} (rho={cfg.rho}, eta={cfg.asam_eta})")
    return SharpnessAwareMinimizer(
        model.parameters(), base, mode=cfg.sharpness, rho=cfg.rho, eta=cfg.asam_eta, model=model
    )
