"""
Training objective: mixup, per-frame BCE, instance contrastive losses over a
per-class memory bank, and their weighted sum.

Contrastive terms are written as losses (leading minus), so minimizing pulls
embeddings of the same class together. For a query z of class c with weight w:

    L(z) = -1 / (w |M(c)|) * sum_{j in M(c)} [ z.(w_j z_j)/tau - logsumexp_{k in A(c)} z.(w_k z_k)/tau ]

where M(c) holds the bank entries of class c and A(c) every other entry.
The unweighted variant fixes every w to 1.
"""

from collections import deque
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger

from .errors import ConfigurationError
from .models import LossConfig, VideoClip


class ContrastiveSamples(NamedTuple):
    embeddings: torch.Tensor  # [n, E]
    classes: torch.Tensor  # [n] long
    weights: torch.Tensor  # [n] in (0, 1]

    def __len__(self) -> int:
        return int(self.classes.shape[0])


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    bce: torch.Tensor
    contrastive: torch.Tensor
    num_samples: int  # queries that contributed to the contrastive term
    samples: ContrastiveSamples


class MemoryBank:
    """
    Per-class FIFO queues of detached (embedding, weight) pairs.

    The total capacity is split evenly, floor(capacity / K) entries per class.
    """

    def __init__(self, num_classes: int, capacity: int = 256, embedding_dim: int = 128):
        if num_classes < 1 or capacity < num_classes:
            raise ConfigurationError(
                f"bank capacity {capacity} cannot hold {num_classes} classes", fields=["loss.bank_size"]
            )
        self.num_classes = num_classes
        self.capacity = capacity
        self.embedding_dim = embedding_dim
        self.per_class = capacity // num_classes
        self._queues: list[deque] = [deque(maxlen=self.per_class) for _ in range(num_classes)]

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)

    def sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def update(self, embeddings: torch.Tensor, classes: torch.Tensor, weights: torch.Tensor):
        """Push entries; the oldest entry of a full class queue is evicted."""
        embeddings = embeddings.detach().to("cpu", torch.float32)
        weights = weights.detach().to("cpu", torch.float32)
        for z, c, w in zip(embeddings, classes.tolist(), weights.tolist()):
            if w == 0:
                continue
            self._queues[int(c)].append((z.clone(), float(w)))

    def entries(self, class_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked embeddings [n, E] and weights [n] of one class."""
        queue = self._queues[class_id]
        if not queue:
            return torch.zeros(0, self.embedding_dim), torch.zeros(0)
        return torch.stack([z for z, _ in queue]), torch.tensor([w for _, w in queue], dtype=torch.float32)

    def is_ready(self, classes: Optional[list[int]] = None) -> bool:
        """True if every listed class has positives and negatives."""
        sizes = self.sizes()
        total = sum(sizes)
        classes = range(self.num_classes) if classes is None else classes
        return all(sizes[c] > 0 and total - sizes[c] > 0 for c in classes)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for c in range(self.num_classes):
            z, w = self.entries(c)
            state[f"{c}/embeddings"] = z.numpy()
            state[f"{c}/weights"] = w.numpy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self._queues = [deque(maxlen=self.per_class) for _ in range(self.num_classes)]
        for c in range(self.num_classes):
            z = torch.from_numpy(np.asarray(state[f"{c}/embeddings"], dtype=np.float32)).reshape(-1, self.embedding_dim)
            w = torch.from_numpy(np.asarray(state[f"{c}/weights"], dtype=np.float32))
            self.update(z, torch.full((len(w),), c, dtype=torch.long), w)


def update_bank(bank: MemoryBank, samples: ContrastiveSamples) -> MemoryBank:
    bank.update(samples.embeddings, samples.classes, samples.weights)
    return bank


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw a mixing coefficient from Beta(alpha, alpha)."""
    return float(rng.beta(alpha, alpha))


def mixup(clip_a: VideoClip, clip_b: VideoClip, lam: float) -> VideoClip:
    """Convex combination of two clips and their label matrices."""
    if clip_a.frames.shape != clip_b.frames.shape or clip_a.labels.shape != clip_b.labels.shape:
        raise ConfigurationError(
            f"Cannot mix clips of shapes {tuple(clip_a.frames.shape)} and {tuple(clip_b.frames.shape)}",
            fields=["clip_len"],
        )
    return VideoClip(
        video_id=clip_a.video_id,
        start_frame=clip_a.start_frame,
        frames=lam * clip_a.frames + (1.0 - lam) * clip_b.frames,
        labels=lam * clip_a.labels + (1.0 - lam) * clip_b.labels,
        valid_length=min(clip_a.valid_length, clip_b.valid_length),
    )


def mixup_batch(
    frames: torch.Tensor,
    labels: torch.Tensor,
    mask: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, float]:
    """
    Mix every clip of a batch with a randomly permuted partner.

    Returns:
        (frames, labels, mask, lam); the mask keeps frames valid in both clips
    """
    lam = sample_lambda(alpha, rng)
    index = torch.from_numpy(rng.permutation(frames.shape[0])).to(frames.device)
    mixed_frames = lam * frames + (1.0 - lam) * frames[index]
    mixed_labels = lam * labels + (1.0 - lam) * labels[index]
    return mixed_frames, mixed_labels, mask & mask[index], lam


def bce_loss(logits: torch.Tensor, labels: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean binary cross-entropy over unmasked (frame, class) cells, from logits."""
    cells = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    if mask is None:
        return cells.mean()
    weight = mask.unsqueeze(-1).to(cells.dtype)
    count = weight.sum() * cells.shape[-1]
    return (cells * weight).sum() / count.clamp(min=1.0)


def contrastive_samples(embeddings: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> ContrastiveSamples:
    """
    One sample per (frame, class) cell with nonzero label weight on a valid frame.

    Args:
        embeddings: [B, T, E]
        labels: [B, T, K]
        mask: [B, T] bool
    """
    selected = (labels > 0) & mask.unsqueeze(-1)
    b, t, c = selected.nonzero(as_tuple=True)
    return ContrastiveSamples(embeddings[b, t], c, labels[b, t, c])


def _instance_contrastive(
    queries: torch.Tensor,
    classes: torch.Tensor,
    weights: torch.Tensor,
    bank: MemoryBank,
    temperature: float,
    use_bank_weights: bool,
) -> tuple[torch.Tensor, int]:
    dtype, device = queries.dtype, queries.device
    stored = []
    for c in range(bank.num_classes):
        z, w = bank.entries(c)
        z, w = z.to(device, dtype), w.to(device, dtype)
        stored.append(z * w.unsqueeze(-1) if use_bank_weights else z)

    per_sample = []
    for c in classes.unique().tolist():
        positives = stored[c]
        others = [stored[k] for k in range(bank.num_classes) if k != c]
        negatives = torch.cat(others) if others else positives[:0]
        if len(positives) == 0 or len(negatives) == 0:
            logger.debug(f"Skipping contrastive queries of class {c}: empty positives or negatives")
            continue
        select = classes == c
        q, omega = queries[select], weights[select]
        pos = q @ positives.T / temperature  # [n, |M|]
        neg = torch.logsumexp(q @ negatives.T / temperature, dim=1, keepdim=True)  # [n, 1]
        per_sample.append(-(pos - neg).sum(dim=1) / (omega * len(positives)))

    if not per_sample:
        return queries.new_zeros(()), 0
    losses = torch.cat(per_sample)
    return losses.mean(), int(losses.numel())


def ic_loss(queries: torch.Tensor, classes: torch.Tensor, bank: MemoryBank, temperature: float) -> torch.Tensor:
    """Instance contrastive loss with unit weights everywhere."""
    ones = torch.ones(len(classes), dtype=queries.dtype, device=queries.device)
    return _instance_contrastive(queries, classes, ones, bank, temperature, use_bank_weights=False)[0]


def soft_ic_loss(
    queries: torch.Tensor,
    classes: torch.Tensor,
    weights: torch.Tensor,
    bank: MemoryBank,
    temperature: float,
) -> torch.Tensor:
    """Soft instance contrastive loss: query and stored label weights enter the objective."""
    if (weights == 0).any():
        raise ConfigurationError("soft_ic_loss queries must carry nonzero weights", fields=["weights"])
    return _instance_contrastive(queries, classes, weights, bank, temperature, use_bank_weights=True)[0]


def combined_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    mask: torch.Tensor,
    embeddings: torch.Tensor,
    bank: MemoryBank,
    cfg: LossConfig,
    contrastive_enabled: bool = True,
) -> LossBreakdown:
    """
    BCE plus lambda_sic times the configured contrastive term.

    Args:
        logits: [B, T, K]
        labels: [B, T, K] soft labels
        mask: [B, T] valid frames
        embeddings: [B, T, E] normalized projections
        bank: Memory bank snapshot (not modified here)
        cfg: Loss settings
        contrastive_enabled: False during the bank warm-up epochs

    Returns:
        LossBreakdown with the selected samples for the bank update
    """
    bce = bce_loss(logits, labels, mask)
    samples = contrastive_samples(embeddings, labels, mask)
    zero = bce.new_zeros(())

    if not contrastive_enabled or cfg.contrastive == "none" or cfg.lambda_sic == 0 or len(samples) == 0:
        return LossBreakdown(bce, bce, zero, 0, samples)

    if cfg.contrastive == "softic":
        term, contributing = _instance_contrastive(
            samples.embeddings, samples.classes, samples.weights, bank, cfg.temperature, use_bank_weights=True
        )
    else:
        ones = torch.ones_like(samples.weights)
        term, contributing = _instance_contrastive(
            samples.embeddings, samples.classes, ones, bank, cfg.temperature, use_bank_weights=False
        )

    if contributing == 0:
        return LossBreakdown(bce, bce, zero, 0, samples)
    return LossBreakdown(bce + cfg.lambda_sic * term, bce, term, contributing, samples)
