"""
Tests for mixup, BCE, contrastive losses and the memory bank.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.errors import ConfigurationError
from src.losses import (
    MemoryBank,
    bce_loss,
    combined_loss,
    contrastive_samples,
    ic_loss,
    mixup,
    mixup_batch,
    sample_lambda,
    soft_ic_loss,
)
from src.models import LossConfig, VideoClip


def _bank(entries_by_class: dict[int, list[list[float]]], num_classes: int, capacity: int = 64, weights=None):
    dim = len(next(iter(v for v in entries_by_class.values() if v))[0])
    bank = MemoryBank(num_classes, capacity=capacity, embedding_dim=dim)
    for c, rows in entries_by_class.items():
        if not rows:
            continue
        w = torch.ones(len(rows)) if weights is None else torch.tensor(weights[c])
        bank.update(torch.tensor(rows), torch.full((len(rows),), c), w)
    return bank


def _reference_loss(query, cls, omega, bank, temperature, use_bank_weights):
    """Scalar-loop evaluation of the per-query contrastive loss."""
    positives, negatives = [], []
    for c in range(bank.num_classes):
        z, w = bank.entries(c)
        for row, weight in zip(z.tolist(), w.tolist()):
            scale = weight if use_bank_weights else 1.0
            target = positives if c == cls else negatives
            target.append(scale * sum(a * b for a, b in zip(query, row)) / temperature)
    lse = math.log(sum(math.exp(v) for v in negatives))
    return -sum(p - lse for p in positives) / (omega * len(positives))


def _clip(value: float, label_row: int) -> VideoClip:
    labels = torch.zeros(4, 2)
    labels[label_row, 0] = 1.0
    return VideoClip(
        video_id="v", start_frame=0, frames=torch.full((3, 4, 2, 2), value), labels=labels, valid_length=4
    )


class TestMixup:
    """Tests for mixup and sample_lambda."""

    def test_lambda_one_is_identity(self):
        """Test that lambda=1 returns the first clip."""
        a, b = _clip(0.2, 0), _clip(0.8, 3)
        mixed = mixup(a, b, 1.0)

        assert torch.equal(mixed.frames, a.frames)
        assert torch.equal(mixed.labels, a.labels)

    def test_half_mix_labels(self):
        """Test that lambda=0.5 splits label mass between both events."""
        mixed = mixup(_clip(0.2, 0), _clip(0.8, 3), 0.5)

        assert mixed.labels[0, 0] == 0.5
        assert mixed.labels[3, 0] == 0.5
        assert torch.allclose(mixed.frames, torch.full_like(mixed.frames, 0.5))

    def test_shape_mismatch(self):
        """Test that clips of different lengths cannot be mixed."""
        short = VideoClip(
            video_id="v", start_frame=0, frames=torch.zeros(3, 2, 2, 2), labels=torch.zeros(2, 2), valid_length=2
        )

        with pytest.raises(ConfigurationError):
            mixup(_clip(0.1, 0), short, 0.5)

    def test_beta_mean(self):
        """Test that Beta(0.1, 0.1) draws average to 0.5."""
        rng = np.random.default_rng(0)
        draws = [sample_lambda(0.1, rng) for _ in range(100_000)]

        assert abs(np.mean(draws) - 0.5) < 0.01
        assert all(0.0 <= d <= 1.0 for d in draws)

    def test_batch_mask_intersection(self):
        """Test that the mixed mask keeps frames valid in both partners."""
        frames = torch.rand(2, 3, 4, 2, 2)
        labels = torch.zeros(2, 4, 2)
        mask = torch.tensor([[True, True, True, True], [True, True, False, False]])

        _, _, mixed_mask, lam = mixup_batch(frames, labels, mask, 0.1, np.random.default_rng(1))

        assert 0.0 <= lam <= 1.0
        assert not (mixed_mask & ~mask).any()
        assert mixed_mask[:, :2].all()


class TestBCELoss:
    """Tests for bce_loss."""

    def test_zero_logits(self):
        """Test that zero logits give ln 2 for any labels."""
        labels = torch.randint(0, 2, (2, 5, 3)).float()

        assert torch.isclose(bce_loss(torch.zeros(2, 5, 3), labels), torch.tensor(math.log(2)))

    def test_matches_scalar_loop(self):
        """Test soft-label BCE against an explicit loop."""
        torch.manual_seed(0)
        logits = torch.randn(2, 3, 2)
        labels = torch.rand(2, 3, 2)
        total = 0.0
        for x, y in zip(logits.flatten().tolist(), labels.flatten().tolist()):
            p = 1 / (1 + math.exp(-x))
            total += -(y * math.log(p) + (1 - y) * math.log(1 - p))

        assert math.isclose(bce_loss(logits, labels).item(), total / 12, rel_tol=1e-5)

    def test_mask_excludes_padding(self):
        """Test that masked frames do not contribute."""
        logits = torch.zeros(1, 4, 2)
        logits[0, 3] = 50.0
        labels = torch.zeros(1, 4, 2)
        mask = torch.tensor([[True, True, True, False]])

        assert torch.isclose(bce_loss(logits, labels, mask), torch.tensor(math.log(2)))


class TestContrastiveLosses:
    """Tests for ic_loss and soft_ic_loss."""

    def test_hand_computed_value(self):
        """Test one query with one positive and one orthogonal negative."""
        bank = _bank({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)

        loss = ic_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), bank, temperature=1.0)

        assert torch.isclose(loss, torch.tensor(-1.0))

    def test_duplicated_negative_adds_ln2(self):
        """Test that doubling the negatives raises the loss by ln 2."""
        single = _bank({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)
        double = _bank({0: [[1.0, 0.0]], 1: [[0.0, 1.0], [0.0, 1.0]]}, 2)
        q, c = torch.tensor([[1.0, 0.0]]), torch.tensor([0])

        diff = ic_loss(q, c, double, 1.0) - ic_loss(q, c, single, 1.0)

        assert torch.isclose(diff, torch.tensor(math.log(2)))

    def test_high_temperature_limit(self):
        """Test that the loss tends to ln(#negatives) as temperature grows."""
        bank = _bank({0: [[1.0, 0.0], [0.6, 0.8]], 1: [[0.0, 1.0], [0.8, 0.6], [-1.0, 0.0]]}, 2)

        loss = ic_loss(torch.tensor([[0.6, 0.8]]), torch.tensor([0]), bank, temperature=1e6)

        assert math.isclose(loss.item(), math.log(3), rel_tol=1e-4)

    def test_soft_equals_ic_with_unit_weights(self):
        """Test that SoftIC reduces to IC when every weight is 1."""
        torch.manual_seed(1)
        for _ in range(100):
            rows = F.normalize(torch.randn(9, 4), dim=1)
            bank = _bank({0: rows[:3].tolist(), 1: rows[3:6].tolist(), 2: rows[6:].tolist()}, 3)
            queries = F.normalize(torch.randn(5, 4), dim=1)
            classes = torch.randint(0, 3, (5,))

            soft = soft_ic_loss(queries, classes, torch.ones(5), bank, 0.1)
            assert torch.isclose(soft, ic_loss(queries, classes, bank, 0.1), rtol=1e-5, atol=1e-6)

    def test_halving_query_weight_doubles_loss(self):
        """Test the 1/omega scaling of a single query."""
        bank = _bank({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)
        q, c = torch.tensor([[0.6, 0.8]]), torch.tensor([0])

        full = soft_ic_loss(q, c, torch.tensor([1.0]), bank, 0.5)
        half = soft_ic_loss(q, c, torch.tensor([0.5]), bank, 0.5)

        assert torch.isclose(half, 2 * full)

    def test_three_class_reference(self):
        """Test SoftIC against a scalar loop with weighted bank entries."""
        bank = _bank(
            {0: [[1.0, 0.0], [0.8, 0.6]], 1: [[0.0, 1.0]], 2: [[-0.6, 0.8], [-1.0, 0.0]]},
            3,
            weights={0: [1.0, 0.5], 1: [0.25], 2: [1.0, 0.75]},
        )
        queries = torch.tensor([[0.6, 0.8], [0.0, -1.0]])
        classes = torch.tensor([0, 2])
        omega = torch.tensor([0.9, 0.4])

        loss = soft_ic_loss(queries, classes, omega, bank, 0.2)
        expected = np.mean(
            [
                _reference_loss(q, int(c), float(w), bank, 0.2, use_bank_weights=True)
                for q, c, w in zip(queries.tolist(), classes, omega)
            ]
        )

        assert math.isclose(loss.item(), expected, rel_tol=1e-4)

    def test_zero_weight_query_rejected(self):
        """Test that SoftIC refuses queries with zero weight."""
        bank = _bank({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)

        with pytest.raises(ConfigurationError):
            soft_ic_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), torch.tensor([0.0]), bank, 0.1)

    def test_empty_class_is_skipped(self):
        """Test that queries without stored positives contribute nothing."""
        bank = _bank({0: [[1.0, 0.0]], 1: []}, 2)

        loss = ic_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), bank, 0.1)

        assert loss.item() == 0.0

    def test_gradcheck(self, double_precision):
        """Test analytic query gradients against finite differences."""
        bank = _bank({0: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 1: [[0.0, 0.0, 1.0]]}, 2)
        queries = torch.randn(3, 3, requires_grad=True)
        classes = torch.tensor([0, 1, 0])
        weights = torch.tensor([1.0, 0.5, 0.3])

        assert torch.autograd.gradcheck(
            lambda q: soft_ic_loss(q, classes, weights, bank, 0.5), (queries,), eps=1e-6, atol=1e-5
        )


class TestMemoryBank:
    """Tests for MemoryBank."""

    def test_fifo_eviction(self):
        """Test that a full class queue drops its oldest entry."""
        bank = MemoryBank(3, capacity=6, embedding_dim=1)
        bank.update(torch.tensor([[1.0], [2.0], [3.0]]), torch.tensor([0, 0, 0]), torch.ones(3))

        z, _ = bank.entries(0)
        assert z.flatten().tolist() == [2.0, 3.0]

    def test_classes_isolated(self):
        """Test that filling one class leaves the others untouched."""
        bank = MemoryBank(3, capacity=6, embedding_dim=1)
        bank.update(torch.tensor([[9.0]]), torch.tensor([1]), torch.ones(1))
        bank.update(torch.arange(5.0).unsqueeze(1), torch.zeros(5, dtype=torch.long), torch.ones(5))

        assert bank.sizes() == [2, 1, 0]
        assert bank.entries(1)[0].item() == 9.0

    def test_zero_weight_not_stored(self):
        """Test that zero-weight samples are not pushed."""
        bank = MemoryBank(2, capacity=4, embedding_dim=1)
        bank.update(torch.tensor([[1.0], [2.0]]), torch.tensor([0, 0]), torch.tensor([0.0, 0.5]))

        z, w = bank.entries(0)
        assert z.flatten().tolist() == [2.0]
        assert w.tolist() == [0.5]

    def test_entries_detached(self):
        """Test that stored embeddings carry no autograd history."""
        bank = MemoryBank(1, capacity=2, embedding_dim=2)
        z = torch.ones(1, 2, requires_grad=True)
        bank.update(z * 2, torch.tensor([0]), torch.ones(1))

        assert not bank.entries(0)[0].requires_grad

    def test_loss_invariant_to_bank_order(self):
        """Test that permuting entries within a class leaves the loss unchanged."""
        rows = [[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]]
        forward = _bank({0: rows, 1: [[0.0, 1.0]]}, 2)
        reverse = _bank({0: rows[::-1], 1: [[0.0, 1.0]]}, 2)
        q, c = torch.tensor([[0.0, 1.0]]), torch.tensor([0])

        assert torch.isclose(ic_loss(q, c, forward, 0.3), ic_loss(q, c, reverse, 0.3))

    def test_readiness(self):
        """Test that a class needs positives and negatives to be ready."""
        bank = MemoryBank(2, capacity=4, embedding_dim=1)
        assert not bank.is_ready()

        bank.update(torch.tensor([[1.0], [2.0]]), torch.tensor([0, 1]), torch.ones(2))
        assert bank.is_ready()

    def test_state_roundtrip(self):
        """Test restoring a bank from its state dict."""
        bank = MemoryBank(2, capacity=4, embedding_dim=2)
        bank.update(torch.rand(3, 2), torch.tensor([0, 1, 1]), torch.tensor([1.0, 0.5, 0.25]))

        restored = MemoryBank(2, capacity=4, embedding_dim=2)
        restored.load_state_dict(bank.state_dict())

        for c in range(2):
            assert torch.equal(restored.entries(c)[0], bank.entries(c)[0])
            assert torch.equal(restored.entries(c)[1], bank.entries(c)[1])

    def test_capacity_too_small(self):
        """Test that every class needs at least one slot."""
        with pytest.raises(ConfigurationError):
            MemoryBank(4, capacity=3)


class TestCombinedLoss:
    """Tests for contrastive_samples and combined_loss."""

    def _inputs(self):
        torch.manual_seed(2)
        logits = torch.randn(1, 4, 2)
        labels = torch.zeros(1, 4, 2)
        labels[0, 1, 0] = 0.7
        labels[0, 2, 1] = 1.0
        labels[0, 3, 1] = 0.3
        mask = torch.tensor([[True, True, True, False]])
        embeddings = F.normalize(torch.randn(1, 4, 3), dim=-1)
        bank = _bank({0: [[1.0, 0.0, 0.0]], 1: [[0.0, 1.0, 0.0]]}, 2)
        return logits, labels, mask, embeddings, bank

    def test_sample_selection(self):
        """Test that only labelled cells on valid frames become samples."""
        _, labels, mask, embeddings, _ = self._inputs()
        samples = contrastive_samples(embeddings, labels, mask)

        assert samples.classes.tolist() == [0, 1]
        assert torch.allclose(samples.weights, torch.tensor([0.7, 1.0]))
        assert torch.equal(samples.embeddings[0], embeddings[0, 1])

    def test_zero_weight_equals_bce(self):
        """Test that lambda=0 reduces the objective to BCE exactly."""
        logits, labels, mask, embeddings, bank = self._inputs()
        out = combined_loss(logits, labels, mask, embeddings, bank, LossConfig(lambda_sic=0.0))

        assert torch.equal(out.total, bce_loss(logits, labels, mask))
        assert out.contrastive.item() == 0.0

    def test_disabled_contrastive(self):
        """Test that contrastive='none' and the warm-up switch give BCE only."""
        logits, labels, mask, embeddings, bank = self._inputs()

        none = combined_loss(logits, labels, mask, embeddings, bank, LossConfig(contrastive="none"))
        warmup = combined_loss(logits, labels, mask, embeddings, bank, LossConfig(), contrastive_enabled=False)

        assert torch.equal(none.total, none.bce)
        assert torch.equal(warmup.total, warmup.bce)
        assert len(warmup.samples) == 2

    def test_weighted_sum(self):
        """Test total = bce + lambda * contrastive."""
        logits, labels, mask, embeddings, bank = self._inputs()
        out = combined_loss(logits, labels, mask, embeddings, bank, LossConfig(lambda_sic=0.5, temperature=0.1))

        assert out.num_samples == 2
        assert torch.isclose(out.total, out.bce + 0.5 * out.contrastive)
