"""
Tests for the spotting network.
"""

import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from src.errors import ConfigurationError
from src.network import (
    TEMPORAL_BLOCKS,
    SpotModel,
    build_model,
    build_temporal_block,
    count_parameters,
    parameter_table,
)
from src.models import BackboneSpec, TemporalBlockSpec


def _frame_gradient(model: SpotModel, frames: torch.Tensor, out_frame: int) -> torch.Tensor:
    """Per-input-frame gradient magnitude of the logits at one output frame."""
    frames = frames.clone().requires_grad_(True)
    model(frames).logits[:, out_frame].sum().backward()
    return frames.grad.abs().sum(dim=(0, 1, 3, 4))


class TestSpotModel:
    """Tests for SpotModel."""

    def test_output_shapes(self, tiny_backbone_spec):
        """Test logits for an unbatched 128-frame clip with 17 classes."""
        torch.manual_seed(0)
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(kind="bigru"), num_classes=17, clip_len=128)
        model.eval()

        output = model(torch.rand(3, 128, 16, 16))

        assert output.logits.shape == (128, 17)
        assert output.scores.shape == (128, 17)
        assert output.contrastive.shape == (128, 128)
        assert output.scores.min() > 0 and output.scores.max() < 1

    def test_embeddings_unit_norm(self, tiny_backbone_spec):
        """Test that contrastive embeddings are L2-normalised."""
        torch.manual_seed(1)
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(), num_classes=3, clip_len=8, embedding_dim=16)

        norms = model(torch.rand(2, 3, 8, 16, 16)).contrastive.norm(dim=-1)

        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)

    def test_wrong_clip_length(self, tiny_backbone_spec):
        """Test that the clip length is checked against the model."""
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(), num_classes=3, clip_len=8)

        with pytest.raises(ConfigurationError):
            model(torch.rand(1, 3, 6, 16, 16))

    def test_frame_permutation_without_temporal_context(self, tiny_backbone_spec):
        """Test that without ASTRM and temporal block, frames are scored independently."""
        torch.manual_seed(2)
        spec = tiny_backbone_spec.model_copy(update={"astrm_enabled": False})
        model = SpotModel(spec, TemporalBlockSpec(kind="identity"), num_classes=3, clip_len=8).eval()
        frames = torch.rand(1, 3, 8, 16, 16)
        perm = torch.randperm(8)

        permuted = model(frames[:, :, perm]).logits
        assert torch.allclose(permuted, model(frames).logits[:, perm], atol=1e-5)

    def test_frame_locality_without_temporal_context(self, tiny_backbone_spec):
        """Test that an output frame has no gradient from other frames."""
        torch.manual_seed(3)
        spec = tiny_backbone_spec.model_copy(update={"astrm_enabled": False})
        model = SpotModel(spec, TemporalBlockSpec(kind="identity"), num_classes=3, clip_len=8).eval()

        grad = _frame_gradient(model, torch.rand(1, 3, 8, 16, 16), out_frame=2)

        assert grad[2] > 0
        assert torch.count_nonzero(grad) == 1

    def test_astrm_mixes_frames(self, tiny_backbone_spec):
        """Test that ASTRM gives an output frame gradient from distant frames."""
        torch.manual_seed(4)
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(kind="identity"), num_classes=3, clip_len=8).eval()

        grad = _frame_gradient(model, torch.rand(1, 3, 8, 16, 16), out_frame=0)

        assert grad[7] > 0

    def test_bigru_sees_future_frames(self, tiny_backbone_spec):
        """Test that the bidirectional block passes information backwards in time."""
        torch.manual_seed(5)
        spec = tiny_backbone_spec.model_copy(update={"astrm_enabled": False})
        model = SpotModel(spec, TemporalBlockSpec(kind="bigru"), num_classes=3, clip_len=8).eval()

        grad = _frame_gradient(model, torch.rand(1, 3, 8, 16, 16), out_frame=0)

        assert grad[7] > 0

    def test_deterministic_forward(self, tiny_backbone_spec):
        """Test that two evaluation passes are identical."""
        torch.manual_seed(6)
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(), num_classes=3, clip_len=8).eval()
        frames = torch.rand(2, 3, 8, 16, 16)

        with torch.no_grad():
            assert torch.equal(model(frames).logits, model(frames).logits)

    def test_gradcheck(self, double_precision):
        """Test input and parameter gradients of a two-block model (T=8, 8x8 frames) against finite differences."""
        torch.manual_seed(7)
        backbone = BackboneSpec(stem_width=4, stage_widths=[4], blocks_per_stage=[2], stage_strides=[1])
        temporal = TemporalBlockSpec(kind="bigru", hidden_size=4)
        model = SpotModel(backbone, temporal, num_classes=2, clip_len=8, embedding_dim=4).eval()
        names = [name for name, _ in model.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())
        frames = torch.rand(1, 3, 8, 8, 8, requires_grad=True)

        def logits(inputs, *flat):
            return functional_call(model, dict(zip(names, flat)), (inputs,)).logits

        assert torch.autograd.gradcheck(logits, (frames, *params), eps=1e-6, atol=1e-4, fast_mode=True)

    def test_build_model_from_config(self, tiny_train_config):
        """Test that build_model follows the configuration."""
        model = build_model(tiny_train_config)

        assert model.clip_len == 16
        assert model.num_classes == 3
        assert model.projection[-1].out_features == 16


class TestTemporalBlocks:
    """Tests for the temporal block registry."""

    def test_registry_contents(self):
        """Test the registered block kinds."""
        assert {"bigru", "bilstm", "identity", "transformer"} <= set(TEMPORAL_BLOCKS)

    def test_unknown_kind(self):
        """Test that an unknown kind names the config field."""
        with pytest.raises(ConfigurationError) as exc:
            build_temporal_block(8, TemporalBlockSpec(kind="tcn"), 16)

        assert "temporal.kind" in exc.value.fields

    def test_bigru_width(self):
        """Test the bidirectional output width."""
        block = build_temporal_block(8, TemporalBlockSpec(kind="bigru", hidden_size=5), 16)

        assert block.output_dim == 10
        assert block(torch.rand(2, 16, 8)).shape == (2, 16, 10)

    def test_bigru_direction_swap(self):
        """Test that reversing time swaps the forward and backward halves."""
        torch.manual_seed(8)
        block = build_temporal_block(4, TemporalBlockSpec(kind="bigru", hidden_size=3), 6)
        # Tie both directions to the same weights.
        with torch.no_grad():
            for name, param in block.rnn.named_parameters():
                if name.endswith("_reverse"):
                    param.copy_(getattr(block.rnn, name.removesuffix("_reverse")))
        x = torch.randn(1, 6, 4)

        out = block(x)
        flipped = block(x.flip(1)).flip(1)

        assert torch.allclose(out[..., :3], flipped[..., 3:], atol=1e-6)

    def test_transformer_block(self):
        """Test transformer output width and head divisibility."""
        block = build_temporal_block(8, TemporalBlockSpec(kind="transformer", num_heads=4), 16)
        assert block(torch.rand(2, 16, 8)).shape == (2, 16, 8)

        with pytest.raises(ConfigurationError):
            build_temporal_block(8, TemporalBlockSpec(kind="transformer", num_heads=3), 16)


class TestParameterCounts:
    """Tests for count_parameters and parameter_table."""

    def test_linear_layer(self):
        """Test Linear(10, 5) has 55 parameters."""
        assert count_parameters(nn.Linear(10, 5)) == 55

    def test_doubling_widths_more_than_doubles(self, tiny_backbone_spec):
        """Test that doubling all widths more than doubles the parameter count."""
        wide = tiny_backbone_spec.model_copy(update={"stem_width": 8, "stage_widths": [16]})
        small = SpotModel(tiny_backbone_spec, TemporalBlockSpec(), num_classes=3, clip_len=8)
        large = SpotModel(wide, TemporalBlockSpec(), num_classes=3, clip_len=8)

        assert count_parameters(large) > 2 * count_parameters(small)

    def test_parameter_table_total(self, tiny_backbone_spec):
        """Test that the table rows sum to the total."""
        model = SpotModel(tiny_backbone_spec, TemporalBlockSpec(), num_classes=3, clip_len=8)
        table = parameter_table(model)

        assert list(table["module"]) == ["backbone", "temporal", "classifier", "projection", "total"]
        assert table["parameters"].iloc[:-1].sum() == table["parameters"].iloc[-1] == count_parameters(model)
