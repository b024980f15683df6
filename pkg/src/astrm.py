"""
Adaptive spatio-temporal refinement of backbone feature volumes.

    out = ((x * (1 + F_s(x))) * (1 + F_t(x))) (*) G_t(x)

F_s is a per-frame spatial gate built from channel-pooled maps, F_t a
channel-wise local temporal gate, and G_t a per-sample, per-channel temporal
kernel derived from spatially pooled features and applied as a depthwise
1-D convolution along time (cross-correlation, zero padding).
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


def temporal_depthwise_conv(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """
    Apply a per-sample, per-channel kernel along the time axis.

    out[b, c, t] = sum_k kernel[b, c, k] * x[b, c, t + k - K // 2]

    Args:
        x: Feature volume [B, C, T, H, W]
        kernel: Kernel [B, C, K]

    Returns:
        Tensor with the shape of x
    """
    k = kernel.shape[-1]
    left = k // 2
    # F.pad orders pads from the last dim: (W, W, H, H, T, T)
    padded = F.pad(x, (0, 0, 0, 0, left, k - 1 - left))
    windows = padded.unfold(2, k, 1)  # [B, C, T, H, W, K]
    return (windows * kernel[:, :, None, None, None, :]).sum(dim=-1)


class ASTRM(nn.Module):
    """Refinement block operating on [B, C, T, H, W] (or unbatched [C, T, H, W])."""

    def __init__(
        self,
        channels: int,
        clip_len: int,
        kernel_size: int = 3,
        temporal_ratio: int = 2,
        hidden_ratio: int = 2,
        use_local_spatial: bool = True,
        use_local_temporal: bool = True,
        use_global_temporal: bool = True,
    ):
        super().__init__()
        if channels % temporal_ratio:
            raise ConfigurationError(
                f"channels={channels} not divisible by temporal_ratio={temporal_ratio}",
                fields=["backbone.astrm_temporal_ratio"],
            )
        if kernel_size < 1 or clip_len < 1:
            raise ConfigurationError("kernel_size and clip_len must be positive", fields=["backbone.astrm_kernel_size"])

        self.channels = channels
        self.clip_len = clip_len
        self.kernel_size = kernel_size
        self.use_local_spatial = use_local_spatial
        self.use_local_temporal = use_local_temporal
        self.use_global_temporal = use_global_temporal

        # Local spatial: [avg; max] over channels -> 7x7 conv per frame
        self.spatial_conv = nn.Conv3d(2, 1, kernel_size=(1, 7, 7), padding=(0, 3, 3))

        # Local temporal: conv3x1x1 -> ReLU -> BN -> conv1x1x1
        reduced = channels // temporal_ratio
        self.temporal_reduce = nn.Conv3d(channels, reduced, kernel_size=(3, 1, 1), padding=(1, 0, 0))
        self.temporal_bn = nn.BatchNorm3d(reduced, eps=1e-5, momentum=0.1)
        self.temporal_expand = nn.Conv3d(reduced, channels, kernel_size=1)

        # Global temporal: GAP over H, W -> FC(T -> T*r_g) -> ReLU -> FC(-> K_t)
        self.kernel_fc1 = nn.Linear(clip_len, clip_len * hidden_ratio)
        self.kernel_fc2 = nn.Linear(clip_len * hidden_ratio, kernel_size)

    def _check(self, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        unbatched = x.dim() == 4
        if unbatched:
            x = x.unsqueeze(0)
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ConfigurationError(
                f"ASTRM expects [B, {self.channels}, T, H, W], got {tuple(x.shape)}", fields=["input"]
            )
        return x, unbatched

    def local_spatial_gate(self, x: torch.Tensor) -> torch.Tensor:
        """Spatial gate [B, 1, T, H, W] in (0, 1)."""
        x, unbatched = self._check(x)
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        gate = torch.sigmoid(self.spatial_conv(pooled))
        return gate.squeeze(0) if unbatched else gate

    def local_temporal_gate(self, x: torch.Tensor) -> torch.Tensor:
        """Channel-wise temporal gate [B, C, T, H, W] in (0, 1)."""
        x, unbatched = self._check(x)
        h = self.temporal_bn(F.relu(self.temporal_reduce(x)))
        gate = torch.sigmoid(self.temporal_expand(h))
        return gate.squeeze(0) if unbatched else gate

    def global_temporal_kernel(self, x: torch.Tensor) -> torch.Tensor:
        """Adaptive kernel [B, C, K_t] in (0, 1), a function of spatial means only."""
        x, unbatched = self._check(x)
        if x.shape[2] != self.clip_len:
            raise ConfigurationError(
                f"global temporal branch built for T={self.clip_len}, got T={x.shape[2]}", fields=["clip_len"]
            )
        pooled = x.mean(dim=(3, 4))  # [B, C, T]
        kernel = torch.sigmoid(self.kernel_fc2(F.relu(self.kernel_fc1(pooled))))
        return kernel.squeeze(0) if unbatched else kernel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, unbatched = self._check(x)
        y = x
        if self.use_local_spatial:
            y = y * (1.0 + self.local_spatial_gate(x))
        if self.use_local_temporal:
            y = y * (1.0 + self.local_temporal_gate(x))
        if self.use_global_temporal:
            y = temporal_depthwise_conv(y, self.global_temporal_kernel(x))
        return y.squeeze(0) if unbatched else y
