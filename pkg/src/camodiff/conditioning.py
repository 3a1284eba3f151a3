"""Conditioning features: backbone pyramid, fusion to stride 32, static mask.

The extractor runs once per image per sampling run (the denoiser is called
once per timestep, the conditioning is not). Any module exposing
``out_channels: (c8, c16, c32)`` and mapping (B, 3, H, W) to three maps at
strides 8/16/32 can serve as the encoder; the bundled toy encoder is a
4-stage conv pyramid whose top three stages provide those maps.

Fusion puts each of the three maps through two 3x3 convolutions, the second
one strided so everything lands at stride 32, concatenates, and coalesces
with a single convolution to the conditioning width C. The static mask head
is one convolution to a single channel, bilinear upsampling to the input
size, and a logistic squash.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as nnf

from .errors import ShapeError


class _GroupNorm(nn.GroupNorm):
    """GroupNorm that tolerates one value per group (B=1 at a 1x1 map).

    torch refuses that case, but the limit is well defined: a single element
    normalizes to exactly 0, so the output is the bias. Differentiable via
    x * 0 + bias, which matches the true gradients (zero into x and weight).
    """

    def forward(self, x):
        if x.numel() == x.shape[0] * self.num_groups and self.affine:
            shape = [1, -1] + [1] * (x.ndim - 2)
            return x * 0.0 + self.bias.view(shape)
        return super().forward(x)


def group_norm(channels: int) -> nn.GroupNorm:
    """GroupNorm with 8 groups, degrading to gcd(channels, 8) for toy widths."""
    groups = 8 if channels % 8 == 0 else math.gcd(channels, 8)
    return _GroupNorm(groups, channels)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        group_norm(cout),
        nn.SiLU(),
    )


class ToyPyramidEncoder(nn.Module):
    """Small 4-stage pyramid standing in for a pretrained backbone.

    Stage strides are 4, 8, 16, 32; the forward returns the top three stages.
    """

    def __init__(self, widths=(16, 32, 64, 96)):
        super().__init__()
        if len(widths) != 4:
            raise ShapeError(f"encoder needs 4 stage widths, got {widths!r}")
        w1, w2, w3, w4 = widths
        self.stage1 = nn.Sequential(_conv_block(3, w1, stride=2), _conv_block(w1, w1, stride=2))
        self.stage2 = nn.Sequential(_conv_block(w1, w2, stride=2), _conv_block(w2, w2))
        self.stage3 = nn.Sequential(_conv_block(w2, w3, stride=2), _conv_block(w3, w3))
        self.stage4 = nn.Sequential(_conv_block(w3, w4, stride=2), _conv_block(w4, w4))
        self.out_channels = (w2, w3, w4)

    def forward(self, images):
        x4 = self.stage1(images)
        f8 = self.stage2(x4)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return f8, f16, f32


class FeatureFusion(nn.Module):
    """Three two-conv branches aligned to stride 32, concatenated, coalesced."""

    def __init__(self, in_channels, out_channels: int):
        super().__init__()
        c8, c16, c32 = in_channels
        c = out_channels
        # the second conv of each branch carries the downsampling stride
        self.branch8 = nn.Sequential(_conv_block(c8, c), _conv_block(c, c, stride=4))
        self.branch16 = nn.Sequential(_conv_block(c16, c), _conv_block(c, c, stride=2))
        self.branch32 = nn.Sequential(_conv_block(c32, c), _conv_block(c, c))
        self.coalesce = _conv_block(3 * c, c)
        # Open the mix dominated by the deep branch: untrained stride-8/16
        # texture maps would otherwise drown the stride-32 semantics that the
        # rest of the pipeline keys on, and the trunk learns to distrust the
        # whole feature before the fine branches become informative. Scaling
        # their input slices of the coalesce conv (the one spot after the
        # branch norms, which erase any upstream scaling) keeps the start
        # close to a deep-feature-only fusion while leaving the fine detail
        # reachable by gradient.
        with torch.no_grad():
            self.coalesce[0].weight[:, : 2 * c].mul_(1e-2)
        self.out_channels = c

    def forward(self, f8, f16, f32):
        b8 = self.branch8(f8)
        b16 = self.branch16(f16)
        b32 = self.branch32(f32)
        if b8.shape[-2:] != b32.shape[-2:] or b16.shape[-2:] != b32.shape[-2:]:
            raise ShapeError(
                f"branch outputs disagree: {tuple(b8.shape)}, {tuple(b16.shape)}, "
                f"{tuple(b32.shape)}"
            )
        return self.coalesce(torch.cat([b8, b16, b32], dim=1))


class StaticMaskHead(nn.Module):
    """F -> one channel -> bilinear upsample -> sigmoid, values in (0, 1)."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, 1, 3, padding=1)

    def forward(self, cond_feat, out_hw):
        x = self.proj(cond_feat)
        x = nnf.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)
        return torch.sigmoid(x)


class ConditioningNetwork(nn.Module):
    """Encoder + fusion + static head, with an evaluation counter.

    ``use_fusion=False`` bypasses the three-branch fusion and projects the
    stride-32 backbone feature alone (ablation switch); the output width is C
    either way. ``eval_count`` increments on every conditioning evaluation so
    callers can assert features were computed exactly once per run.
    """

    def __init__(self, encoder=None, cond_channels: int = 64, use_fusion: bool = True):
        super().__init__()
        self.encoder = encoder if encoder is not None else ToyPyramidEncoder()
        if not hasattr(self.encoder, "out_channels") or len(self.encoder.out_channels) != 3:
            raise ShapeError("encoder must declare out_channels for strides 8/16/32")
        self.use_fusion = use_fusion
        if use_fusion:
            self.fusion = FeatureFusion(self.encoder.out_channels, cond_channels)
        else:
            self.fusion = _conv_block(self.encoder.out_channels[2], cond_channels)
        self.static_head = StaticMaskHead(cond_channels)
        self.out_channels = cond_channels
        self.eval_count = 0

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image sides must be divisible by 32, got {h}x{w}")
        self.eval_count += 1
        f8, f16, f32 = self.encoder(images)
        for f, s in ((f8, 8), (f16, 16), (f32, 32)):
            if f.shape[-2:] != (h // s, w // s):
                raise ShapeError(
                    f"encoder stride-{s} map is {tuple(f.shape[-2:])}, "
                    f"expected {(h // s, w // s)}"
                )
        if self.use_fusion:
            return self.fusion(f8, f16, f32)
        return self.fusion(f32)

    def static_mask(self, cond_feat, out_hw):
        return self.static_head(cond_feat, out_hw)
