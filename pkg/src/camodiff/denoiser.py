"""Conditional UNet denoiser with injection attention at the bottleneck.

Input is the image concatenated with the noisy mask (4 channels). Five
resolution levels at strides 1..16 carry the configured widths; a sixth
stride-32 bottleneck reuses the deepest width, which makes its spatial size
equal the conditioning feature's by construction. The timestep enters as a
sinusoidal encoding pushed through a small learned map and added after the
first convolution of every residual block. The decoder consumes the encoder
skips level by level and ends in a 2-channel head: a noise prediction and a
variance-interpolation channel squashed to [0, 1].
"""

import dataclasses
import math

import torch
import torch.nn as nn

from .conditioning import group_norm
from .errors import ShapeError
from .iam import InjectionAttention


@dataclasses.dataclass
class DenoiserOutput:
    """eps: predicted noise; v: variance interpolation fraction in [0, 1]."""

    eps: torch.Tensor
    v: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encoding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimeEmbedding(nn.Module):
    """Sinusoidal encoding followed by a learned two-layer map."""

    def __init__(self, sinusoidal_dim: int, out_dim: int):
        super().__init__()
        self.sinusoidal_dim = sinusoidal_dim
        self.net = nn.Sequential(
            nn.Linear(sinusoidal_dim, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.net[0].weight.dtype
        return self.net(timestep_embedding(t, self.sinusoidal_dim).to(dtype))


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = group_norm(cout)
        self.time_proj = nn.Linear(time_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = group_norm(cout)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.act(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class _Downsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class _Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class UNetDenoiser(nn.Module):
    """Two half-UNets around the bottleneck injection, sharing one skip set.

    ``use_iam=False`` leaves the bottleneck untouched by the conditioning
    feature (the image still enters via input concatenation);
    ``iam_residual`` picks D + O over plain O as the fused bottleneck.
    """

    def __init__(self, widths=(32, 64, 96, 128, 160), cond_channels: int = 64,
                 time_dim: int | None = None, use_iam: bool = True,
                 iam_residual: bool = True, in_channels: int = 4):
        super().__init__()
        if len(widths) != 5:
            raise ShapeError(f"expected 5 level widths, got {widths!r}")
        self.widths = tuple(widths)
        self.cond_channels = cond_channels
        self.use_iam = use_iam
        self.iam_residual = iam_residual
        time_dim = time_dim or 4 * widths[0]

        self.time_embed = TimeEmbedding(widths[0], time_dim)
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            self.down_blocks.append(ResidualBlock(w, w, time_dim))
            w_next = widths[i + 1] if i + 1 < len(widths) else widths[-1]
            self.downsamples.append(_Downsample(w, w_next))

        deep = widths[-1]
        self.mid_block1 = ResidualBlock(deep, deep, time_dim)
        if use_iam:
            # 1x1 adapters reconcile the bottleneck width with the token
            # width d = cond_channels the attention operates at
            self.iam_in = nn.Conv2d(deep, cond_channels, 1)
            self.iam = InjectionAttention(cond_channels)
            self.iam_out = nn.Conv2d(cond_channels, deep, 1)
            # Start the injection branch near zero so the bottleneck begins
            # as the plain UNet path and blends the attention output in only
            # as it earns its keep; full-scale init floods the bottleneck
            # with the untrained encoder's noise and the trunk learns to
            # route around the branch before it turns informative. Nonzero
            # so the output stays sensitive to the conditioning at init.
            with torch.no_grad():
                self.iam_out.weight.mul_(1e-2)
                self.iam_out.bias.mul_(1e-2)
        self.mid_block2 = ResidualBlock(deep, deep, time_dim)

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        prev = deep
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.upsamples.append(_Upsample(prev))
            self.up_blocks.append(ResidualBlock(prev + w, w, time_dim))
            prev = w

        self.head = nn.Sequential(group_norm(widths[0]), nn.SiLU(),
                                  nn.Conv2d(widths[0], 2, 3, padding=1))
        # Start the head near zero so the initial eps prediction is close to
        # the loss optimum's scale and v starts near 0.5; kept nonzero so the
        # output stays sensitive to t and the conditioning at init.
        with torch.no_grad():
            self.head[-1].weight.mul_(1e-2)
            self.head[-1].bias.mul_(1e-2)

    def forward(self, images, y_t, t, cond_feat=None) -> DenoiserOutput:
        b, _, h, w = self._check_inputs(images, y_t, t, cond_feat)
        t = torch.as_tensor(t, dtype=torch.long, device=images.device)
        if t.ndim == 0:
            t = t.repeat(b)
        temb = self.time_embed(t)

        x = self.stem(torch.cat([images, y_t], dim=1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            x = block(x, temb)
            skips.append(x)
            x = down(x)

        x = self.mid_block1(x, temb)
        if self.use_iam:
            injected = self.iam_out(self.iam(self.iam_in(x), cond_feat))
            x = x + injected if self.iam_residual else injected
        x = self.mid_block2(x, temb)

        for up, block, skip in zip(self.upsamples, self.up_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1), temb)

        out = self.head(x)
        return DenoiserOutput(eps=out[:, :1], v=torch.sigmoid(out[:, 1:]))

    def _check_inputs(self, images, y_t, t, cond_feat):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
        if y_t.ndim != 4 or y_t.shape[1] != 1:
            raise ShapeError(f"y_t must be (B, 1, H, W), got {tuple(y_t.shape)}")
        if images.shape[0] != y_t.shape[0] or images.shape[-2:] != y_t.shape[-2:]:
            raise ShapeError(
                f"images {tuple(images.shape)} and y_t {tuple(y_t.shape)} disagree"
            )
        b, _, h, w = images.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input sides must be divisible by 32, got {h}x{w}")
        t_arr = torch.as_tensor(t)
        if bool((t_arr < 1).any()):
            raise IndexError("timesteps must be >= 1")
        if self.use_iam:
            want = (b, self.cond_channels, h // 32, w // 32)
            if cond_feat is None or tuple(cond_feat.shape) != want:
                got = None if cond_feat is None else tuple(cond_feat.shape)
                raise ShapeError(f"cond_feat must be {want}, got {got}")
        return b, images.shape[1], h, w
