"""Hybrid training objective: noise MSE + weighted VLB + static mask MSE."""

import dataclasses

import torch

from . import diffusion
from .denoiser import DenoiserOutput
from .errors import ShapeError
from .schedule import NoiseSchedule


@dataclasses.dataclass
class LossBreakdown:
    """Scalar components; total = simple + lambda_vlb * vlb + static."""

    simple: torch.Tensor
    vlb: torch.Tensor
    static: torch.Tensor
    total: torch.Tensor


def loss_simple(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps_true.shape:
        raise ShapeError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    return ((eps_pred - eps_true) ** 2).mean()


def loss_vlb(y0, yt, t, denoiser_out: DenoiserOutput, schedule: NoiseSchedule,
             detach_mean: bool = True) -> torch.Tensor:
    """Batch mean of the variational terms.

    With ``detach_mean`` the eps input is detached so the gradient reaches
    only the variance channel; pass False when comparing against finite
    differences of the loss value, which cannot see the detachment.
    """
    out = denoiser_out
    if detach_mean:
        out = DenoiserOutput(eps=denoiser_out.eps.detach(), v=denoiser_out.v)
    return diffusion.vlb_terms(y0, yt, t, out, schedule).mean()


def loss_static(y_m: torch.Tensor, y0_prob: torch.Tensor) -> torch.Tensor:
    """Mean squared error in probability space between static and true mask."""
    if y_m.shape != y0_prob.shape:
        raise ShapeError(f"shape mismatch {tuple(y_m.shape)} vs {tuple(y0_prob.shape)}")
    return ((y_m - y0_prob) ** 2).mean()


def loss_total(simple, vlb, static, lambda_vlb: float = 0.001) -> LossBreakdown:
    """Assemble the weighted breakdown from precomputed components."""
    total = simple + lambda_vlb * vlb + static
    return LossBreakdown(simple=simple, vlb=vlb, static=static, total=total)
