"""Forward and reverse diffusion operations on mask tensors.

Masks live in two spaces. Probability space is [0, 1] (dataset masks, metric
inputs); diffusion space is [-1, 1] via the affine map d = 2p - 1. All
functions here operate in diffusion space unless noted. Tensors are shaped
(B, 1, H, W); timesteps are 1-based ints or (B,) long tensors with values in
[1, schedule.num_steps].

The reverse step consumes a denoiser output carrying ``eps`` (noise
prediction) and ``v`` (variance interpolation fraction, already squashed to
[0, 1]); the model log-variance is v*log beta_t + (1-v)*log beta_tilde_t.
"""

import dataclasses

import numpy as np
import torch

from .errors import ShapeError
from .schedule import NoiseSchedule

# half-width of an 8-bit quantization bin in [-1, 1] space
_BIN_HALF_WIDTH = 1.0 / 255.0


def to_diffusion_space(m: torch.Tensor) -> torch.Tensor:
    """Map probability-space values in [0, 1] to diffusion space [-1, 1]."""
    return 2.0 * m - 1.0


def to_probability_space(d: torch.Tensor) -> torch.Tensor:
    """Map diffusion-space values to probabilities, clamping to [0, 1]."""
    return ((d + 1.0) / 2.0).clamp(0.0, 1.0)


def _t_batch(t, batch: int, num_steps: int, device) -> torch.Tensor:
    """Normalize t to a (B,) long tensor and range-check it against [1, T]."""
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    if t.ndim == 0:
        t = t.repeat(batch)
    if t.shape != (batch,):
        raise ShapeError(f"t must be scalar or shape ({batch},), got {tuple(t.shape)}")
    if bool((t < 1).any()) or bool((t > num_steps).any()):
        raise IndexError(f"timestep out of range [1, {num_steps}]")
    return t


def _gather(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Pick per-timestep constants and broadcast against ``like``."""
    vals = torch.from_numpy(table[(t - 1).cpu().numpy()])
    return vals.to(device=like.device, dtype=like.dtype).view(-1, *([1] * (like.ndim - 1)))


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(abar_t) y0 + sqrt(1 - abar_t) eps."""
    if y0.shape != eps.shape:
        raise ShapeError(f"y0 shape {tuple(y0.shape)} != eps shape {tuple(eps.shape)}")
    t = _t_batch(t, y0.shape[0], schedule.num_steps, y0.device)
    abar = _gather(schedule.alpha_bars, t, y0)
    return torch.sqrt(abar) * y0 + torch.sqrt(1.0 - abar) * eps


def q_sample_linear_noise_coef(y0, t, eps, schedule):
    """Variant with a linear (non-square-root) noise coefficient.

    Kept only for comparison experiments; the standard marginal uses
    sqrt(1 - abar_t). Not used by training or sampling.
    """
    if y0.shape != eps.shape:
        raise ShapeError(f"y0 shape {tuple(y0.shape)} != eps shape {tuple(eps.shape)}")
    t = _t_batch(t, y0.shape[0], schedule.num_steps, y0.device)
    abar = _gather(schedule.alpha_bars, t, y0)
    return torch.sqrt(abar) * y0 + (1.0 - abar) * eps


def q_sample_iterative(y0: torch.Tensor, t, rng, schedule: NoiseSchedule) -> torch.Tensor:
    """Apply the single-step kernel t times; Monte-Carlo oracle for q_sample.

    ``rng`` is a torch.Generator or an int seed. Each step draws fresh noise:
    y_s = sqrt(1 - beta_s) y_{s-1} + sqrt(beta_s) eps_s.
    """
    if isinstance(rng, int):
        g = torch.Generator(device=y0.device)
        g.manual_seed(rng)
    else:
        g = rng
    t_int = int(t)
    _t_batch(t_int, y0.shape[0], schedule.num_steps, y0.device)
    y = y0
    for s in range(1, t_int + 1):
        beta = float(schedule.betas[s - 1])
        eps = torch.randn(y0.shape, generator=g, dtype=y0.dtype, device=y0.device)
        y = np.sqrt(1.0 - beta) * y + np.sqrt(beta) * eps
    return y


def predict_y0_from_eps(yt: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal: (yt - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    if yt.shape != eps.shape:
        raise ShapeError(f"yt shape {tuple(yt.shape)} != eps shape {tuple(eps.shape)}")
    t = _t_batch(t, yt.shape[0], schedule.num_steps, yt.device)
    abar = _gather(schedule.alpha_bars, t, yt)
    return (yt - torch.sqrt(1.0 - abar) * eps) / torch.sqrt(abar)


def q_posterior(y0: torch.Tensor, yt: torch.Tensor, t, schedule: NoiseSchedule):
    """Gaussian posterior q(y_{t-1} | y_t, y_0): (mean, variance, log_variance).

    Variance is beta_tilde_t, exactly 0 at t = 1; the returned log variance is
    the clipped table (t = 1 entry replaced by the t = 2 value) so callers can
    exponentiate safely.
    """
    if y0.shape != yt.shape:
        raise ShapeError(f"y0 shape {tuple(y0.shape)} != yt shape {tuple(yt.shape)}")
    t = _t_batch(t, y0.shape[0], schedule.num_steps, y0.device)
    coef0 = _gather(schedule.posterior_mean_coef_y0, t, y0)
    coeft = _gather(schedule.posterior_mean_coef_yt, t, y0)
    mean = coef0 * y0 + coeft * yt
    variance = _gather(schedule.posterior_variance, t, y0).expand_as(y0)
    log_variance = _gather(schedule.posterior_log_variance_clipped, t, y0).expand_as(y0)
    return mean, variance, log_variance


@dataclasses.dataclass
class ReverseStepOutput:
    """Moments of p(y_{t-1} | y_t) plus the implied clean-mask estimate."""

    mean: torch.Tensor
    variance: torch.Tensor
    log_variance: torch.Tensor
    pred_y0: torch.Tensor


def p_mean_variance(denoiser_out, yt: torch.Tensor, t, schedule: NoiseSchedule,
                    clamp_pred: bool = True) -> ReverseStepOutput:
    """Reverse-step moments from a denoiser output.

    pred_y0 is recovered from eps and clamped to [-1, 1] before the posterior
    mean; the log variance interpolates between log beta_t (v = 1) and
    log beta_tilde_t (v = 0), with ``v`` expected in [0, 1].
    """
    eps, v = denoiser_out.eps, denoiser_out.v
    t = _t_batch(t, yt.shape[0], schedule.num_steps, yt.device)
    pred_y0 = predict_y0_from_eps(yt, t, eps, schedule)
    if clamp_pred:
        pred_y0 = pred_y0.clamp(-1.0, 1.0)
    mean, _, _ = q_posterior(pred_y0, yt, t, schedule)
    log_beta = torch.log(_gather(schedule.betas, t, yt))
    log_beta_tilde = _gather(schedule.posterior_log_variance_clipped, t, yt)
    frac = v.clamp(0.0, 1.0)
    log_variance = frac * log_beta + (1.0 - frac) * log_beta_tilde
    return ReverseStepOutput(mean=mean, variance=torch.exp(log_variance),
                             log_variance=log_variance, pred_y0=pred_y0)


def p_sample_step(denoiser_out, yt: torch.Tensor, t, schedule: NoiseSchedule,
                  rng: torch.Generator | None = None,
                  noise: torch.Tensor | None = None) -> ReverseStepOutput:
    """One ancestral reverse step: mean + exp(0.5 log_var) z, z = 0 at t = 1.

    Returns the ReverseStepOutput with ``mean`` replaced by the drawn sample,
    keeping pred_y0 available for traces. z comes from ``rng`` (or from
    ``noise`` verbatim when the caller manages its own draws, e.g. per-image
    generators) so a fixed seed gives bit-identical output.
    """
    t_b = _t_batch(t, yt.shape[0], schedule.num_steps, yt.device)
    out = p_mean_variance(denoiser_out, yt, t_b, schedule)
    if noise is not None:
        if noise.shape != yt.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} != yt shape {tuple(yt.shape)}")
        z = noise.to(dtype=yt.dtype, device=yt.device)
    else:
        z = torch.randn(yt.shape, generator=rng, dtype=yt.dtype, device=yt.device)
    nonzero = (t_b > 1).to(yt.dtype).view(-1, *([1] * (yt.ndim - 1)))
    sample = out.mean + nonzero * torch.exp(0.5 * out.log_variance) * z
    return ReverseStepOutput(mean=sample, variance=out.variance,
                             log_variance=out.log_variance, pred_y0=out.pred_y0)


def kl_normal(mean1, log_var1, mean2, log_var2):
    """Per-element KL(N(mean1, var1) || N(mean2, var2)) in nats."""
    return 0.5 * (
        log_var2 - log_var1
        + torch.exp(log_var1 - log_var2)
        + (mean1 - mean2) ** 2 * torch.exp(-log_var2)
        - 1.0
    )


def discretized_gaussian_nll(y0, mean, log_variance):
    """Per-element NLL of 8-bit-discretized y0 under N(mean, var), in nats.

    y0 holds values on the 255-level grid in [-1, 1]; each observation owns a
    bin of half-width 1/255, with the edge bins absorbing the tails.
    """
    centered = y0 - mean
    inv_std = torch.exp(-0.5 * log_variance)
    cdf_hi = _normal_cdf(inv_std * (centered + _BIN_HALF_WIDTH))
    cdf_lo = _normal_cdf(inv_std * (centered - _BIN_HALF_WIDTH))
    log_cdf_hi = torch.log(cdf_hi.clamp(min=1e-12))
    log_one_minus_cdf_lo = torch.log((1.0 - cdf_lo).clamp(min=1e-12))
    log_delta = torch.log((cdf_hi - cdf_lo).clamp(min=1e-12))
    log_probs = torch.where(
        y0 < -0.999, log_cdf_hi,
        torch.where(y0 > 0.999, log_one_minus_cdf_lo, log_delta),
    )
    return -log_probs


def _normal_cdf(x):
    return torch.special.ndtr(x)


def vlb_terms(y0, yt, t, denoiser_out, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-batch-element variational term in nats per dimension.

    KL(q(y_{t-1}|y_t, y_0) || p(y_{t-1}|y_t)) for t > 1; discretized Gaussian
    NLL at t = 1. Reduction over pixels is a mean, so units are nats/dim.
    """
    t = _t_batch(t, y0.shape[0], schedule.num_steps, y0.device)
    true_mean, _, true_log_var = q_posterior(y0, yt, t, schedule)
    out = p_mean_variance(denoiser_out, yt, t, schedule)
    kl = kl_normal(true_mean, true_log_var, out.mean, out.log_variance)
    kl = kl.flatten(1).mean(dim=1)
    nll = discretized_gaussian_nll(y0, out.mean, out.log_variance)
    nll = nll.flatten(1).mean(dim=1)
    return torch.where(t == 1, nll, kl)


def prior_kl(y0: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """KL(q(y_T | y_0) || N(0, I)) per batch element, nats per dimension.

    Diagnostic for how completely the forward process destroys the mask; has
    no trainable parameters.
    """
    abar_T = float(schedule.alpha_bars[-1])
    mean_sq = abar_T * y0 ** 2
    var = 1.0 - abar_T
    kl = 0.5 * (var + mean_sq - 1.0 - np.log(var))
    return kl.flatten(1).mean(dim=1)
