"""Noise schedule tables for mask diffusion.

A schedule owns every per-timestep constant the forward and reverse processes
need: betas, alphas, their cumulative products, and the closed-form posterior
coefficients. Tables are float64 numpy arrays and never leave float64; users
cast at the point of use. Timesteps are 1-based in the public API (t in
[1, T]); arrays are 0-indexed, so table[t - 1] belongs to timestep t.

The alpha_bar_0 == 1 convention makes the posterior variance at t = 1 exactly
zero: the final reverse step is deterministic.
"""

import dataclasses

import numpy as np

from .errors import ConfigError


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable per-timestep constants, all shaped (num_steps,)."""

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    posterior_variance: np.ndarray
    posterior_log_variance_clipped: np.ndarray
    posterior_mean_coef_y0: np.ndarray
    posterior_mean_coef_yt: np.ndarray
    original_indices: np.ndarray
    is_respaced: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)


def _assemble(betas, alpha_bars, original_indices, is_respaced):
    """Derive every table from betas (and optionally exact alpha_bars)."""
    betas = np.asarray(betas, dtype=np.float64)
    num_steps = betas.shape[0]
    alphas = 1.0 - betas
    if alpha_bars is None:
        alpha_bars = np.cumprod(alphas)
    else:
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    alpha_bars_prev = np.append(1.0, alpha_bars[:-1])

    posterior_variance = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    # t = 1 has zero posterior variance; clip its log with the t = 2 value so
    # downstream interpolation never sees -inf. A 1-step schedule has no t = 2,
    # fall back to log(beta_1) there (never reached by the sampler anyway).
    if num_steps > 1:
        clipped = np.append(posterior_variance[1], posterior_variance[1:])
    else:
        clipped = betas
    posterior_log_variance_clipped = np.log(clipped)

    posterior_mean_coef_y0 = np.sqrt(alpha_bars_prev) * betas / (1.0 - alpha_bars)
    posterior_mean_coef_yt = np.sqrt(alphas) * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)

    if original_indices is None:
        original_indices = np.arange(1, num_steps + 1, dtype=np.int64)
    else:
        original_indices = np.asarray(original_indices, dtype=np.int64)

    return NoiseSchedule(
        num_steps=num_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        posterior_variance=posterior_variance,
        posterior_log_variance_clipped=posterior_log_variance_clipped,
        posterior_mean_coef_y0=posterior_mean_coef_y0,
        posterior_mean_coef_yt=posterior_mean_coef_yt,
        original_indices=original_indices,
        is_respaced=is_respaced,
    )


def make_linear_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``num_steps`` timesteps.

    Defaults are the standard linear-DDPM endpoints. Requires
    0 < beta_start <= beta_end < 1 and num_steps >= 1.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ConfigError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"beta bounds must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return _assemble(betas, None, None, is_respaced=False)


def respace(schedule: NoiseSchedule, num_steps: int) -> NoiseSchedule:
    """Subsample a schedule to ``num_steps`` evenly strided timesteps.

    The last timestep is always retained. Betas are recomputed as
    beta'_i = 1 - abar_{t_i} / abar_{t_{i-1}}, which makes the respaced
    cumulative products equal the parent's at every retained step; the
    alpha_bars table is taken from the parent by lookup so the equality is
    exact, not merely within rounding. Respacing an already respaced schedule
    is rejected.
    """
    if schedule.is_respaced:
        raise ConfigError("schedule is already respaced; respace the original instead")
    if not isinstance(num_steps, (int, np.integer)) or not (1 <= num_steps <= schedule.num_steps):
        raise ConfigError(
            f"respaced num_steps must lie in [1, {schedule.num_steps}], got {num_steps!r}"
        )

    parent_t = schedule.num_steps
    if num_steps == parent_t:
        # Full retention: the tables are definitionally the parent's.
        return dataclasses.replace(schedule, is_respaced=True)
    if num_steps == 1:
        keep = np.array([parent_t - 1], dtype=np.int64)
    else:
        keep = np.round(np.linspace(0, parent_t - 1, num_steps)).astype(np.int64)

    alpha_bars = schedule.alpha_bars[keep]
    prev = np.append(1.0, alpha_bars[:-1])
    betas = 1.0 - alpha_bars / prev
    return _assemble(betas, alpha_bars, keep + 1, is_respaced=True)
