"""Inference: iterate the reverse process from pure noise under an image.

Conditioning features are extracted once per run and reused across all steps.
Noise is drawn from one generator per image, seeded by (seed, "image", i), so
results do not depend on how images are batched. Respaced sampling conditions
the denoiser on the original timestep indices while the local respaced tables
supply the step coefficients.
"""

import dataclasses

import torch

from .diffusion import p_sample_step, to_probability_space
from .errors import ConfigError, ShapeError
from .schedule import NoiseSchedule, respace
from .seeding import derive_seed, make_generator
from .trainer import load_checkpoint, restore_train_state


@dataclasses.dataclass
class SampleTrace:
    """Final mask plus optional running-estimate snapshots.

    ``final`` is the last step's clean-mask estimate mapped to [0, 1].
    ``snapshots`` hold the same (pred_y0 + 1)/2 mapping of the estimate made
    while processing each requested timestep, ordered by decreasing t;
    ``snapshot_timesteps`` lists the matching (original) timesteps.
    """

    final: torch.Tensor
    snapshot_timesteps: tuple = ()
    snapshots: tuple = ()


def load_model_for_sampling(checkpoint):
    """Checkpoint path or payload dict -> (model in eval mode, schedule)."""
    if isinstance(checkpoint, dict):
        state, _ = restore_train_state(checkpoint)
    else:
        state, _ = load_checkpoint(checkpoint)
    state.model.eval()
    return state.model, state.schedule


def _stacked_randn(generators, shape, dtype):
    cols = [torch.randn(shape, generator=g, dtype=dtype) for g in generators]
    return torch.stack(cols)


def sample(images: torch.Tensor, model, schedule: NoiseSchedule, *,
           num_steps: int | None = None, seed: int = 0,
           trace_at=None, image_indices=None) -> SampleTrace:
    """Generate masks for a batch of images; returns a SampleTrace.

    ``num_steps`` < T respaces the schedule on the fly; ``trace_at`` requests
    pred_y0 snapshots at the given original timesteps (each must be visited by
    the respaced trajectory). ``image_indices`` overrides the per-image noise
    keys (default 0..B-1) so callers chunking a larger set into batches get
    the same masks regardless of batch size.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
    if image_indices is not None and len(image_indices) != images.shape[0]:
        raise ShapeError(
            f"image_indices has {len(image_indices)} entries for batch "
            f"of {images.shape[0]}"
        )
    if num_steps is not None:
        if not (1 <= num_steps <= schedule.num_steps):
            raise ConfigError(
                f"num_steps must be in [1, {schedule.num_steps}], got {num_steps}"
            )
        if num_steps < schedule.num_steps:
            schedule = respace(schedule, num_steps)
    requested = sorted(set(int(t) for t in trace_at)) if trace_at else []
    visited = set(int(t) for t in schedule.original_indices)
    missing = [t for t in requested if t not in visited]
    if missing:
        raise ConfigError(
            f"trace timesteps {missing} are not visited by this schedule "
            f"(visited: {len(visited)} steps)"
        )

    b, _, h, w = images.shape
    if image_indices is None:
        image_indices = range(b)
    generators = [make_generator(seed, "image", int(i)) for i in image_indices]
    mask_shape = (1, h, w)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yt = _stacked_randn(generators, mask_shape, images.dtype)
            cond_feat = model.conditioning_features(images)
            trace_ts, trace_masks = [], []
            step_out = None
            for i in range(schedule.num_steps - 1, -1, -1):
                t_parent = int(schedule.original_indices[i])
                t_parent_b = torch.full((b,), t_parent, dtype=torch.long)
                out = model.denoise(images, yt, t_parent_b, cond_feat)
                z = _stacked_randn(generators, mask_shape, images.dtype)
                step_out = p_sample_step(out, yt, i + 1, schedule, noise=z)
                yt = step_out.mean
                if t_parent in requested:
                    trace_ts.append(t_parent)
                    trace_masks.append(to_probability_space(step_out.pred_y0))
            final = to_probability_space(step_out.pred_y0)
    finally:
        model.train(was_training)
    return SampleTrace(final=final, snapshot_timesteps=tuple(trace_ts),
                       snapshots=tuple(trace_masks))


def sample_ensemble(images: torch.Tensor, model, schedule: NoiseSchedule, *,
                    num_steps: int | None = None, num_samples: int = 1,
                    seed: int = 0, combine: str = "mean",
                    image_indices=None) -> torch.Tensor:
    """Average ``num_samples`` independent masks per image.

    Member k reruns ``sample`` with a seed derived from (seed, k); member 0
    uses the base seed so a singleton ensemble equals ``sample`` exactly.
    ``combine="vote"`` returns the pixelwise majority of binarized members.
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    if combine not in ("mean", "vote"):
        raise ConfigError(f"combine must be 'mean' or 'vote', got '{combine}'")
    members = []
    for k in range(num_samples):
        member_seed = seed if k == 0 else derive_seed(seed, "ensemble", k)
        members.append(sample(images, model, schedule, num_steps=num_steps,
                              seed=member_seed, image_indices=image_indices).final)
    stacked = torch.stack(members)
    if combine == "vote":
        votes = (stacked >= 0.5).to(stacked.dtype).mean(dim=0)
        return (votes >= 0.5).to(stacked.dtype)
    return stacked.mean(dim=0)


def binarize(mask: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Elementwise mask >= threshold, returned in the input dtype."""
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    return (mask >= threshold).to(mask.dtype)
