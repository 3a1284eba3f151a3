"""Training loop: corrupt the mask, denoise under image conditioning, update.

One step = draw per-element t and noise, form y_t from the clean mask in
diffusion space, run conditioning + UNet, take the hybrid loss and a single
Adam update (grad clipped at global norm 1.0). All randomness is stateless:
step s uses a generator seeded by (seed, "step", s) and epoch e shuffles with
(seed, "epoch", e), so resuming from a checkpoint replays the identical
stream. Checkpoints carry every tensor needed for a bitwise-faithful restart.
"""

import copy
import csv
import dataclasses
import pathlib

import torch
import torch.nn.functional as nnf

from .data_io import DatasetSpec, load_pair
from .diffusion import q_sample, to_diffusion_space
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import MaskDenoisingModel, ModelConfig
from .objectives import loss_simple, loss_static, loss_total, loss_vlb
from .schedule import NoiseSchedule, make_linear_schedule
from .seeding import derive_seed, make_generator

CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass
class TrainConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 16
    image_size: tuple = (64, 64)
    max_steps: int = 5000
    lambda_vlb: float = 0.001
    flip_augment: bool = True
    crop_augment: bool = True
    jitter_augment: bool = True
    jitter_strength: float = 0.2
    crop_min_scale: float = 0.8
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"image_size must be positive multiples of 32, got {h}x{w}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.lambda_vlb < 0:
            raise ConfigError(f"lambda_vlb must be >= 0, got {self.lambda_vlb}")
        if not (0.0 <= self.jitter_strength < 1.0):
            raise ConfigError(f"jitter_strength must be in [0, 1), got {self.jitter_strength}")
        if not (0.0 < self.crop_min_scale <= 1.0):
            raise ConfigError(f"crop_min_scale must be in (0, 1], got {self.crop_min_scale}")
        if self.checkpoint_interval < 1:
            raise ConfigError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}"
            )

    def asdict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class TrainState:
    model: MaskDenoisingModel
    optimizer: torch.optim.Adam
    schedule: NoiseSchedule
    step: int = 0


def init_train_state(config: TrainConfig, model_config: ModelConfig | None = None) -> TrainState:
    """Build model + Adam + schedule; parameter init is seeded from the config."""
    model_config = model_config or ModelConfig()
    torch.manual_seed(derive_seed(config.seed, "init"))
    model = MaskDenoisingModel(model_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=0.0
    )
    schedule = make_linear_schedule(config.num_steps, config.beta_start, config.beta_end)
    return TrainState(model=model, optimizer=optimizer, schedule=schedule, step=0)


def checkpoint_dict(state: TrainState, config: TrainConfig) -> dict:
    """Snapshot everything needed to restart: params, moments, step, configs."""
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "model_state": copy.deepcopy(state.model.state_dict()),
        "optimizer_state": copy.deepcopy(state.optimizer.state_dict()),
        "train_config": config.asdict(),
        "model_config": state.model.config.asdict(),
    }


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(checkpoint_dict(state, config), path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint to {path}: {e}") from e


def _config_from_dict(cls, payload: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - fields
    if unknown:
        raise CheckpointError(f"unknown {cls.__name__} keys in checkpoint: {sorted(unknown)}")
    kwargs = dict(payload)
    for key in ("image_size", "unet_widths", "encoder_widths"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def load_checkpoint(path):
    """Rebuild (TrainState, TrainConfig) from a saved checkpoint file."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return restore_train_state(payload, source=str(path))


def restore_train_state(payload: dict, source: str = "<memory>"):
    required = {
        "format_version", "step", "model_state", "optimizer_state",
        "train_config", "model_config",
    }
    if not isinstance(payload, dict) or not required.issubset(payload):
        raise CheckpointError(f"malformed checkpoint {source}: missing keys")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {source} has format version {payload['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    config = _config_from_dict(TrainConfig, payload["train_config"])
    model_config = _config_from_dict(ModelConfig, payload["model_config"])
    model = MaskDenoisingModel(model_config)
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {source} does not match the model: {e}") from e
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=0.0
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    schedule = make_linear_schedule(config.num_steps, config.beta_start, config.beta_end)
    state = TrainState(model=model, optimizer=optimizer, schedule=schedule,
                       step=int(payload["step"]))
    return state, config


def _grayscale(image: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=image.dtype).view(3, 1, 1)
    return (image * w).sum(dim=0, keepdim=True)


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


def augment(image: torch.Tensor, mask: torch.Tensor, rng: torch.Generator,
            config: TrainConfig):
    """Flip/crop both, jitter the image only, resize to config.image_size.

    Geometric transforms use one draw applied to image and mask alike;
    the mask is resized with nearest so it stays exactly {0, 1}.
    """
    if image.ndim != 3 or mask.ndim != 3 or image.shape[-2:] != mask.shape[-2:]:
        raise DataError(
            f"augment expects aligned (3,H,W)/(1,H,W), got {tuple(image.shape)} "
            f"and {tuple(mask.shape)}"
        )
    if config.flip_augment and torch.rand((), generator=rng).item() < 0.5:
        image = torch.flip(image, dims=[-1])
        mask = torch.flip(mask, dims=[-1])
    if config.crop_augment:
        h, w = image.shape[-2:]
        scale = _uniform(rng, config.crop_min_scale, 1.0)
        ch = max(1, int(round(h * scale)))
        cw = max(1, int(round(w * scale)))
        top = int(torch.randint(0, h - ch + 1, (), generator=rng))
        left = int(torch.randint(0, w - cw + 1, (), generator=rng))
        image = image[:, top:top + ch, left:left + cw]
        mask = mask[:, top:top + ch, left:left + cw]
    if config.jitter_augment:
        s = config.jitter_strength
        brightness = _uniform(rng, 1.0 - s, 1.0 + s)
        contrast = _uniform(rng, 1.0 - s, 1.0 + s)
        saturation = _uniform(rng, 1.0 - s, 1.0 + s)
        image = (image * brightness).clamp(0.0, 1.0)
        mean = _grayscale(image).mean()
        image = (mean + contrast * (image - mean)).clamp(0.0, 1.0)
        gray = _grayscale(image)
        image = (gray + saturation * (image - gray)).clamp(0.0, 1.0)
    size = tuple(config.image_size)
    image = nnf.interpolate(image[None], size=size, mode="bilinear",
                            align_corners=False)[0]
    mask = nnf.interpolate(mask[None], size=size, mode="nearest")[0]
    return image, mask


def train_step(batch, state: TrainState, config: TrainConfig, rng: torch.Generator):
    """One optimization step; returns (state, LossBreakdown).

    Per batch element: t ~ U{1..T}, eps ~ N(0, I), y_t = q_sample(2m-1, t, eps).
    The hybrid loss backpropagates through eps, v, the static head and the
    conditioning stack; a non-finite total aborts before the update.
    """
    images, masks = batch
    model, schedule = state.model, state.schedule
    b = images.shape[0]
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=rng)
    eps = torch.randn(masks.shape, generator=rng, dtype=masks.dtype)
    y0 = to_diffusion_space(masks)
    yt = q_sample(y0, t, eps, schedule)

    cond_feat = model.conditioning_features(images)
    static_pred = model.static_mask(cond_feat, images.shape[-2:])
    out = model.denoise(images, yt, t, cond_feat)

    simple = loss_simple(eps, out.eps)
    vlb = loss_vlb(y0, yt, t, out, schedule, detach_mean=True)
    static = loss_static(static_pred, masks)
    breakdown = loss_total(simple, vlb, static, lambda_vlb=config.lambda_vlb)

    if not torch.isfinite(breakdown.total):
        per_elem = ((out.eps - eps) ** 2).flatten(1).mean(dim=1)
        bad = torch.nonzero(~torch.isfinite(per_elem)).flatten()
        index = int(bad[0]) if bad.numel() else 0
        raise DivergenceError(
            f"non-finite loss at step {state.step + 1} (batch element {index})",
            step=state.step + 1, batch_index=index,
        )

    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def _batch_indices(n: int, step: int, config: TrainConfig):
    """Stateless batch selection: epoch-level shuffle, consecutive slices."""
    per_epoch = max(1, n // config.batch_size)
    epoch, slot = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=make_generator(config.seed, "epoch", epoch))
    if n < config.batch_size:
        reps = -(-config.batch_size // n)
        perm = perm.repeat(reps)
    start = slot * config.batch_size
    return perm[start:start + config.batch_size].tolist()


def _assemble_batch(dataset: DatasetSpec, indices, rng: torch.Generator,
                    config: TrainConfig):
    images, masks = [], []
    for i in indices:
        image, mask = load_pair(dataset, dataset.stems[i])
        image, mask = augment(image, mask, rng, config)
        images.append(image)
        masks.append(mask)
    return torch.stack(images), torch.stack(masks)


def train(dataset: DatasetSpec, config: TrainConfig, out_dir,
          model_config: ModelConfig | None = None, resume=None,
          log_callback=None) -> dict:
    """Run (or resume) the loop; returns the final checkpoint payload.

    Writes ``loss_log.csv`` (columns step, simple, vlb, static, total),
    ``ckpt_step{N}.pt`` every checkpoint_interval steps, and ``ckpt_final.pt``.
    ``resume`` takes a checkpoint path or payload dict; the stateless seeding
    makes the continued loss log identical to an uninterrupted run's tail.
    """
    if not dataset.stems:
        raise DataError("training dataset is empty")
    out_dir = pathlib.Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"cannot create output directory {out_dir}: {e}") from e

    if resume is None:
        state = init_train_state(config, model_config)
    elif isinstance(resume, dict):
        state, _ = restore_train_state(resume)
    else:
        state, _ = load_checkpoint(resume)

    log_path = out_dir / "loss_log.csv"
    write_header = not log_path.exists() or resume is None
    mode = "w" if write_header else "a"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(["step", "simple", "vlb", "static", "total"])
        while state.step < config.max_steps:
            rng = make_generator(config.seed, "step", state.step)
            indices = _batch_indices(len(dataset.stems), state.step, config)
            batch = _assemble_batch(dataset, indices, rng, config)
            state, breakdown = train_step(batch, state, config, rng)
            row = [state.step,
                   f"{float(breakdown.simple.detach()):.10e}",
                   f"{float(breakdown.vlb.detach()):.10e}",
                   f"{float(breakdown.static.detach()):.10e}",
                   f"{float(breakdown.total.detach()):.10e}"]
            writer.writerow(row)
            if log_callback is not None:
                log_callback(state.step, breakdown)
            if state.step % config.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"ckpt_step{state.step}.pt", state, config)
    payload = checkpoint_dict(state, config)
    try:
        torch.save(payload, out_dir / "ckpt_final.pt")
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint to {out_dir}: {e}") from e
    return payload
