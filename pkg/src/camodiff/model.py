"""Assembly of the conditioning network and the conditional UNet."""

import dataclasses

import torch.nn as nn

from .conditioning import ConditioningNetwork, ToyPyramidEncoder
from .denoiser import UNetDenoiser


@dataclasses.dataclass
class ModelConfig:
    unet_widths: tuple = (32, 64, 96, 128, 160)
    cond_channels: int = 64
    encoder_widths: tuple = (16, 32, 64, 96)
    time_dim: int | None = None
    use_iam: bool = True
    use_fusion: bool = True
    iam_residual: bool = True

    def asdict(self):
        return dataclasses.asdict(self)


class MaskDenoisingModel(nn.Module):
    """Everything trainable: encoder, fusion, static head, attention, UNet.

    A custom encoder (any module with ``out_channels`` for strides 8/16/32)
    can be swapped in; by default the toy pyramid is used.
    """

    def __init__(self, config: ModelConfig | None = None, encoder=None):
        super().__init__()
        self.config = config or ModelConfig()
        if encoder is None:
            encoder = ToyPyramidEncoder(tuple(self.config.encoder_widths))
        self.conditioning = ConditioningNetwork(
            encoder=encoder,
            cond_channels=self.config.cond_channels,
            use_fusion=self.config.use_fusion,
        )
        self.denoiser = UNetDenoiser(
            widths=tuple(self.config.unet_widths),
            cond_channels=self.config.cond_channels,
            time_dim=self.config.time_dim,
            use_iam=self.config.use_iam,
            iam_residual=self.config.iam_residual,
        )

    def conditioning_features(self, images):
        return self.conditioning(images)

    def static_mask(self, cond_feat, out_hw):
        return self.conditioning.static_mask(cond_feat, out_hw)

    def denoise(self, images, y_t, t, cond_feat):
        return self.denoiser(images, y_t, t, cond_feat)

    @property
    def conditioning_eval_count(self):
        return self.conditioning.eval_count
