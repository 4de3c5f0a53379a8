#!/usr/bin/env python3

#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Registration network: shared encoder, shared auxiliary decoder and a
# fusion pyramid decoder predicting one displacement residual per scale.
#

from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .constants import CompositionMode
from .volgrid import (ContractViolation, DisplacementField, FeatureGrid, Volume,
                      compose_flows, upsample_flow, warp_tensor)

NUM_SCALES = 5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    aux_decoder_channels is ordered coarse to fine, encoder_channels fine to coarse.
    """
    num_scales: int = NUM_SCALES
    encoder_channels: List[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])
    aux_decoder_channels: List[int] = field(default_factory=lambda: [64, 32, 16, 16, 16])
    msfb_bottleneck_ratio: int = 4
    msfb_local_kernel: int = 7
    negative_slope: float = 0.2
    head_init: bool = True
    composition: str = CompositionMode.COMPOSE.value

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.aux_decoder_channels = [int(c) for c in self.aux_decoder_channels]
        if self.num_scales != NUM_SCALES:
            raise ContractViolation(f"num_scales must be {NUM_SCALES}, got {self.num_scales}")
        for name in ("encoder_channels", "aux_decoder_channels"):
            channels = getattr(self, name)
            if len(channels) != self.num_scales:
                raise ContractViolation(f"{name} must list {self.num_scales} entries, got {len(channels)}")
            if any(c < 1 for c in channels):
                raise ContractViolation(f"{name} entries must be >= 1, got {channels}")
        if self.msfb_bottleneck_ratio < 1:
            raise ContractViolation("msfb_bottleneck_ratio must be a positive integer")
        if self.msfb_local_kernel < 1 or self.msfb_local_kernel % 2 == 0:
            raise ContractViolation("msfb_local_kernel must be a positive odd integer")
        try:
            CompositionMode.from_str(self.composition)
        except KeyError:
            raise ContractViolation(f"Unknown composition mode {self.composition!r}, "
                                    f"choose one of {list(CompositionMode.values())}")

    @property
    def composition_mode(self) -> CompositionMode:
        return CompositionMode.from_str(self.composition)

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls(**values)


@dataclass
class FeaturePyramid:
    """Per-scale features of one batch of images, finest level first."""
    levels: List[torch.Tensor]

    def __post_init__(self):
        for finer, coarser in zip(self.levels, self.levels[1:]):
            if any(f != 2 * c for f, c in zip(finer.shape[2:], coarser.shape[2:])):
                raise ContractViolation(f"Pyramid level {tuple(coarser.shape[2:])} does not halve {tuple(finer.shape[2:])}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, level):
        return self.levels[level]

    @property
    def shapes(self) -> List[Tuple[int, int, int]]:
        return [tuple(level.shape[2:]) for level in self.levels]

    @property
    def channels(self) -> List[int]:
        return [level.shape[1] for level in self.levels]

    def grid(self, level: int, index=0) -> FeatureGrid:
        return FeatureGrid(self.levels[level][index])


@dataclass
class RegistrationOutput:
    """Batched network output.

    phi is the full resolution field, phi_hat the half resolution one and
    per_scale_deltas the predicted residuals, coarsest first.
    """
    phi: torch.Tensor
    phi_hat: torch.Tensor
    per_scale_deltas: List[torch.Tensor]

    def phi_field(self, index=0, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
        return DisplacementField.from_batched(self.phi, index, spacing)

    def phi_hat_field(self, index=0, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
        half = tuple(2 * s for s in spacing)
        return DisplacementField.from_batched(self.phi_hat, index, half)


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels, out_channels, negative_slope):
        super().__init__(nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
                         nn.LeakyReLU(negative_slope))


class SharedEncoder(nn.Module):
    """Five-level convolutional encoder, average pooling between levels."""

    def __init__(self, channels: Sequence[int], negative_slope: float):
        super().__init__()
        self.levels = nn.ModuleList()
        in_channels = 1
        for level, out_channels in enumerate(channels):
            layers = [] if level == 0 else [nn.AvgPool3d(2)]
            layers += [ConvBlock(in_channels, out_channels, negative_slope),
                       ConvBlock(out_channels, out_channels, negative_slope)]
            self.levels.append(nn.Sequential(*layers))
            in_channels = out_channels

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        features = []
        x = image
        for level in self.levels:
            x = level(x)
            features.append(x)
        return features


class AuxiliaryDecoder(nn.Module):
    """Upsampling path over one image's encoder pyramid with skip connections."""

    def __init__(self, encoder_channels: Sequence[int], aux_channels: Sequence[int], negative_slope: float):
        super().__init__()
        depth = len(encoder_channels)
        self.bottom = ConvBlock(encoder_channels[-1], aux_channels[0], negative_slope)
        self.up_blocks = nn.ModuleList()
        for step in range(1, depth):
            skip_channels = encoder_channels[depth - 1 - step]
            self.up_blocks.append(ConvBlock(aux_channels[step - 1] + skip_channels, aux_channels[step], negative_slope))

    def forward(self, features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        x = self.bottom(features[-1])
        outputs = [x]
        for step, block in enumerate(self.up_blocks, 1):
            skip = features[-1 - step]
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
            outputs.append(x)
        return outputs[::-1]


class MultiScaleFusionBlock(nn.Module):
    """Fuses encoder, auxiliary decoder and coarse field inputs of one scale.

    A channel gate from pooled statistics (global) and a voxel gate from
    channel-pooled statistics (local) filter the concatenated inputs before
    the fusing convolution.
    """

    def __init__(self, in_channels, out_channels, bottleneck_ratio=4, local_kernel=7, negative_slope=0.2):
        super().__init__()
        hidden = max(1, in_channels // bottleneck_ratio)
        self.global_gate = nn.Sequential(
            nn.AdaptiveAvgPool3d(1),
            nn.Conv3d(in_channels, hidden, kernel_size=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv3d(hidden, in_channels, kernel_size=1),
            nn.Sigmoid(),
        )
        self.local_gate = nn.Sequential(
            nn.Conv3d(2, 1, kernel_size=local_kernel, padding=local_kernel // 2),
            nn.Sigmoid(),
        )
        self.fuse = ConvBlock(in_channels, out_channels, negative_slope)

    def forward(self, warped_mov_enc, fix_enc, warped_mov_aux, fix_aux, up_flow):
        inputs = (warped_mov_enc, fix_enc, warped_mov_aux, fix_aux, up_flow)
        shapes = {tuple(t.shape[2:]) for t in inputs}
        if len(shapes) != 1:
            raise ContractViolation(f"Fusion inputs disagree in spatial shape: {sorted(shapes)}")
        x = torch.cat(inputs, dim=1)
        x = x * self.global_gate(x)
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        x = x * self.local_gate(pooled)
        return self.fuse(x)


class FusionPyramidNet(nn.Module):
    """Coarse-to-fine registration network.

    The coarsest scale predicts a field from the concatenated encoder
    features. Every finer scale upsamples the current field, warps the moving
    encoder and auxiliary features with it, fuses them with the fixed
    features and composes the predicted residual onto the upsampled field.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        enc = self.config.encoder_channels
        aux_fine_first = self.config.aux_decoder_channels[::-1]
        slope = self.config.negative_slope

        self.encoder = SharedEncoder(enc, slope)
        self.aux_decoder = AuxiliaryDecoder(enc, self.config.aux_decoder_channels, slope)
        self.coarse_head = nn.Conv3d(2 * enc[-1], 3, kernel_size=3, padding=1)
        self.fusion_blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        for level in range(self.config.num_scales - 1):
            in_channels = 2 * enc[level] + 2 * aux_fine_first[level] + 3
            self.fusion_blocks.append(MultiScaleFusionBlock(
                in_channels, 2 * enc[level], self.config.msfb_bottleneck_ratio,
                self.config.msfb_local_kernel, slope))
            self.heads.append(nn.Conv3d(2 * enc[level], 3, kernel_size=3, padding=1))

        if self.config.head_init:
            for head in (self.coarse_head, *self.heads):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_shape(self, shape: Sequence[int]):
        divisor = self.config.divisor
        if len(shape) != 3 or any(n % divisor != 0 or n < divisor for n in shape):
            raise ContractViolation(f"Input shape {tuple(shape)} must be 3D and divisible by {divisor}")

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        self.check_shape(image.shape[2:])
        return FeaturePyramid(self.encoder(image))

    def aux_decode(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid(self.aux_decoder(pyramid.levels))

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> RegistrationOutput:
        if moving.shape != fixed.shape:
            raise ContractViolation(f"Moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} shapes differ")
        mode = self.config.composition_mode
        mov_enc = self.encode(moving)
        fix_enc = self.encode(fixed)
        mov_aux = self.aux_decode(mov_enc)
        fix_aux = self.aux_decode(fix_enc)

        flow = self.coarse_head(torch.cat([mov_enc[-1], fix_enc[-1]], dim=1))
        deltas = [flow]
        phi_hat = None
        for level in reversed(range(self.config.num_scales - 1)):
            up = upsample_flow(flow, 2)
            fused = self.fusion_blocks[level](
                warp_tensor(mov_enc[level], up), fix_enc[level],
                warp_tensor(mov_aux[level], up), fix_aux[level], up)
            delta = self.heads[level](fused)
            flow = compose_flows(up, delta, mode)
            deltas.append(delta)
            if level == 1:
                phi_hat = flow
        return RegistrationOutput(phi=flow, phi_hat=phi_hat, per_scale_deltas=deltas)


def recompose(per_scale_deltas: Sequence[torch.Tensor], mode=CompositionMode.COMPOSE) -> torch.Tensor:
    """Rebuild the full resolution field from residuals ordered coarsest first."""
    flow = per_scale_deltas[0]
    for delta in per_scale_deltas[1:]:
        flow = compose_flows(upsample_flow(flow, 2), delta, mode)
    return flow


def encode(image: Volume, model: FusionPyramidNet) -> FeaturePyramid:
    return model.encode(image.batched())


def aux_decode(pyramid: FeaturePyramid, model: FusionPyramidNet) -> FeaturePyramid:
    return model.aux_decode(pyramid)


def msfb(block: MultiScaleFusionBlock, warped_mov_enc: FeatureGrid, fix_enc: FeatureGrid,
         warped_mov_aux: FeatureGrid, fix_aux: FeatureGrid, up_ddf: DisplacementField) -> FeatureGrid:
    fused = block(warped_mov_enc.batched(), fix_enc.batched(), warped_mov_aux.batched(),
                  fix_aux.batched(), up_ddf.batched())
    return FeatureGrid(fused[0])


def register(moving: Volume, fixed: Volume, model: FusionPyramidNet) -> RegistrationOutput:
    """Single pair inference without gradient tracking."""
    if moving.shape != fixed.shape:
        raise ContractViolation(f"Moving {moving.shape} and fixed {fixed.shape} shapes differ")
    with torch.no_grad():
        return model(moving.batched(), fixed.batched())
