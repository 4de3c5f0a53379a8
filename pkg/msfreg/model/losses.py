#!/usr/bin/env python3

#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Training objective: dual-scale local normalized cross-correlation plus
# diffusion regularization of the full resolution field.
#
#   total = -(alpha * ncc(I_f, I_m o phi) + beta * ncc(I_f, I_m o phi_hat)) + lambda * reg(phi)
#

from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .constants import NccVariant
from .volgrid import (ContractViolation, DisplacementField, Volume,
                      flow_gradient, resample_flow, warp_tensor)

GridLike = Union[torch.Tensor, Volume, DisplacementField]


@dataclass
class LossWeights:
    alpha: float = 0.7
    beta: float = 0.3
    lam: float = 1.0
    ncc_window: int = 9
    epsilon: float = 1e-5
    ncc_variant: str = NccVariant.SIGNED.value

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ContractViolation("Loss weights alpha, beta and lambda must be >= 0")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ContractViolation(f"NCC window must be odd and >= 3, got {self.ncc_window}")
        if self.epsilon <= 0:
            raise ContractViolation("NCC epsilon must be positive")
        try:
            NccVariant.from_str(self.ncc_variant)
        except KeyError:
            raise ContractViolation(f"Unknown NCC variant {self.ncc_variant!r}, "
                                    f"choose one of {list(NccVariant.values())}")

    @property
    def variant(self) -> NccVariant:
        return NccVariant.from_str(self.ncc_variant)

    # 'lambda' is the public key name, 'lam' the attribute
    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "lambda": self.lam,
                "ncc_window": self.ncc_window, "epsilon": self.epsilon, "ncc_variant": self.ncc_variant}

    @classmethod
    def from_dict(cls, values: dict) -> "LossWeights":
        values = dict(values)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        return cls(**values)


@dataclass
class LossBreakdown:
    ncc_full: torch.Tensor
    ncc_half: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor

    @staticmethod
    def assemble(ncc_full, ncc_half, reg, weights: LossWeights):
        return -(weights.alpha * ncc_full + weights.beta * ncc_half) + weights.lam * reg

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in (self.ncc_full, self.ncc_half, self.reg, self.total))

    def as_record(self, iteration: int) -> dict:
        return {"iteration": int(iteration),
                "ncc_full": float(self.ncc_full),
                "ncc_half": float(self.ncc_half),
                "reg": float(self.reg),
                "total": float(self.total)}


def _batched(x: GridLike) -> torch.Tensor:
    if isinstance(x, (Volume, DisplacementField)):
        return x.batched()
    if x.ndim == 3:
        return x[None, None]
    return x


def box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Zero padded sums over window^3 neighbourhoods from cumulative sums."""
    radius = window // 2
    for dim in range(2, x.ndim):
        pad = [0, 0] * (x.ndim - 2)
        slot = 2 * (x.ndim - 1 - dim)
        pad[slot] = radius + 1
        pad[slot + 1] = radius
        cumulative = torch.cumsum(F.pad(x, pad), dim=dim)
        n = x.shape[dim]
        x = cumulative.narrow(dim, window, n) - cumulative.narrow(dim, 0, n)
    return x


def local_correlation(a: torch.Tensor, b: torch.Tensor, window=9, epsilon=1e-5,
                      variant=NccVariant.SIGNED) -> torch.Tensor:
    """Per-voxel windowed correlation map of two (B, 1, D, H, W) images.

    Statistics only count voxels inside the grid, so the map is invariant
    to affine intensity changes up to the window border.
    """
    if a.shape != b.shape:
        raise ContractViolation(f"Cannot correlate images of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if window < 3 or window % 2 == 0:
        raise ContractViolation(f"NCC window must be odd and >= 3, got {window}")
    if any(n < window for n in a.shape[2:]):
        raise ContractViolation(f"NCC window {window} does not fit shape {tuple(a.shape[2:])}")
    if isinstance(variant, str):
        variant = NccVariant.from_str(variant)

    a = a - a.mean(dim=(2, 3, 4), keepdim=True)
    b = b - b.mean(dim=(2, 3, 4), keepdim=True)
    count = box_sum(torch.ones_like(a[:1, :1]), window)
    sum_a = box_sum(a, window)
    sum_b = box_sum(b, window)
    cross = box_sum(a * b, window) - sum_a * sum_b / count
    var_a = (box_sum(a * a, window) - sum_a * sum_a / count).clamp(min=0)
    var_b = (box_sum(b * b, window) - sum_b * sum_b / count).clamp(min=0)

    if variant == NccVariant.SQUARED:
        return cross * cross / (var_a * var_b + epsilon)
    return cross / torch.sqrt(var_a * var_b + epsilon)


def _interior(x: torch.Tensor, margin: int) -> torch.Tensor:
    if margin <= 0:
        return x
    if any(n <= 2 * margin for n in x.shape[2:]):
        raise ContractViolation(f"Margin {margin} leaves no interior in shape {tuple(x.shape[2:])}")
    return x[..., margin:-margin, margin:-margin, margin:-margin]


def lncc(a: GridLike, b: GridLike, window=9, epsilon=1e-5, variant=NccVariant.SIGNED,
         interior_margin=0) -> torch.Tensor:
    """Mean local correlation, in [-1, 1] for the signed variant."""
    cc = local_correlation(_batched(a), _batched(b), window, epsilon, variant)
    return _interior(cc, interior_margin).mean()


def diffusion_reg(field: GridLike) -> torch.Tensor:
    """Mean over voxels of the summed squared forward differences."""
    flow = _batched(field)
    return flow_gradient(flow).pow(2).sum(dim=(1, 2)).mean()


def total_loss(fixed: GridLike, moving: GridLike, phi: GridLike, phi_hat: GridLike,
               weights: LossWeights = None, interior_margin=0) -> LossBreakdown:
    weights = weights or LossWeights()
    fixed, moving, phi, phi_hat = (_batched(x) for x in (fixed, moving, phi, phi_hat))
    full_shape = tuple(fixed.shape[2:])
    if tuple(moving.shape[2:]) != full_shape or tuple(phi.shape[2:]) != full_shape:
        raise ContractViolation(f"Moving {tuple(moving.shape[2:])} and phi {tuple(phi.shape[2:])} "
                                f"must match fixed shape {full_shape}")
    half_shape = tuple(n // 2 for n in full_shape)
    if tuple(phi_hat.shape[2:]) != half_shape:
        raise ContractViolation(f"phi_hat shape {tuple(phi_hat.shape[2:])} must be half resolution {half_shape}")

    options = dict(window=weights.ncc_window, epsilon=weights.epsilon,
                   variant=weights.variant, interior_margin=interior_margin)
    ncc_full = lncc(fixed, warp_tensor(moving, phi), **options)
    ncc_half = lncc(fixed, warp_tensor(moving, resample_flow(phi_hat, full_shape)), **options)
    reg = diffusion_reg(phi)
    total = LossBreakdown.assemble(ncc_full, ncc_half, reg, weights)
    return LossBreakdown(ncc_full, ncc_half, reg, total)
