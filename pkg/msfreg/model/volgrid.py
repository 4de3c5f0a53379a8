#!/usr/bin/env python3

#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Grid numerics shared by the model, the losses and the metrics:
# volumes, displacement fields, warping, resampling, composition and
# finite difference Jacobians.
#
# Conventions used throughout:
#  - volumes are (D, H, W), displacement vectors are (3, D, H, W) with
#    component i displacing along array axis i, in voxels of their own grid
#  - batched tensors are (B, C, D, H, W), flows (B, 3, D, H, W)
#  - sampling outside the grid clamps to the border
#

import itertools
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from .constants import Stencil, CompositionMode

Shape = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


class ContractViolation(ValueError):
    def __init__(self, message):

        # Call the base class constructor with the parameters it needs
        super().__init__(message)


def _require(condition, message):
    if not condition:
        raise ContractViolation(message)


def _as_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    _require(len(spacing) == 3, f"Spacing must have 3 components, got {spacing}")
    _require(all(s > 0 for s in spacing), f"Spacing must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid with its physical voxel spacing in mm."""
    values: torch.Tensor
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = torch.as_tensor(self.values)
        _require(values.ndim == 3, f"Volume must be 3D, got shape {tuple(values.shape)}")
        _require(all(n >= 1 for n in values.shape), "Volume shape components must be >= 1")
        if not values.is_floating_point():
            values = values.float()
        _require(bool(torch.isfinite(values).all()), "Volume contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> Shape:
        return tuple(self.values.shape)

    def batched(self) -> torch.Tensor:
        return self.values[None, None]


@dataclass(frozen=True)
class DisplacementField:
    """Grid of displacement vectors, in voxels of the field's own grid."""
    vectors: torch.Tensor
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vectors = torch.as_tensor(self.vectors)
        _require(vectors.ndim == 4 and vectors.shape[0] == 3,
                 f"Displacement field must be (3, D, H, W), got {tuple(vectors.shape)}")
        if not vectors.is_floating_point():
            vectors = vectors.float()
        _require(bool(torch.isfinite(vectors).all()), "Displacement field contains non-finite vectors")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @classmethod
    def identity(cls, shape: Sequence[int], spacing=(1.0, 1.0, 1.0), dtype=torch.float32) -> "DisplacementField":
        return cls(torch.zeros((3, *shape), dtype=dtype), spacing)

    @classmethod
    def from_batched(cls, flow: torch.Tensor, index=0, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        return cls(flow[index].detach(), spacing)

    @property
    def shape(self) -> Shape:
        return tuple(self.vectors.shape[1:])

    @property
    def is_identity(self) -> bool:
        return not bool(torch.any(self.vectors))

    def batched(self) -> torch.Tensor:
        return self.vectors[None]


@dataclass(frozen=True)
class FeatureGrid:
    """C-channel feature map at one pyramid scale."""
    values: torch.Tensor

    def __post_init__(self):
        values = torch.as_tensor(self.values)
        _require(values.ndim == 4 and values.shape[0] >= 1,
                 f"Feature grid must be (C, D, H, W), got {tuple(values.shape)}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.values.shape)

    @property
    def spatial_shape(self) -> Shape:
        return tuple(self.values.shape[1:])

    def batched(self) -> torch.Tensor:
        return self.values[None]


@dataclass(frozen=True)
class LandmarkSet:
    """Landmark coordinates in mm, one (x, y, z) row per point."""
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        _require(bool(np.isfinite(points).all()), "Landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", points)

    def __len__(self):
        return len(self.points)

    def to_voxels(self, spacing) -> np.ndarray:
        return self.points / np.asarray(_as_spacing(spacing))

    def inside(self, shape: Sequence[int], spacing) -> np.ndarray:
        """Per point, True when its voxel coordinate lies within the grid."""
        voxels = self.to_voxels(spacing)
        upper = np.asarray(shape, dtype=np.float64) - 1
        return np.all((voxels >= 0) & (voxels <= upper), axis=1)


@dataclass(frozen=True)
class LabelMap:
    """Integer class IDs per voxel, 0 is background."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        _require(values.ndim == 3, f"Label map must be 3D, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.integer):
            _require(bool(np.all(np.mod(values, 1) == 0)), "Label map values must be integers")
            values = values.astype(np.int32)
        _require(bool(np.all(values >= 0)), "Label map values must be non-negative")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Shape:
        return tuple(self.values.shape)

    def classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.values) if c != 0)

    def mask(self, class_id: int) -> np.ndarray:
        return self.values == class_id


#
# Tensor kernels on batched data
#

def identity_grid(shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel coordinate grid of the given shape, (3, D, H, W)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def sample_tensor(source: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear sampling of source (B, C, *grid) at voxel coordinates (B, 3, *out).

    Coordinates are clamped to the grid. Integer coordinates return the
    stored values bit for bit.
    """
    batch, channels = source.shape[:2]
    size = source.shape[2:]
    out_shape = coords.shape[2:]
    coords = coords.to(source.dtype)
    flat = source.reshape(batch, channels, -1)

    lower, upper, frac = [], [], []
    for axis, n in enumerate(size):
        c = coords[:, axis].clamp(0, n - 1)
        base = c.detach().floor()
        frac.append(c - base)
        base = base.long()
        lower.append(base)
        upper.append((base + 1).clamp(max=n - 1))

    strides = (size[1] * size[2], size[2], 1)
    corners = {}
    for corner in itertools.product((0, 1), repeat=3):
        index = 0
        for axis, bit in enumerate(corner):
            index = index + (upper[axis] if bit else lower[axis]) * strides[axis]
        index = index.reshape(batch, 1, -1).expand(batch, channels, -1)
        corners[corner] = flat.gather(2, index).reshape(batch, channels, *out_shape)

    # one axis at a time as lo + f * (hi - lo); constants come back exactly
    for axis in range(3):
        f = frac[axis].unsqueeze(1)
        corners = {rest: corners[(0,) + rest] + f * (corners[(1,) + rest] - corners[(0,) + rest])
                   for rest in itertools.product((0, 1), repeat=2 - axis)}
    return corners[()]


def warp_tensor(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample source at x + u(x). source (B, C, *S), flow (B, 3, *S)."""
    _require(source.ndim == 5 and flow.ndim == 5 and flow.shape[1] == 3,
             f"Expected (B, C, D, H, W) input and (B, 3, D, H, W) flow, got {tuple(source.shape)} and {tuple(flow.shape)}")
    _require(source.shape[2:] == flow.shape[2:],
             f"Flow shape {tuple(flow.shape[2:])} does not match input shape {tuple(source.shape[2:])}")
    _require(source.shape[0] == flow.shape[0] or flow.shape[0] == 1,
             "Flow batch size must match the input or be 1")
    grid = identity_grid(flow.shape[2:], dtype=source.dtype, device=source.device)
    coords = grid.unsqueeze(0) + flow.to(source.dtype)
    if coords.shape[0] != source.shape[0]:
        coords = coords.expand(source.shape[0], -1, -1, -1, -1)
    return sample_tensor(source, coords)


def resample_flow(flow: torch.Tensor, target_shape: Sequence[int]) -> torch.Tensor:
    """Resample a flow onto target_shape, rescaling vectors to the new voxel size.

    Target voxel x' samples the source grid at x' * n / n'.
    """
    target_shape = tuple(int(t) for t in target_shape)
    _require(len(target_shape) == 3 and all(t >= 1 for t in target_shape),
             f"Target shape must have 3 positive components, got {target_shape}")
    source_shape = flow.shape[2:]
    if tuple(source_shape) == target_shape:
        return flow
    grid = identity_grid(target_shape, dtype=flow.dtype, device=flow.device)
    to_source = torch.tensor([n / t for n, t in zip(source_shape, target_shape)], dtype=flow.dtype, device=flow.device)
    coords = (grid * to_source.view(3, 1, 1, 1)).unsqueeze(0).expand(flow.shape[0], -1, -1, -1, -1)
    sampled = sample_tensor(flow, coords)
    to_target = torch.tensor([t / n for n, t in zip(source_shape, target_shape)], dtype=flow.dtype, device=flow.device)
    return sampled * to_target.view(1, 3, 1, 1, 1)


def upsample_flow(flow: torch.Tensor, factor: int = 2) -> torch.Tensor:
    _require(int(factor) == factor and factor >= 2, f"Upsampling factor must be an integer >= 2, got {factor}")
    return resample_flow(flow, [n * int(factor) for n in flow.shape[2:]])


def compose_flows(prev_up: torch.Tensor, delta: torch.Tensor, mode=CompositionMode.COMPOSE) -> torch.Tensor:
    """phi(x) = delta(x) + prev_up(x + delta(x)), or plain addition in ADD mode."""
    _require(prev_up.shape == delta.shape,
             f"Cannot compose flows of shapes {tuple(prev_up.shape)} and {tuple(delta.shape)}")
    if mode == CompositionMode.ADD:
        return prev_up + delta
    return delta + warp_tensor(prev_up, delta)


def _axis_differences(flow: torch.Tensor, axis: int, forward: bool) -> torch.Tensor:
    dim = 2 + axis
    n = flow.shape[dim]
    _require(n >= 2, f"Finite differences need at least 2 voxels along axis {axis}")
    diff = torch.diff(flow, dim=dim)
    if forward:
        # last slice falls back to the backward difference
        return torch.cat([diff, diff.narrow(dim, n - 2, 1)], dim=dim)
    # first slice falls back to the forward difference
    return torch.cat([diff.narrow(dim, 0, 1), diff], dim=dim)


def flow_gradient(flow: torch.Tensor) -> torch.Tensor:
    """Forward differences du_i/dx_j as (B, 3 [i], 3 [j], D, H, W)."""
    return torch.stack([_axis_differences(flow, axis, True) for axis in range(3)], dim=2)


def flow_jacobian_determinants(flow: torch.Tensor, stencil=Stencil.PPP) -> torch.Tensor:
    """det(I + grad u) per voxel for one one-sided stencil, (B, D, H, W)."""
    if isinstance(stencil, str):
        stencil = Stencil.from_str(stencil)
    columns = [_axis_differences(flow, axis, forward) for axis, forward in enumerate(stencil.directions)]
    jacobian = torch.stack(columns, dim=2).permute(0, 3, 4, 5, 1, 2)
    m = jacobian + torch.eye(3, dtype=flow.dtype, device=flow.device)

    def e(i, j):
        return m[..., i, j]

    # cofactor expansion along the first row
    return (e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1))
            - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
            + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0)))


#
# Operations on grid types
#

def warp(source: Union[Volume, FeatureGrid], field: DisplacementField) -> Union[Volume, FeatureGrid]:
    """Warp a volume or every channel of a feature grid with the same field."""
    if isinstance(source, Volume):
        _require(source.shape == field.shape,
                 f"Field shape {field.shape} does not match volume shape {source.shape}")
        warped = warp_tensor(source.batched(), field.batched())
        return Volume(warped[0, 0], source.spacing)
    if isinstance(source, FeatureGrid):
        _require(source.spatial_shape == field.shape,
                 f"Field shape {field.shape} does not match feature shape {source.spatial_shape}")
        return FeatureGrid(warp_tensor(source.batched(), field.batched())[0])
    raise ContractViolation(f"Cannot warp object of type {type(source).__name__}")


def resample_field(field: DisplacementField, target_shape: Sequence[int]) -> DisplacementField:
    flow = resample_flow(field.batched(), target_shape)
    spacing = tuple(s * n / t for s, n, t in zip(field.spacing, field.shape, flow.shape[2:]))
    return DisplacementField(flow[0], spacing)


def upsample_field(field: DisplacementField, factor: int = 2) -> DisplacementField:
    _require(int(factor) == factor and factor >= 2, f"Upsampling factor must be an integer >= 2, got {factor}")
    return resample_field(field, [n * int(factor) for n in field.shape])


def compose_fields(prev_up: DisplacementField, delta: DisplacementField,
                   mode=CompositionMode.COMPOSE) -> DisplacementField:
    _require(prev_up.shape == delta.shape,
             f"Cannot compose fields of shapes {prev_up.shape} and {delta.shape}")
    return DisplacementField(compose_flows(prev_up.batched(), delta.batched(), mode)[0], delta.spacing)


def spatial_gradient(field: DisplacementField) -> torch.Tensor:
    """(3 [i], 3 [j], D, H, W) grid of du_i/dx_j in voxel units."""
    return flow_gradient(field.batched())[0]


def jacobian_determinants(field: DisplacementField, stencil=Stencil.PPP) -> torch.Tensor:
    return flow_jacobian_determinants(field.batched(), stencil)[0]


def warp_labels(labels: LabelMap, field: DisplacementField) -> LabelMap:
    """Nearest neighbour warp of a label map, clamped to the border."""
    _require(labels.shape == field.shape,
             f"Field shape {field.shape} does not match label shape {labels.shape}")
    vectors = field.vectors.detach().cpu().numpy().astype(np.float64)
    coords = np.indices(labels.shape, dtype=np.float64) + vectors
    warped = ndimage.map_coordinates(labels.values, coords, order=0, mode="nearest")
    return LabelMap(warped.astype(labels.values.dtype))
