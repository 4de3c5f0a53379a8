#!/usr/bin/env python3

#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Registration quality metrics: label overlap (Dice), landmark error (TRE),
# 95th percentile surface distance (HD95) and folding (NDV).
#
# All metrics are evaluated in 64-bit numpy. Distances are in mm unless
# the name says otherwise.
#

import logging
import math
from dataclasses import dataclass, asdict
from typing import Dict, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from msfreg import MetricError
from .constants import Stencil
from .volgrid import (ContractViolation, DisplacementField, LabelMap, LandmarkSet,
                      flow_jacobian_determinants, warp_labels)

log = logging.getLogger(__name__)

HD_PERCENTILE = 95
SUMMARY_METRICS = ("dice_mean", "tre_mm", "tre_identity_mm", "hd95_mm", "ndv_percent", "epe_voxels")


class DiceScore(NamedTuple):
    per_class: Dict[int, float]
    mean: float


@dataclass
class MetricsReport:
    """Metrics of one registered pair. Metrics without annotations stay None."""
    pair_id: str
    dice_mean: Optional[float] = None
    dice_per_class: Optional[Dict[int, float]] = None
    tre_mm: Optional[float] = None
    tre_identity_mm: Optional[float] = None
    hd95_mm: Optional[float] = None
    ndv_percent: Optional[float] = None
    epe_voxels: Optional[float] = None

    def __post_init__(self):
        for name in SUMMARY_METRICS:
            value = getattr(self, name)
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise MetricError(name, self.pair_id, f"Value {value} is not a finite non-negative number")
        if self.dice_mean is not None and self.dice_mean > 1:
            raise MetricError("dice_mean", self.pair_id, f"Value {self.dice_mean} exceeds 1")

    def to_dict(self) -> dict:
        values = asdict(self)
        if self.dice_per_class is not None:
            values["dice_per_class"] = {str(c): v for c, v in sorted(self.dice_per_class.items())}
        return values

    @classmethod
    def from_dict(cls, values: dict) -> "MetricsReport":
        values = dict(values)
        if values.get("dice_per_class") is not None:
            values["dice_per_class"] = {int(c): v for c, v in values["dice_per_class"].items()}
        return cls(**values)


def _label_values(labels):
    if isinstance(labels, LabelMap):
        return labels.values
    return np.asarray(labels)


def dice(a: LabelMap, b: LabelMap, classes: Optional[Iterable[int]] = None) -> DiceScore:
    a, b = _label_values(a), _label_values(b)
    if a.shape != b.shape:
        raise ContractViolation(f"Cannot compare label maps of shapes {a.shape} and {b.shape}")
    if classes is None:
        classes = np.union1d(np.unique(a), np.unique(b))
    per_class = {}
    for c in (int(c) for c in classes):
        if c == 0:
            continue
        mask_a = a == c
        mask_b = b == c
        total = int(mask_a.sum()) + int(mask_b.sum())
        # absent from both maps
        if total == 0:
            continue
        per_class[c] = 2.0 * int(np.logical_and(mask_a, mask_b).sum()) / total
    if not per_class:
        raise MetricError("dice", "labels", "No foreground class present in either label map")
    return DiceScore(per_class, float(np.mean(list(per_class.values()))))


def _interpolate_field(field: DisplacementField, voxels: np.ndarray) -> np.ndarray:
    vectors = field.vectors.detach().cpu().numpy().astype(np.float64)
    return np.stack([ndimage.map_coordinates(vectors[i], voxels.T, order=1, mode="nearest")
                     for i in range(3)], axis=1)


def tre(fixed_pts: LandmarkSet, moving_pts: LandmarkSet, phi: DisplacementField,
        spacing: Optional[Sequence[float]] = None) -> float:
    """Mean distance in mm between moving landmarks and fixed landmarks mapped by phi."""
    if len(fixed_pts) != len(moving_pts):
        raise ContractViolation(f"Landmark counts differ: {len(fixed_pts)} fixed, {len(moving_pts)} moving")
    if len(fixed_pts) == 0:
        raise MetricError("tre", "landmarks", "Landmark sets are empty")
    spacing = np.asarray(spacing if spacing is not None else phi.spacing, dtype=np.float64)
    inside = fixed_pts.inside(phi.shape, spacing)
    if not inside.all():
        first = int(np.flatnonzero(~inside)[0])
        raise MetricError("tre", f"landmark {first}",
                          f"Fixed landmark {fixed_pts.points[first].tolist()} lies outside the field grid")
    displacement_mm = _interpolate_field(phi, fixed_pts.to_voxels(spacing)) * spacing
    mapped = fixed_pts.points + displacement_mm
    return float(np.mean(np.linalg.norm(moving_pts.points - mapped, axis=1)))


def tre_identity(fixed_pts: LandmarkSet, moving_pts: LandmarkSet) -> float:
    if len(fixed_pts) != len(moving_pts):
        raise ContractViolation(f"Landmark counts differ: {len(fixed_pts)} fixed, {len(moving_pts)} moving")
    return float(np.mean(np.linalg.norm(moving_pts.points - fixed_pts.points, axis=1)))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbour, outside counts as background."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled distances from each boundary voxel of a to b's boundary and back."""
    spacing = np.asarray(spacing, dtype=np.float64)
    points_a = np.argwhere(boundary(a)) * spacing
    points_b = np.argwhere(boundary(b)) * spacing
    a_to_b, _ = cKDTree(points_b).query(points_a)
    b_to_a, _ = cKDTree(points_a).query(points_b)
    return np.concatenate([a_to_b, b_to_a])


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"Cannot compare masks of shapes {a.shape} and {b.shape}")
    if not a.any() or not b.any():
        raise MetricError("hd95", "mask", "Surface distance of an empty mask is undefined")
    return float(np.percentile(surface_distances(a, b, spacing), HD_PERCENTILE))


def hd95_labels(a: LabelMap, b: LabelMap, spacing=(1.0, 1.0, 1.0),
                classes: Optional[Iterable[int]] = None) -> float:
    """Mean hd95 over the foreground classes present in both label maps."""
    a, b = _label_values(a), _label_values(b)
    if classes is None:
        classes = np.intersect1d(np.unique(a), np.unique(b))
    distances = []
    for c in (int(c) for c in classes):
        if c == 0 or not (a == c).any() or not (b == c).any():
            continue
        distances.append(hd95(a == c, b == c, spacing))
    if not distances:
        raise MetricError("hd95", "labels", "No foreground class present in both label maps")
    return float(np.mean(distances))


def ndv(phi: DisplacementField) -> float:
    """Percentage of non-diffeomorphic volume averaged over the eight one-sided stencils."""
    flow = phi.batched().detach().to(torch.float64)
    negative = torch.zeros(phi.shape, dtype=torch.float64)
    for stencil in Stencil:
        negative = negative + torch.clamp(-flow_jacobian_determinants(flow, stencil)[0].cpu(), min=0)
    per_voxel = (negative / len(Stencil)).flatten().tolist()
    return 100.0 * math.fsum(per_voxel) / len(per_voxel)


def endpoint_error(phi: DisplacementField, true_field: DisplacementField, margin=0) -> float:
    """Mean voxel distance between two fields, optionally ignoring a border margin."""
    if phi.shape != true_field.shape:
        raise ContractViolation(f"Cannot compare fields of shapes {phi.shape} and {true_field.shape}")
    difference = (phi.vectors.detach().to(torch.float64) - true_field.vectors.detach().to(torch.float64))
    if margin > 0:
        if any(n <= 2 * margin for n in phi.shape):
            raise ContractViolation(f"Margin {margin} leaves no interior in shape {phi.shape}")
        difference = difference[:, margin:-margin, margin:-margin, margin:-margin]
    return float(torch.linalg.vector_norm(difference, dim=0).mean())


def evaluate_pair(pair_id: str, phi: DisplacementField,
                  fixed_labels: Optional[LabelMap] = None, moving_labels: Optional[LabelMap] = None,
                  fixed_landmarks: Optional[LandmarkSet] = None, moving_landmarks: Optional[LandmarkSet] = None,
                  true_field: Optional[DisplacementField] = None, epe_margin=0) -> MetricsReport:
    """Evaluate one field against whatever annotations are available."""
    report = {"pair_id": pair_id, "ndv_percent": ndv(phi)}
    if fixed_labels is not None and moving_labels is not None:
        warped = warp_labels(moving_labels, phi)
        score = dice(fixed_labels, warped)
        report["dice_mean"] = score.mean
        report["dice_per_class"] = score.per_class
        try:
            report["hd95_mm"] = hd95_labels(fixed_labels, warped, phi.spacing)
        except MetricError as e:
            # undefined without a shared class, reported as absent
            log.warning("Pair %s: %s", pair_id, e)
    else:
        log.debug("Pair %s has no label maps, skipping Dice and HD95", pair_id)
    if fixed_landmarks is not None and moving_landmarks is not None:
        report["tre_mm"] = tre(fixed_landmarks, moving_landmarks, phi)
        report["tre_identity_mm"] = tre_identity(fixed_landmarks, moving_landmarks)
    else:
        log.debug("Pair %s has no landmarks, skipping TRE", pair_id)
    if true_field is not None:
        report["epe_voxels"] = endpoint_error(phi, true_field, epe_margin)
    return MetricsReport(**report)


def format_summary(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and population standard deviation of every metric present in any report."""
    summary = {"pairs": len(reports), "metrics": {}}
    for name in SUMMARY_METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            continue
        values = np.asarray(values, dtype=np.float64)
        mean = float(values.mean())
        std = float(values.std())
        summary["metrics"][name] = {"mean": mean, "std": std, "count": len(values),
                                    "summary": format_summary(mean, std)}
    return summary
