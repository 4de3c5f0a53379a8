#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Volume ingestion, preprocessing, pair sampling and synthetic cases.
#
# File formats:
#  - volumes and label maps: NIfTI (.nii, .nii.gz), spacing from the header zooms
#  - landmarks: CSV, one "x,y,z" row in mm per point
#  - displacement fields: 4D NIfTI (D, H, W, 3) in voxels, component i along
#    array axis i, plus a JSON sidecar next to it
#  - dataset index: JSON manifest, paths relative to the manifest
#

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
import torch
from scipy import ndimage

from msfreg import DataError
from msfreg.model.constants import Normalization, Split
from msfreg.model.volgrid import (ContractViolation, DisplacementField, LabelMap, LandmarkSet, Volume,
                                  warp, warp_labels)

log = logging.getLogger(__name__)

FIELD_FORMAT = "msfreg-displacement"
FIELD_FORMAT_VERSION = 1
SYNTHETIC_DIVISOR = 16


#
# NIfTI and CSV I/O
#

def _read_nifti(file_name: str):
    if not os.path.isfile(file_name):
        raise DataError(file_name, "read", "File does not exist")
    try:
        return nib.load(file_name)
    except Exception as e:
        raise DataError(file_name, "read", f"Cannot read NIfTI file: {e}")


def _affine(spacing: Sequence[float]) -> np.ndarray:
    return np.diag([*(float(s) for s in spacing), 1.0])


def normalize_intensity(values: torch.Tensor, normalization=Normalization.MINMAX) -> torch.Tensor:
    """Min-max scaling to [0, 1], constant volumes map to zeros."""
    if isinstance(normalization, str):
        normalization = Normalization.from_str(normalization)
    if normalization == Normalization.NONE:
        return values
    low, high = values.min(), values.max()
    if high == low:
        return torch.zeros_like(values)
    return (values - low) / (high - low)


def load_volume(file_name: str, normalization=Normalization.MINMAX) -> Volume:
    image = _read_nifti(file_name)
    try:
        values = np.asarray(image.get_fdata(dtype=np.float32))
    except Exception as e:
        raise DataError(file_name, "read", f"Cannot read voxel data: {e}")
    if values.ndim != 3:
        raise DataError(file_name, "shape", f"Expected a 3D volume, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise DataError(file_name, "values", "Volume contains non-finite values")
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    values = normalize_intensity(torch.from_numpy(values.copy()), normalization)
    return Volume(values, spacing)


def save_volume(volume: Volume, file_name: str):
    values = volume.values.detach().cpu().numpy().astype(np.float32)
    nib.save(nib.Nifti1Image(values, _affine(volume.spacing)), file_name)


def load_label_map(file_name: str) -> LabelMap:
    image = _read_nifti(file_name)
    values = np.asarray(image.dataobj)
    if values.ndim != 3:
        raise DataError(file_name, "shape", f"Expected a 3D label map, got shape {values.shape}")
    try:
        return LabelMap(np.rint(values).astype(np.int32) if values.dtype.kind == "f" else values.astype(np.int32))
    except ContractViolation as e:
        raise DataError(file_name, "values", str(e))


def save_label_map(labels: LabelMap, file_name: str, spacing=(1.0, 1.0, 1.0)):
    nib.save(nib.Nifti1Image(labels.values.astype(np.int32), _affine(spacing)), file_name)


def load_landmarks(file_name: str) -> LandmarkSet:
    if not os.path.isfile(file_name):
        raise DataError(file_name, "read", "File does not exist")
    try:
        points = np.loadtxt(file_name, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise DataError(file_name, "parse", f"Landmarks must be 'x,y,z' rows: {e}")
    if points.size and points.shape[1] != 3:
        raise DataError(file_name, "parse", f"Expected 3 columns, got {points.shape[1]}")
    return LandmarkSet(points.reshape(-1, 3))


def save_landmarks(landmarks: LandmarkSet, file_name: str):
    np.savetxt(file_name, landmarks.points, delimiter=",", fmt="%.17g")


def field_sidecar(file_name: str) -> str:
    for suffix in (".nii.gz", ".nii"):
        if file_name.endswith(suffix):
            return file_name[:-len(suffix)] + ".json"
    return file_name + ".json"


def save_field(displacement: DisplacementField, file_name: str):
    """Write a field as a (D, H, W, 3) float32 NIfTI with a JSON sidecar."""
    vectors = displacement.vectors.detach().cpu().numpy().astype(np.float32)
    nib.save(nib.Nifti1Image(np.moveaxis(vectors, 0, -1), _affine(displacement.spacing)), file_name)
    sidecar = {
        "format": FIELD_FORMAT,
        "version": FIELD_FORMAT_VERSION,
        "units": "voxel",
        "layout": "D,H,W,3",
        "convention": "warped(x) = moving(x + u(x)), component i along array axis i",
        "spacing": list(displacement.spacing),
    }
    with open(field_sidecar(file_name), "w") as fp:
        json.dump(sidecar, fp, indent=2)


def load_field(file_name: str) -> DisplacementField:
    image = _read_nifti(file_name)
    vectors = np.asarray(image.get_fdata(dtype=np.float32))
    if vectors.ndim != 4 or vectors.shape[-1] != 3:
        raise DataError(file_name, "shape", f"Expected a (D, H, W, 3) field, got shape {vectors.shape}")
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    sidecar = field_sidecar(file_name)
    if os.path.isfile(sidecar):
        with open(sidecar, "r") as fp:
            meta = json.load(fp)
        if meta.get("format") != FIELD_FORMAT:
            raise DataError(sidecar, "format", f"Unknown field format {meta.get('format')!r}")
        spacing = tuple(meta.get("spacing", spacing))
    try:
        return DisplacementField(torch.from_numpy(np.ascontiguousarray(np.moveaxis(vectors, -1, 0))), spacing)
    except ContractViolation as e:
        raise DataError(file_name, "values", str(e))


#
# Preprocessing
#

def center_crop_or_pad(values: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Center crop axes that are too long, zero pad axes that are too short."""
    values = np.asarray(values)
    slices = []
    padding = []
    for n, t in zip(values.shape, target_shape):
        if n >= t:
            start = (n - t) // 2
            slices.append(slice(start, start + t))
            padding.append((0, 0))
        else:
            slices.append(slice(0, n))
            before = (t - n) // 2
            padding.append((before, t - n - before))
    return np.pad(values[tuple(slices)], padding, mode="constant")


def preprocess(volume: Volume, target_shape: Sequence[int]) -> Volume:
    """Resample to 1 mm spacing, then center crop or pad to target_shape."""
    target_shape = tuple(int(n) for n in target_shape)
    isotropic = volume.spacing == (1.0, 1.0, 1.0)
    if isotropic and volume.shape == target_shape:
        return volume
    values = volume.values.detach().cpu().numpy()
    if not isotropic:
        values = ndimage.zoom(values.astype(np.float64), volume.spacing, order=1).astype(np.float32)
        log.debug("Resampled %s at spacing %s to %s", volume.shape, volume.spacing, values.shape)
    return Volume(torch.from_numpy(center_crop_or_pad(values, target_shape)), (1.0, 1.0, 1.0))


#
# Dataset index
#

@dataclass
class DatasetEntry:
    entry_id: str
    volume: str
    labels: Optional[str] = None
    landmarks: Optional[str] = None


@dataclass
class PairEntry:
    pair_id: str
    moving: str
    fixed: str
    field: Optional[str] = None


@dataclass
class DatasetIndex:
    entries: List[DatasetEntry]
    split: str = Split.TRAIN.value
    pairs: List[PairEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractViolation("Dataset index contains duplicate entry ids")
        volumes = [e.volume for e in self.entries]
        if len(set(volumes)) != len(volumes):
            raise ContractViolation("Dataset index contains duplicate volume paths")
        known = set(ids)
        for pair in self.pairs:
            if pair.moving not in known or pair.fixed not in known:
                raise ContractViolation(f"Pair {pair.pair_id} references unknown entries")

    def __len__(self):
        return len(self.entries)

    def entry(self, entry_id: str) -> DatasetEntry:
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise KeyError(entry_id)


def _resolve(base: str, path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def load_index(file_name: str, check_paths=True) -> DatasetIndex:
    """Read a JSON manifest, resolving paths relative to its directory."""
    if not os.path.isfile(file_name):
        raise DataError(file_name, "read", "Manifest does not exist")
    try:
        with open(file_name, "r") as fp:
            raw = json.load(fp)
    except json.JSONDecodeError as e:
        raise DataError(file_name, f"line {e.lineno}", f"Malformed JSON: {e.msg}")
    if not isinstance(raw, dict) or not isinstance(raw.get("entries"), list):
        raise DataError(file_name, "entries", "Manifest must be an object with an 'entries' list")

    base = os.path.dirname(os.path.abspath(file_name))
    entries = []
    for position, item in enumerate(raw["entries"]):
        if not isinstance(item, dict) or "volume" not in item:
            raise DataError(file_name, f"entries[{position}]", "Entry needs a 'volume' path")
        entry = DatasetEntry(entry_id=str(item.get("id", position)),
                             volume=_resolve(base, item["volume"]),
                             labels=_resolve(base, item.get("labels")),
                             landmarks=_resolve(base, item.get("landmarks")))
        if check_paths:
            for path in (entry.volume, entry.labels, entry.landmarks):
                if path is not None and not os.path.isfile(path):
                    raise DataError(file_name, f"entries[{position}]", f"Missing file {path}")
        entries.append(entry)

    pairs = []
    for position, item in enumerate(raw.get("pairs", [])):
        try:
            pairs.append(PairEntry(pair_id=str(item.get("id", position)), moving=str(item["moving"]),
                                   fixed=str(item["fixed"]), field=_resolve(base, item.get("field"))))
        except (KeyError, AttributeError):
            raise DataError(file_name, f"pairs[{position}]", "Pair needs 'moving' and 'fixed' entry ids")

    split = raw.get("split", Split.TRAIN.value)
    try:
        Split.from_str(split)
        return DatasetIndex(entries, split, pairs)
    except KeyError:
        raise DataError(file_name, "split", f"Unknown split {split!r}, choose one of {list(Split.values())}")
    except ContractViolation as e:
        raise DataError(file_name, "entries", str(e))


def write_index(index: DatasetIndex, file_name: str):
    base = os.path.dirname(os.path.abspath(file_name))

    def relative(path):
        return None if path is None else os.path.relpath(path, base)

    raw = {"split": index.split, "entries": []}
    for e in index.entries:
        item = {"id": e.entry_id, "volume": relative(e.volume)}
        if e.labels is not None:
            item["labels"] = relative(e.labels)
        if e.landmarks is not None:
            item["landmarks"] = relative(e.landmarks)
        raw["entries"].append(item)
    if index.pairs:
        raw["pairs"] = []
        for p in index.pairs:
            item = {"id": p.pair_id, "moving": p.moving, "fixed": p.fixed}
            if p.field is not None:
                item["field"] = relative(p.field)
            raw["pairs"].append(item)
    with open(file_name, "w") as fp:
        json.dump(raw, fp, indent=2)


def load_entry_volume(entry: DatasetEntry, target_shape: Sequence[int], normalization=Normalization.MINMAX) -> Volume:
    return preprocess(load_volume(entry.volume, normalization), target_shape)


#
# Pair sampling
#

def sample_pair(index: DatasetIndex, rng_seed: int) -> Tuple[DatasetEntry, DatasetEntry]:
    """Uniformly random ordered (moving, fixed) pair of distinct entries."""
    if len(index) < 2:
        raise ContractViolation(f"Pair sampling needs at least 2 entries, index has {len(index)}")
    moving, fixed = np.random.default_rng(rng_seed).choice(len(index), size=2, replace=False)
    return index.entries[int(moving)], index.entries[int(fixed)]


class PairSampler:
    """Endless deterministic stream of (moving, fixed) entries.

    Every epoch is a fresh random disjoint pairing of the entries, or a
    shuffle of the listed pairs when the index has any.
    """

    def __init__(self, index: DatasetIndex, seed: int = 0):
        if not index.pairs and len(index) < 2:
            raise ContractViolation(f"Pair sampling needs at least 2 entries, index has {len(index)}")
        self.index = index
        self.seed = seed

    @property
    def pairs_per_epoch(self) -> int:
        return len(self.index.pairs) if self.index.pairs else len(self.index) // 2

    def epoch(self, number: int) -> List[Tuple[DatasetEntry, DatasetEntry]]:
        rng = np.random.default_rng([self.seed, number])
        if self.index.pairs:
            order = rng.permutation(len(self.index.pairs))
            return [(self.index.entry(self.index.pairs[i].moving), self.index.entry(self.index.pairs[i].fixed))
                    for i in order]
        order = rng.permutation(len(self.index))
        return [(self.index.entries[int(order[k])], self.index.entries[int(order[k + 1])])
                for k in range(0, 2 * self.pairs_per_epoch, 2)]

    def __iter__(self) -> Iterator[Tuple[DatasetEntry, DatasetEntry]]:
        number = 0
        while True:
            yield from self.epoch(number)
            number += 1


#
# Synthetic ground truth
#

@dataclass
class SyntheticCase:
    moving: Volume
    fixed: Volume
    true_field: DisplacementField
    moving_landmarks: LandmarkSet
    fixed_landmarks: LandmarkSet
    moving_labels: LabelMap
    fixed_labels: LabelMap


def smooth_random_field(shape: Sequence[int], max_disp: float, smoothness: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Gaussian smoothed noise rescaled so the largest component magnitude is max_disp."""
    noise = rng.standard_normal((3, *shape))
    smoothed = np.stack([ndimage.gaussian_filter(noise[i], sigma=smoothness, mode="reflect") for i in range(3)])
    peak = np.abs(smoothed).max()
    if max_disp == 0 or peak == 0:
        return np.zeros_like(smoothed)
    return smoothed * (max_disp / peak)


def _blob_volume(shape, centers, widths, amplitudes):
    grid = np.indices(shape, dtype=np.float64)
    blobs = []
    for c, w, a in zip(centers, widths, amplitudes):
        distance = sum((grid[i] - c[i]) ** 2 for i in range(3))
        blobs.append(a * np.exp(-distance / (2 * w ** 2)))
    return np.stack(blobs)


def _invert_at(vectors: np.ndarray, targets: np.ndarray, shape, iterations=50) -> np.ndarray:
    """Points p with p + u(p) = target, by fixed point iteration."""
    upper = np.asarray(shape, dtype=np.float64) - 1
    points = targets.copy()
    for _ in range(iterations):
        u = np.stack([ndimage.map_coordinates(vectors[i], points.T, order=1, mode="nearest") for i in range(3)], axis=1)
        points = np.clip(targets - u, 0, upper)
    return points


def make_synthetic(shape: Sequence[int], max_disp: float, smoothness: float = 8.0, rng_seed=0,
                   num_blobs: int = 6) -> SyntheticCase:
    """Blob phantom pair related by a known smooth field, at 1 mm spacing."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n % SYNTHETIC_DIVISOR != 0 or n < SYNTHETIC_DIVISOR for n in shape):
        raise ContractViolation(f"Synthetic shape {shape} must be 3D and divisible by {SYNTHETIC_DIVISOR}")
    if max_disp < 0:
        raise ContractViolation(f"max_disp must be >= 0, got {max_disp}")
    if smoothness <= 0:
        raise ContractViolation(f"smoothness must be positive, got {smoothness}")
    rng = np.random.default_rng(rng_seed)

    extent = np.asarray(shape, dtype=np.float64)
    centers = rng.uniform(0.25 * extent, 0.75 * extent, size=(num_blobs, 3))
    widths = rng.uniform(1.5, max(2.0, min(shape) / 8), size=num_blobs)
    amplitudes = rng.uniform(0.5, 1.0, size=num_blobs)
    blobs = _blob_volume(shape, centers, widths, amplitudes)

    moving = Volume(normalize_intensity(torch.from_numpy(blobs.sum(axis=0))).float())
    support = blobs > 0.5 * amplitudes[:, None, None, None]
    labels = np.where(support.any(axis=0), blobs.argmax(axis=0) + 1, 0).astype(np.int32)
    moving_labels = LabelMap(labels)

    vectors = smooth_random_field(shape, max_disp, smoothness, rng)
    true_field = DisplacementField(torch.from_numpy(vectors).float())
    fixed = warp(moving, true_field)
    fixed_labels = warp_labels(moving_labels, true_field)

    fixed_points = _invert_at(true_field.vectors.numpy().astype(np.float64), centers, shape)
    return SyntheticCase(moving=moving, fixed=fixed, true_field=true_field,
                         moving_landmarks=LandmarkSet(centers), fixed_landmarks=LandmarkSet(fixed_points),
                         moving_labels=moving_labels, fixed_labels=fixed_labels)
