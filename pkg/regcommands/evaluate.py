#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Evaluate registration fields of a pairs manifest, from stored fields or
# by live inference with a checkpoint.
#

"""Evaluate fields of the pairs in a manifest."""

import argparse
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

from msfreg import ConfigError, DataConfig, DataError, data
from msfreg.checkpoint import load_checkpoint
from msfreg.data import DatasetIndex, PairEntry
from msfreg.model import metrics
from msfreg.model.network import register
from msfreg.model.volgrid import DisplacementField, Volume
from regcommands import prepare_run, resolve_config

log = logging.getLogger(__name__)

REPORT_NAME = "metrics.json"


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--manifest', metavar='file', help='Manifest listing the pairs to evaluate.')
    parser.add_argument('--fields', metavar='dir',
                        help='Directory of stored fields, <pair id>.nii[.gz] or <pair id>/field.nii[.gz].')
    parser.add_argument('--checkpoint', metavar='file', help='Compute the fields by inference with this checkpoint.')
    parser.add_argument('--workers', type=int, default=1, help='Pairs evaluated concurrently.')
    parser.add_argument('--epe-margin', type=int, default=0,
                        help='Border voxels ignored by the endpoint error against true fields.')


def find_field(directory: str, pair_id: str) -> str:
    candidates = [os.path.join(directory, f"{pair_id}{suffix}") for suffix in (".nii", ".nii.gz")]
    candidates += [os.path.join(directory, pair_id, f"field{suffix}") for suffix in (".nii", ".nii.gz")]
    for candidate in candidates:
        if os.path.isfile(candidate):
            return candidate
    raise DataError(directory, pair_id, "No stored field for pair")


def load_conforming(path: str, normalization: str, target_shape) -> Volume:
    """Load a volume the network can take as is, annotations share its grid."""
    volume = data.load_volume(path, normalization)
    if data.preprocess(volume, target_shape) is not volume:
        raise DataError(path, "volume", f"Shape {volume.shape} at spacing {volume.spacing} does not conform to "
                                        f"data.target_shape {tuple(target_shape)} at 1 mm, preprocess the pair first")
    return volume


def infer_fields(index: DatasetIndex, checkpoint: str, normalization: str,
                 target_shape) -> Dict[str, DisplacementField]:
    model = load_checkpoint(checkpoint).model
    fields = {}
    for pair in index.pairs:
        moving = load_conforming(index.entry(pair.moving).volume, normalization, target_shape)
        fixed = load_conforming(index.entry(pair.fixed).volume, normalization, target_shape)
        fields[pair.pair_id] = register(moving, fixed, model).phi_field(spacing=fixed.spacing)
        log.debug("Inferred field for pair %s", pair.pair_id)
    return fields


def evaluate_pair(index: DatasetIndex, pair: PairEntry, phi: DisplacementField, epe_margin=0) -> metrics.MetricsReport:
    moving = index.entry(pair.moving)
    fixed = index.entry(pair.fixed)

    def optional(loader, path):
        return None if path is None else loader(path)

    return metrics.evaluate_pair(
        pair.pair_id, phi,
        fixed_labels=optional(data.load_label_map, fixed.labels),
        moving_labels=optional(data.load_label_map, moving.labels),
        fixed_landmarks=optional(data.load_landmarks, fixed.landmarks),
        moving_landmarks=optional(data.load_landmarks, moving.landmarks),
        true_field=optional(data.load_field, pair.field),
        epe_margin=epe_margin)


def evaluate(index: DatasetIndex, fields: Optional[str] = None, checkpoint: Optional[str] = None,
             normalization="minmax", workers=1, epe_margin=0,
             target_shape=None) -> List[metrics.MetricsReport]:
    """Reports in manifest order."""
    if checkpoint is not None:
        live = infer_fields(index, checkpoint, normalization, target_shape or DataConfig().target_shape)

        def field_of(pair):
            return live[pair.pair_id]
    else:
        def field_of(pair):
            return data.load_field(find_field(fields, pair.pair_id))

    def run(pair):
        return evaluate_pair(index, pair, field_of(pair), epe_margin)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = {r.pair_id: r for r in pool.map(run, index.pairs)}
    else:
        reports = {r.pair_id: r for r in map(run, index.pairs)}
    return [reports[pair.pair_id] for pair in index.pairs]


def execute(args: argparse.Namespace):
    if args.manifest is None:
        raise ConfigError("evaluate", "--manifest", "Option is required")
    if (args.fields is None) == (args.checkpoint is None):
        raise ConfigError("evaluate", "--fields/--checkpoint", "Give exactly one source of fields")
    if args.workers < 1:
        raise ConfigError("evaluate", "--workers", f"Must be >= 1, got {args.workers}")
    config = resolve_config(args)

    log.info("Loading manifest...")
    index = data.load_index(args.manifest)
    if not index.pairs:
        raise DataError(args.manifest, "pairs", "Manifest lists no pairs to evaluate")
    directory = prepare_run(args, config, snapshot=False)

    log.info(f"Evaluating {len(index.pairs)} pairs...")
    reports = evaluate(index, args.fields, args.checkpoint, config.data.normalization,
                       args.workers, args.epe_margin, config.data.target_shape)
    summary = metrics.aggregate(reports)
    with open(os.path.join(directory, REPORT_NAME), "w") as fp:
        json.dump({"pairs": [r.to_dict() for r in reports], "aggregate": summary}, fp, indent=2, ensure_ascii=False)
    for name, values in summary["metrics"].items():
        log.info(f"{name}: {values['summary']}")
    log.info("All done.")
