#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Write a synthetic benchmark: phantom pairs with known fields, landmarks
# and labels, plus manifests for train and evaluate.
#

"""Write synthetic phantom pairs with known fields."""

import argparse
import logging
import os

from msfreg import ConfigError, data
from msfreg.data import DatasetEntry, DatasetIndex, PairEntry
from msfreg.model.constants import Split
from regcommands import prepare_run, resolve_config

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
VALIDATION_MANIFEST_NAME = "validation.json"


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--shape', nargs=3, type=int, default=[32, 48, 32], metavar=('D', 'H', 'W'),
                        help='Volume shape, every component divisible by 16.')
    parser.add_argument('--count', type=int, default=20, help='Number of cases to generate.')
    parser.add_argument('--max-disp', type=float, default=3.0,
                        help='Largest displacement component of the true fields, in voxels.')
    parser.add_argument('--smoothness', type=float, default=8.0,
                        help='Gaussian smoothing of the true fields, in voxels.')
    parser.add_argument('--validation', type=int, default=0,
                        help='Hold the last N cases out into a separate validation manifest.')


def write_case(case: data.SyntheticCase, directory: str, name: str):
    """Write one case, returning its two dataset entries and the pair."""
    def path(suffix):
        return os.path.join(directory, f"{name}_{suffix}")

    data.save_volume(case.moving, path("moving.nii"))
    data.save_volume(case.fixed, path("fixed.nii"))
    data.save_label_map(case.moving_labels, path("moving_labels.nii"))
    data.save_label_map(case.fixed_labels, path("fixed_labels.nii"))
    data.save_landmarks(case.moving_landmarks, path("moving_landmarks.csv"))
    data.save_landmarks(case.fixed_landmarks, path("fixed_landmarks.csv"))
    data.save_field(case.true_field, path("field.nii"))

    moving = DatasetEntry(f"{name}_moving", path("moving.nii"), path("moving_labels.nii"),
                          path("moving_landmarks.csv"))
    fixed = DatasetEntry(f"{name}_fixed", path("fixed.nii"), path("fixed_labels.nii"),
                         path("fixed_landmarks.csv"))
    return [moving, fixed], PairEntry(name, moving.entry_id, fixed.entry_id, path("field.nii"))


def execute(args: argparse.Namespace):
    if args.count < 1:
        raise ConfigError("synth", "--count", f"Must be >= 1, got {args.count}")
    if not 0 <= args.validation < args.count:
        raise ConfigError("synth", "--validation", f"Must be in [0, {args.count - 1}], got {args.validation}")
    config = resolve_config(args)
    directory = prepare_run(args, config, snapshot=False)
    seed = config.data.seed

    log.info(f"Generating {args.count} synthetic cases of shape {tuple(args.shape)}...")
    splits = {Split.TRAIN: ([], []), Split.VALIDATION: ([], [])}
    for number in range(args.count):
        case = data.make_synthetic(args.shape, args.max_disp, args.smoothness, rng_seed=[seed, number])
        entries, pair = write_case(case, directory, f"case_{number:03d}")
        split = Split.VALIDATION if number >= args.count - args.validation else Split.TRAIN
        splits[split][0].extend(entries)
        splits[split][1].append(pair)
        log.debug("Wrote case %d", number)

    for split, file_name in ((Split.TRAIN, MANIFEST_NAME), (Split.VALIDATION, VALIDATION_MANIFEST_NAME)):
        entries, pairs = splits[split]
        if pairs:
            data.write_index(DatasetIndex(entries, split.value, pairs), os.path.join(directory, file_name))
    log.info(f"Synthetic benchmark written to {directory}")
