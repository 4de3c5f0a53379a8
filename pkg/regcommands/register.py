#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Register one moving image to one fixed image with a trained checkpoint.
#

"""Register a moving image to a fixed image."""

import argparse
import logging
import os

from msfreg import ConfigError, data
from msfreg.checkpoint import load_checkpoint
from msfreg.model.network import register
from msfreg.model.volgrid import warp
from regcommands import prepare_run, resolve_config

log = logging.getLogger(__name__)

WARPED_NAME = "warped.nii.gz"
FIELD_NAME = "field.nii.gz"


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--checkpoint', metavar='file', help='Trained model checkpoint.')
    parser.add_argument('--moving', metavar='file', help='Moving image (NIfTI).')
    parser.add_argument('--fixed', metavar='file', help='Fixed image (NIfTI).')


def execute(args: argparse.Namespace):
    for option in ("checkpoint", "moving", "fixed"):
        if getattr(args, option) is None:
            raise ConfigError("register", f"--{option}", "Option is required")
    config = resolve_config(args)
    directory = prepare_run(args, config, snapshot=False)

    log.info("Loading checkpoint...")
    model = load_checkpoint(args.checkpoint).model
    log.info("Loading images...")
    moving = data.preprocess(data.load_volume(args.moving, config.data.normalization), config.data.target_shape)
    fixed = data.preprocess(data.load_volume(args.fixed, config.data.normalization), config.data.target_shape)

    log.info("Registering...")
    output = register(moving, fixed, model)
    phi = output.phi_field(spacing=fixed.spacing)
    data.save_volume(warp(moving, phi), os.path.join(directory, WARPED_NAME))
    data.save_field(phi, os.path.join(directory, FIELD_NAME))
    log.info("All done.")
