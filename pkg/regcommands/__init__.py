#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Command implementations for regctl. Every command module provides
#   def add_arguments(parser: argparse.ArgumentParser)
#   def execute(args: argparse.Namespace)
#

import argparse
import logging
import os

import msfreg
from msfreg import RunConfig

log = logging.getLogger(__name__)

SNAPSHOT_NAME = "config.yaml"


def resolve_config(args: argparse.Namespace, **sections) -> RunConfig:
    """Load --config and apply command line overrides.

    sections maps config sections to {key: value} overrides, None values are ignored.
    """
    overrides = {}
    for section, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            overrides[section] = values
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("data", {})["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides.setdefault("output", {})["directory"] = args.out
    return msfreg.load_run_config(getattr(args, "config", None), overrides)


def prepare_run(args: argparse.Namespace, config: RunConfig, snapshot=True) -> str:
    """Seed, optionally switch to deterministic kernels and create the output directory."""
    msfreg.seed_everything(config.data.seed)
    if getattr(args, "deterministic", False):
        msfreg.use_deterministic(True)
    directory = config.output.directory
    os.makedirs(directory, exist_ok=True)
    if snapshot:
        msfreg.save_run_config(config, os.path.join(directory, SNAPSHOT_NAME))
    log.debug("Output directory %s", directory)
    return directory
