#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Model checkpoint files.
#

import logging
import os
from dataclasses import dataclass
from typing import Optional

import torch

from msfreg import CheckpointError
from msfreg.model.network import FusionPyramidNet, ModelConfig
from msfreg.model.volgrid import ContractViolation

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: FusionPyramidNet
    iteration: Optional[int] = None
    run_config: Optional[dict] = None
    optimizer_state: Optional[dict] = None


def save_checkpoint(file_name: str, model: FusionPyramidNet, iteration: Optional[int] = None,
                    run_config: Optional[dict] = None, optimizer: Optional[torch.optim.Optimizer] = None):
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "iteration": iteration,
        "run_config": run_config,
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    directory = os.path.dirname(file_name)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # replaced atomically
    partial = file_name + ".partial"
    torch.save(payload, partial)
    os.replace(partial, file_name)
    log.debug("Saved checkpoint %s (iteration %s)", file_name, iteration)


def load_checkpoint(file_name: str, expected_config: Optional[ModelConfig] = None,
                    map_location="cpu") -> Checkpoint:
    if not os.path.isfile(file_name):
        raise CheckpointError(file_name, "file", "Checkpoint does not exist")
    try:
        payload = torch.load(file_name, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(file_name, "file", f"Cannot read checkpoint: {e}")
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise CheckpointError(file_name, "file", "Not a model checkpoint")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(file_name, "format_version",
                              f"Unsupported format version {version}, expected {FORMAT_VERSION}")

    try:
        config = ModelConfig.from_dict(payload["model_config"])
    except (ContractViolation, TypeError) as e:
        raise CheckpointError(file_name, "model_config", str(e))
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError(file_name, "model_config",
                              f"Stored configuration {config.to_dict()} does not match {expected_config.to_dict()}")

    model = FusionPyramidNet(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(file_name, "state_dict", str(e))
    model.eval()
    return Checkpoint(model, payload.get("iteration"), payload.get("run_config"), payload.get("optimizer_state"))
