#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Unsupervised training of the registration network.
#

"""Train the registration network on a manifest."""

import argparse
import json
import logging
import os
from collections import OrderedDict
from typing import List

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402
from tqdm import tqdm  # noqa: E402

from msfreg import ConfigError, RunConfig, TrainingError  # noqa: E402
from msfreg import data  # noqa: E402
from msfreg.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from msfreg.model.constants import OptimizerName  # noqa: E402
from msfreg.model.losses import total_loss  # noqa: E402
from msfreg.model.network import FusionPyramidNet  # noqa: E402
from msfreg.model.volgrid import Volume  # noqa: E402
from regcommands import prepare_run, resolve_config  # noqa: E402

log = logging.getLogger(__name__)

LOSS_LOG_NAME = "losses.jsonl"
LOSS_PLOT_NAME = "loss_curve.png"
CHECKPOINT_NAME = "checkpoint.pt"
VOLUME_CACHE_SIZE = 64


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--manifest', metavar='file', help='Dataset manifest, overrides data.manifest.')
    parser.add_argument('--iterations', type=int, help='Number of iterations, overrides optimizer.iterations.')
    parser.add_argument('--checkpoint', metavar='file', help='Start from the weights of this checkpoint.')


class VolumeCache:
    """Preprocessed volumes by entry id, least recently used ones dropped first."""

    def __init__(self, config: RunConfig, capacity=VOLUME_CACHE_SIZE):
        self.target_shape = config.data.target_shape
        self.normalization = config.data.normalization
        self.capacity = capacity
        self.volumes = OrderedDict()

    def get(self, entry: data.DatasetEntry) -> Volume:
        if entry.entry_id in self.volumes:
            self.volumes.move_to_end(entry.entry_id)
            return self.volumes[entry.entry_id]
        volume = data.load_entry_volume(entry, self.target_shape, self.normalization)
        self.volumes[entry.entry_id] = volume
        if len(self.volumes) > self.capacity:
            self.volumes.popitem(last=False)
        return volume


def make_optimizer(config: RunConfig, model: torch.nn.Module) -> torch.optim.Optimizer:
    name = OptimizerName.from_str(config.optimizer.name)
    if name == OptimizerName.SGD:
        return torch.optim.SGD(model.parameters(), lr=config.optimizer.learning_rate, momentum=0.9)
    return torch.optim.Adam(model.parameters(), lr=config.optimizer.learning_rate)


def plot_losses(records: List[dict], file_name: str):
    iterations = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in ("total", "ncc_full", "ncc_half", "reg"):
        ax.plot(iterations, [r[key] for r in records], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss term")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(file_name, dpi=100)
    plt.close(fig)


def train(config: RunConfig, index: data.DatasetIndex, directory: str, model: FusionPyramidNet = None) -> List[dict]:
    """Run the configured number of iterations, returning the loss records."""
    model = model or FusionPyramidNet(config.model)
    model.check_shape(config.data.target_shape)
    model.train()
    optimizer = make_optimizer(config, model)
    volumes = VolumeCache(config)
    pairs = iter(data.PairSampler(index, config.data.seed))
    batch_size = config.optimizer.batch_size
    log.info(f"Training {model.parameter_count()} parameters for {config.optimizer.iterations} iterations...")

    records = []
    with open(os.path.join(directory, LOSS_LOG_NAME), "w") as loss_log:
        progress = tqdm(range(1, config.optimizer.iterations + 1), desc="train", unit="it", disable=None)
        for iteration in progress:
            batch = [next(pairs) for _ in range(batch_size)]
            moving = torch.cat([volumes.get(m).batched() for m, _ in batch])
            fixed = torch.cat([volumes.get(f).batched() for _, f in batch])

            output = model(moving, fixed)
            losses = total_loss(fixed, moving, output.phi, output.phi_hat, config.loss)
            if not losses.is_finite():
                raise TrainingError("train", f"iteration {iteration}",
                                    f"Non-finite loss {losses.as_record(iteration)}")
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()

            record = losses.as_record(iteration)
            records.append(record)
            loss_log.write(json.dumps(record) + "\n")
            progress.set_postfix(total=f"{record['total']:.4f}")

            if iteration % config.optimizer.checkpoint_every == 0 and iteration != config.optimizer.iterations:
                save_checkpoint(os.path.join(directory, "checkpoints", f"iter_{iteration:06d}.pt"), model,
                                iteration, config.to_dict(), optimizer)

    save_checkpoint(os.path.join(directory, CHECKPOINT_NAME), model, config.optimizer.iterations,
                    config.to_dict(), optimizer)
    plot_losses(records, os.path.join(directory, LOSS_PLOT_NAME))
    return records


def execute(args: argparse.Namespace):
    config = resolve_config(args, data={"manifest": args.manifest}, optimizer={"iterations": args.iterations})
    if config.data.manifest is None:
        raise ConfigError(args.config or "<defaults>", "data.manifest", "No dataset manifest configured")
    log.info("Loading manifest...")
    index = data.load_index(config.data.manifest)
    directory = prepare_run(args, config)

    model = None
    if args.checkpoint is not None:
        log.info("Loading checkpoint...")
        model = load_checkpoint(args.checkpoint, expected_config=config.model).model

    train(config, index, directory, model)
    log.info("All done.")
