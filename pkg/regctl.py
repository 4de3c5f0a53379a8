#!/usr/bin/env python3

#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Train, apply and evaluate the multi-scale fusion registration network
#

import argparse
from enum import Enum
import logging
import sys

import msfreg
from msfreg.model.volgrid import ContractViolation

from regcommands import evaluate, register, synth, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

log = logging.getLogger("regctl")


class Command(Enum):
    """
    You can add new commands here. Put the code in regcommands and add it here.
    Mandatory functions are
    def add_arguments(parser: argparse.ArgumentParser)
    def execute(args: argparse.Namespace)
    """
    train = train
    register = register
    evaluate = evaluate
    synth = synth

    def __str__(self):
        return self.name

    @staticmethod
    def from_string(s):
        try:
            return Command[s]
        except KeyError:
            raise ValueError()


class UsageParser(argparse.ArgumentParser):
    """Argument parser exiting with the usage error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='file', help='Run configuration (YAML), defaults fill missing keys.')
    common.add_argument('--seed', type=int, help='Random seed, overrides data.seed.')
    common.add_argument('--out', metavar='dir', help='Output directory, overrides output.directory.')
    common.add_argument('--deterministic', action='store_true',
                        help='Use deterministic kernels of the training backend.')
    common.add_argument('-v', '--verbose', action='store_true', help='Log debug messages.')

    parser = UsageParser(description="Multi-scale fusion registration: train, register, evaluate, synth.")
    commands = parser.add_subparsers(dest='command', metavar='command', required=True)
    for entry in Command:
        doc = (entry.value.__doc__ or "").strip()
        sub = commands.add_parser(entry.name, parents=[common], help=doc or None)
        entry.value.add_arguments(sub)
    return parser


def main(arguments) -> int:
    args = build_parser().parse_args(arguments)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", force=True)
    command = Command.from_string(args.command)

    try:
        command.value.execute(args)
    except (msfreg.MsfRegError, ContractViolation) as e:
        log.error(f"Error: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
