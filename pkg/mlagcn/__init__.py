#!/usr/bin/env python3
import argparse
import sys

import singer

from mlagcn.commands import COMMANDS
from mlagcn.exceptions import AgcnError, UsageError

LOGGER = singer.get_logger()

EXIT_OK = 0
EXIT_RUNTIME_FAILURE = 2


class ArgumentParser(argparse.ArgumentParser):
    """Reports bad command lines as UsageError instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = ArgumentParser(prog="mlagcn",
                            description="Adaptive graph convolutional networks for multi-label classification")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for name, command in COMMANDS.items():
        command().add_arguments(subparsers.add_parser(name, help=command.help))
    return parser


def do_command(args):
    LOGGER.info("Starting %s", args.command)
    exit_code = COMMANDS[args.command]().run(args)
    LOGGER.info("Finished %s", args.command)
    return exit_code


def cli(argv=None):
    """Run one subcommand; 0 on success, 1 on invalid input, 2 on a failed run."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required: {}".format(", ".join(COMMANDS)))
        return do_command(args) or EXIT_OK
    except SystemExit as exc:
        # --help
        return exc.code or EXIT_OK
    except AgcnError as exc:
        LOGGER.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception as exc:  # pylint: disable=broad-except
        LOGGER.critical("Unexpected failure: %s", exc, exc_info=True)
        return EXIT_RUNTIME_FAILURE


@singer.utils.handle_top_exception(LOGGER)
def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == '__main__':
    main()
