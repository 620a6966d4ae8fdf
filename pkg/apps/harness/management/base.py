import argparse

from django.core.management.base import BaseCommand, CommandError

from apps.netcore.exceptions import ConfigurationError, LabError

from ..config import ExperimentConfig, load_config, parse_overrides


class LabCommand(BaseCommand):
    """
    Base for the lab verbs.

    Every verb takes a config path followed by dotted overrides such as
    ``--stream.p_stay 0.75``. Configuration problems exit with status 2 and
    other lab failures with status 1.
    """

    def add_arguments(self, parser):
        parser.add_argument("config", help="Path to the experiment JSON document.")
        parser.add_argument(
            "overrides",
            nargs=argparse.REMAINDER,
            help="Dotted config overrides, e.g. --stream.p_stay 0.75",
        )

    def load(self, path: str, tokens: list[str]) -> ExperimentConfig:
        return load_config(path, parse_overrides(tokens))

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except ConfigurationError as err:
            raise CommandError(f"Invalid configuration:\n{err}", returncode=2) from err
        except LabError as err:
            raise CommandError(f"{type(err).__name__}: {err}", returncode=1) from err

    def run(self, **options):
        raise NotImplementedError


def take_option(tokens: list[str], name: str) -> str | None:
    """Remove ``--name value`` or ``--name=value`` from ``tokens`` and return the value."""
    flag = f"--{name}"
    for position, token in enumerate(tokens):
        if token == flag:
            if position + 1 >= len(tokens):
                raise ConfigurationError(f"Option {flag} needs a value.")
            value = tokens[position + 1]
            del tokens[position : position + 2]
            return value
        if token.startswith(flag + "="):
            del tokens[position]
            return token[len(flag) + 1 :]
    return None
