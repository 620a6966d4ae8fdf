"""
Run files.

Every (mode, seed) run writes ``run.json`` (configs, seed, version) and
``episodes.csv``. Episode rows are flushed as they are produced into
``episodes.csv.partial``; the file is renamed into place only when the run
completes, so a failed run leaves its partial record behind for inspection.
"""

import csv
import io
import json
import logging
import math
import os
import tempfile
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

from apps.learner.types import EpisodeOutcome
from apps.stream.generators import Episode

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = (
    "step",
    "truth_switched",
    "truth_domain",
    "detected_switch",
    "detected_ood",
    "support_loss",
    "query_loss",
    "query_acc",
    "branch_taken",
)
PARTIAL_SUFFIX = ".partial"


def episode_row(outcome: EpisodeOutcome) -> list[Any]:
    return [
        outcome.step_index,
        int(outcome.truth_switched),
        outcome.truth_domain_id,
        int(outcome.detected_switch),
        int(outcome.detected_ood),
        repr(float(outcome.support_loss)),
        repr(float(outcome.query_loss)),
        repr(float(outcome.query_accuracy)),
        str(outcome.branch),
    ]


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, Mapping):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(path: Path, payload: Mapping[str, Any]):
    """NaN becomes null."""
    text = json.dumps(_json_safe(payload), indent=2, sort_keys=True)
    _atomic_write(Path(path), text + "\n")


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({column: _cell(row.get(column, "")) for column in columns})
    _atomic_write(Path(path), buffer.getvalue())


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


class EpisodeWriter:
    """Streams episode rows to ``<path>.partial`` and renames it on ``commit``."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.partial_path = self.path.with_name(self.path.name + PARTIAL_SUFFIX)
        self.rows = 0
        self._handle = None
        self._writer = None

    def __enter__(self) -> "EpisodeWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.partial_path, "w", newline="")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(EPISODE_COLUMNS)
        return self

    def __call__(self, episode: Episode, outcome: EpisodeOutcome):
        self._writer.writerow(episode_row(outcome))
        self._handle.flush()
        self.rows += 1

    def __exit__(self, exc_type, exc, tb):
        self._handle.close()
        if exc_type is None:
            os.replace(self.partial_path, self.path)
        else:
            logger.warning("Run failed after %d episodes; kept %s", self.rows, self.partial_path)
        return False


def run_header(config_doc: Mapping[str, Any], mode: str, seed: int, version: str) -> dict:
    return {"version": version, "mode": mode, "seed": seed, "config": dict(config_doc)}


def read_episodes(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
