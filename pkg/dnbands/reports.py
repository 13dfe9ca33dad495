"""CSV and JSON artifact writers; every file carries the config hash and switch tuple."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)


def header_line(config_hash: str, switches: str) -> str:
    return f"# config_hash={config_hash}; switches={switches}"


def write_csv(
    path: Path | str,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_hash: str = "",
    switches: str = "",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(header_line(config_hash, switches) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    logger.debug("Wrote %s", path)
    return path


def read_csv(path: Path | str) -> tuple[str, list[dict[str, str]]]:
    """Return the header comment and the data rows."""
    with Path(path).open(newline="") as fh:
        header = fh.readline().rstrip("\n")
        return header, list(csv.DictReader(fh))


def write_json(path: Path | str, payload: dict, config_hash: str = "", switches: str | dict = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(payload)
    document["config_hash"] = config_hash
    document["switches"] = switches
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.debug("Wrote %s", path)
    return path
