"""Module entry point for running the CLI via ``python -m dnbands``."""

import sys

from .cli import main


def entry_point() -> None:
    """Run the CLI and exit with its status code."""
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover - manual execution entry
    entry_point()
