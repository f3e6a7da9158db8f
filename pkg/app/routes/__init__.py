"""
Command groups of the operator CLI.

Each `*_route.py` module owns a `typer.Typer` router; `app.main` merges their commands
into one application. Commands run inside `pipeline_errors`, which turns a
`PipelineError` into its single-line form on stderr and exit code 1.
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Tuple

import click
import typer

from app.helpers.exceptions import PipelineError
from app.logFile import logger


@contextmanager
def pipeline_errors(command: str) -> Iterator[None]:
    try:
        yield
    except PipelineError as e:
        logger.error(f"{command} failed: {e.detail}")
        typer.echo(e.to_line(), err=True)
        raise typer.Exit(code=1)
    except (typer.Exit, click.ClickException):
        raise
    except Exception as e:
        logger.exception(f"{command} failed unexpectedly")
        detail = str(e).replace("\n", " ").replace('"', "'")
        typer.echo(f'error=internal detail="{detail}"', err=True)
        raise typer.Exit(code=1)


def parse_frame_range(text: str) -> Tuple[int, int]:
    """
    Parse "a..b" (inclusive) or a single frame "a".

    Raises:
        typer.BadParameter: On a malformed or decreasing range.
    """
    try:
        if ".." in text:
            first, last = text.split("..", 1)
            start, end = int(first), int(last)
        else:
            start = end = int(text)
    except ValueError:
        raise typer.BadParameter(f"expected a..b, got '{text}'")
    if start < 0 or end < start:
        raise typer.BadParameter(f"invalid frame range '{text}'")
    return start, end


def default_out_dir(manifest: Path, out: Optional[Path]) -> Path:
    """Output directory, defaulting to `run/` next to the manifest."""
    if out is not None:
        return out
    root = manifest if manifest.is_dir() else manifest.parent
    return root / "run"
