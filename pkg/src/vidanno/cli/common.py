"""Options and helpers shared by the pipeline stage commands."""

from __future__ import annotations

import logging
import shutil
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from vidanno.config.settings import RunConfig, apply_overrides, load_run_config, resolve_path
from vidanno.core.dataset import SequenceData, list_sequences, load_sequence
from vidanno.core.errors import StageFailure

logger = logging.getLogger(__name__)

console = Console()

ConfigOption = Annotated[
    Path | None,
    typer.Option("--config", "-c", help="Config file (default: VIDANNO_CONFIG or config dir)"),
]
SetOption = Annotated[
    list[str] | None,
    typer.Option("--set", "-s", help="Override a config value: section.key=value (repeatable)"),
]


@dataclass(frozen=True)
class ArtifactPaths:
    """Resolved artifact locations of one run."""

    data_dir: Path
    checkpoint_dir: Path
    output_dir: Path

    @classmethod
    def from_config(cls, config: RunConfig) -> ArtifactPaths:
        return cls(
            data_dir=resolve_path(config.paths.data_dir),
            checkpoint_dir=resolve_path(config.paths.checkpoint_dir),
            output_dir=resolve_path(config.paths.output_dir),
        )

    @property
    def assess_checkpoint(self) -> Path:
        return self.checkpoint_dir / "assess.pt"

    @property
    def geometry_checkpoint(self) -> Path:
        return self.checkpoint_dir / "geometry.pt"

    @property
    def mask_checkpoint(self) -> Path:
        return self.checkpoint_dir / "mask.pt"

    def curve(self, kind: str) -> Path:
        return self.checkpoint_dir / f"{kind}_curve.txt"

    def sequence_output(self, video_id: str) -> Path:
        return self.output_dir / video_id


def load_config(config_path: Path | None, overrides: list[str] | None) -> RunConfig:
    """Config file plus --set overrides."""
    return apply_overrides(load_run_config(config_path), overrides or [])


def load_sequences(config: RunConfig, paths: ArtifactPaths) -> list[SequenceData]:
    """Every sequence under the data directory, sorted by name."""
    sequences = [
        load_sequence(path, config.data.response_size, config.data.resize_response_maps)
        for path in list_sequences(paths.data_dir)
    ]
    if not sequences:
        raise ValueError(f"No sequences found in {paths.data_dir}")
    return sequences


class StageOutputs:
    """Outputs created by a stage, removed again if the stage fails."""

    def __init__(self) -> None:
        self._created: list[Path] = []

    def track(self, path: Path) -> Path:
        """Register an output path; only paths that do not exist yet are removed on failure."""
        if not path.exists():
            self._created.append(path)
        return path

    def remove(self) -> None:
        for path in reversed(self._created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            else:
                path.unlink(missing_ok=True)
            logger.debug(f"Removed partial output {path}")


@contextmanager
def stage(name: str) -> Iterator[StageOutputs]:
    """Run a stage body; on error print a one-line cause and exit nonzero."""
    outputs = StageOutputs()
    try:
        yield outputs
    except typer.Exit:
        raise
    except Exception as e:
        logger.debug(f"{name} failed", exc_info=True)
        outputs.remove()
        failure = StageFailure.from_exception(name, e)
        console.print(f"[red]Error:[/red] {failure}")
        raise typer.Exit(failure.exit_code) from None
