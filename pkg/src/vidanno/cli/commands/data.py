"""Data commands: synthetic sequences and snippet splitting."""

from typing import Annotated

import typer
from rich.table import Table

from vidanno.cli.common import (
    ArtifactPaths,
    ConfigOption,
    SetOption,
    console,
    load_config,
    load_sequences,
    stage,
)
from vidanno.core.annotation_store import Direction
from vidanno.core.dataset import save_sequence
from vidanno.core.snippets import snippet_windows, write_window_index
from vidanno.core.synth import generate_benchmark

WINDOW_INDEX_FILE = "windows.txt"


def synth(
    count: Annotated[int, typer.Option("--count", "-n", min=1, help="Number of sequences")] = 1,
    frames: Annotated[
        bool, typer.Option("--frames/--no-frames", help="Write rendered frame images")
    ] = True,
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Generate synthetic sequences (ground truth, tracker dumps, frames) into the data dir."""
    with stage("synth") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        sequences = generate_benchmark(config.synth, count, config.workers)
        for sequence in sequences:
            target = outputs.track(paths.data_dir / sequence.video_id)
            save_sequence(sequence, target, write_frames=frames)

        drifted = sum(len(s.drift.get(d, [])) for s in sequences for d in Direction)
        snippets = sum(len(s.snippets()) for s in sequences)
        console.print(
            f"[green]Wrote {len(sequences)} sequences[/green] to {paths.data_dir} "
            f"[dim]({drifted} of {2 * snippets} tracking runs drifted)[/dim]"
        )


def split(
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Split every sequence into snippets and windows; write each window index."""
    with stage("split") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)

        table = Table(title="Snippets and windows")
        table.add_column("Sequence", style="cyan")
        table.add_column("Frames", justify="right")
        table.add_column("Anchors", justify="right")
        table.add_column("Snippets", justify="right")
        table.add_column("Windows", justify="right")

        for sequence in load_sequences(config, paths):
            snippets = sequence.snippets()
            windows = snippet_windows(snippets, config.window.length, config.window.stride)
            out_dir = outputs.track(paths.sequence_output(sequence.video_id))
            write_window_index(windows, out_dir / WINDOW_INDEX_FILE)
            table.add_row(
                sequence.video_id,
                str(sequence.meta.frame_count),
                str(len(sequence.anchors())),
                str(len(snippets)),
                str(len(windows)),
            )
        console.print(table)
