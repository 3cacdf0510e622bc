"""CLI entry point for Video Box Annotator."""

import logging

import typer
from rich.console import Console
from rich.logging import RichHandler

from vidanno import __version__
from vidanno.cli.commands import annotate, config, data, train

app = typer.Typer(
    name="vidanno",
    help="Video Box Annotator - bounding boxes for every frame from sparse manual labels",
    add_completion=False,
)

console = Console()

# Pipeline stages, in run order
app.command("synth")(data.synth)
app.command("split")(data.split)
app.command("train-assess")(train.train_assess_cmd)
app.command("train-mask")(train.train_mask_cmd)
app.command("train-refine")(train.train_refine_cmd)
app.command("annotate")(annotate.annotate)
app.command("eval")(annotate.evaluate)
app.command("report")(annotate.report)

app.add_typer(config.app, name="config")


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        console.print(f"Video Box Annotator v{__version__}")
        raise typer.Exit()


def setup_logging(verbose: bool) -> None:
    """Route library logging through rich."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.callback()
def main(
    version: bool = typer.Option(
        None,
        "--version",
        "-v",
        help="Show version and exit.",
        callback=version_callback,
        is_eager=True,
    ),
    verbose: bool = typer.Option(False, "--verbose", help="Debug logging."),
) -> None:
    """Video Box Annotator - semi-automatic bounding-box annotation of videos."""
    setup_logging(verbose)


if __name__ == "__main__":
    app()
