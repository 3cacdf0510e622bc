"""Run configuration commands: inspect, create and locate the config file."""

from pathlib import Path
from typing import Annotated, Any

import typer
from rich.console import Console
from rich.table import Table

from vidanno.cli.common import ArtifactPaths, SetOption
from vidanno.config.settings import (
    RunConfig,
    apply_overrides,
    config_keys,
    get_config_path,
    get_config_value,
    get_output_root,
    load_run_config,
    save_run_config,
)
from vidanno.core.errors import ConfigError

app = typer.Typer(help="Inspect and create the run configuration")
console = Console()


def _load(config_path: Path | None) -> RunConfig:
    try:
        return load_run_config(config_path)
    except ConfigError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(2) from None


def _format(value: Any) -> str:
    return "[dim]none[/dim]" if value is None else str(value)


@app.command("show")
def show(
    key: Annotated[
        str | None, typer.Argument(help="Dotted key to print, e.g. 'refine.mask_height'")
    ] = None,
    section: Annotated[
        str | None, typer.Option("--section", help="Only list keys of this section")
    ] = None,
    config_path: Annotated[
        Path | None, typer.Option("--config", "-c", help="Config file to read")
    ] = None,
) -> None:
    """Print the effective run configuration; values changed from defaults are marked."""
    config = _load(config_path)

    if key:
        try:
            console.print(f"[cyan]{key}[/cyan] = {get_config_value(config, key)}")
        except ConfigError as e:
            console.print(f"[red]Error:[/red] {e}")
            raise typer.Exit(1) from None
        return

    keys = config_keys(config)
    if section is not None:
        keys = [k for k in keys if k.split(".")[0] == section]
        if not keys:
            console.print(f"[red]Error:[/red] Unknown section: {section}")
            raise typer.Exit(1)

    path = config_path or get_config_path()
    source = str(path) if path.exists() else "built-in defaults (no config file)"
    defaults = RunConfig.default()

    table = Table(title=f"Run configuration ({source})", title_justify="left")
    table.add_column("Key", style="cyan", no_wrap=True)
    table.add_column("Value", style="green")
    table.add_column("", style="yellow", no_wrap=True)
    for cfg_key in keys:
        value = get_config_value(config, cfg_key)
        changed = value != get_config_value(defaults, cfg_key)
        table.add_row(cfg_key, _format(value), "*" if changed else "")
    console.print(table)


@app.command("init")
def init(
    force: Annotated[
        bool, typer.Option("--force", "-f", help="Replace an existing config file")
    ] = False,
    overrides: SetOption = None,
) -> None:
    """Write a config file with every key at its default, plus any --set values."""
    path = get_config_path()
    if path.exists() and not force:
        console.print(f"[yellow]Not overwriting[/yellow] {path} [dim](pass --force)[/dim]")
        raise typer.Exit(1)

    try:
        config = apply_overrides(RunConfig.default(), overrides or [])
    except ConfigError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(2) from None

    save_run_config(config, path)
    console.print(f"[green]Wrote[/green] {path}")


@app.command("path")
def show_path() -> None:
    """Print where the config file and the run artifacts live."""
    path = get_config_path()
    state = "[green]found[/green]" if path.exists() else "[dim]missing, using defaults[/dim]"
    console.print(f"[cyan]config[/cyan]       {path} ({state})")
    console.print(f"[cyan]output root[/cyan]  {get_output_root().resolve()}")

    try:
        paths = ArtifactPaths.from_config(load_run_config())
    except ConfigError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(2) from None
    console.print(f"[cyan]data[/cyan]         {paths.data_dir}")
    console.print(f"[cyan]checkpoints[/cyan]  {paths.checkpoint_dir}")
    console.print(f"[cyan]outputs[/cyan]      {paths.output_dir}")
