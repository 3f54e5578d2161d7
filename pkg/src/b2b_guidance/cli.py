"""The ``b2b`` command line."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional

import typer

from b2b_guidance.config import RunConfig, load_run_config
from b2b_guidance.errors import B2BError
from b2b_guidance.guidance import GRADCHECK_TOLERANCE, gradient_check
from b2b_guidance.layout import LayoutSpec, parse_layout
from b2b_guidance.logging_config import get_logger
from b2b_guidance.metrics import write_heatmaps, write_metrics_json, write_trace_csv
from b2b_guidance.scenarios import ABLATION_COLUMNS, execute_run, run_ablation

logger = get_logger()

app = typer.Typer(
    name="b2b",
    help="Reward-guided layout and attribute-binding steering on a toy denoiser.",
    add_completion=False,
    no_args_is_help=True,
)

TRACE_FILE = "trace.csv"
METRICS_FILE = "metrics.json"
ABLATION_FILE = "ablation.csv"

LayoutOption = typer.Option(..., "--layout", exists=True, dir_okay=False, readable=True, help="Layout JSON file.")
ConfigOption = typer.Option(..., "--config", exists=True, dir_okay=False, readable=True, help="Run configuration JSON file.")
OutOption = typer.Option(..., "--out", file_okay=False, help="Output directory.")


class _Outputs:
    """Files written by one command; removed again if the command fails.

    Paths are recorded before they are opened, so a write that fails half-way
    is cleaned up too.
    """

    def __init__(self, directory: Path):
        self.directory = directory
        self.created_directory = not directory.exists()
        self.written: List[Path] = []

    def record(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def discard(self) -> None:
        for path in self.written:
            # only files this command may have produced; never a directory in the way
            if path.is_file() or path.is_symlink():
                path.unlink()
        if self.created_directory and self.directory.is_dir() and not any(self.directory.iterdir()):
            self.directory.rmdir()


def _load_inputs(layout_path: Path, config_path: Path) -> tuple[LayoutSpec, RunConfig]:
    # bytes, so parse_layout reports bad UTF-8 as a parse error
    layout = parse_layout(layout_path.read_bytes())
    return layout, load_run_config(config_path)


def _fail(command: str, error: Exception, outputs: Optional[_Outputs] = None) -> None:
    if outputs is not None:
        outputs.discard()
    logger.error("Command failed", command=command, error=str(error), error_type=type(error).__name__)
    typer.echo(f"error: {error}", err=True)
    raise typer.Exit(code=1)


@app.command()
def run(
    layout: Path = LayoutOption,
    config: Path = ConfigOption,
    out: Path = OutOption,
    unguided: bool = typer.Option(False, "--unguided", help="Sample without guidance."),
    no_backtrack: bool = typer.Option(False, "--no-backtrack", help="Take the plain gradient step."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the configured seed."),
):
    """Sample once and write heatmaps, the guidance trace and metrics."""
    outputs = _Outputs(out)
    try:
        layout_spec, run_config = _load_inputs(layout, config)
        run_config = run_config.with_overrides(seed=seed, backtrack=False if no_backtrack else None)
        outcome = execute_run(layout_spec, run_config, scenario=layout.stem, guided=not unguided)

        out.mkdir(parents=True, exist_ok=True)
        write_heatmaps(out, outcome.result.attention, layout_spec, on_write=outputs.record)
        trace_path = out / TRACE_FILE
        if not unguided:
            write_trace_csv(outputs.record(trace_path), outcome.result.trace)
        write_metrics_json(outputs.record(out / METRICS_FILE), outcome.metrics)
        if unguided:
            # a trace left by an earlier guided run would not describe these outputs
            trace_path.unlink(missing_ok=True)
    except (B2BError, OSError) as e:
        _fail("run", e, outputs)

    metrics = outcome.metrics
    logger.info("Run written", out=str(out), guided=metrics.guided, files=len(outputs.written))
    for o in metrics.objects:
        typer.echo(f"{o.token}: in-box mass {o.inbox_mass_fraction:.4f}, centroid offset {o.centroid_offset:.3f}")
    for a in metrics.attributes:
        typer.echo(f"{a.token}: KL to parent {a.kl:.4g}")


@app.command()
def ablate(
    layout: Path = LayoutOption,
    config: Path = ConfigOption,
    out: Path = OutOption,
    seeds: int = typer.Option(5, "--seeds", min=1, help="Number of seeds averaged per variant."),
    no_backtrack: bool = typer.Option(False, "--no-backtrack", help="Take the plain gradient step."),
):
    """Switch reward terms on and off and write one averaged row per variant."""
    outputs = _Outputs(out)
    try:
        layout_spec, run_config = _load_inputs(layout, config)
        run_config = run_config.with_overrides(backtrack=False if no_backtrack else None)
        rows = run_ablation(layout_spec, run_config, n_seeds=seeds, scenario=layout.stem)

        out.mkdir(parents=True, exist_ok=True)
        path = outputs.record(out / ABLATION_FILE)
        with path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row.to_row())
    except (B2BError, OSError) as e:
        _fail("ablate", e, outputs)

    for row in rows:
        typer.echo(f"{row.variant.table:<10} {row.variant.name:<22} in-box {row.inbox_mass_fraction:.4f}")


@app.command()
def gradcheck(
    seeds: int = typer.Option(20, "--seeds", min=1, help="Number of random instances to check."),
):
    """Compare the analytic reward gradient with central finite differences."""
    worst = 0.0
    failures = []
    for seed in range(seeds):
        result = gradient_check(seed)
        worst = max(worst, result.max_relative_error)
        if not result.passed:
            failures.append(result)

    typer.echo(f"max relative error: {worst:.3e} over {seeds} seed(s)")
    if failures:
        for result in failures:
            typer.echo(
                f"seed {result.seed} failed: relative error {result.max_relative_error:.3e} "
                f"at coordinate {list(result.worst_coordinate)} (tolerance {GRADCHECK_TOLERANCE:g})",
                err=True,
            )
        raise typer.Exit(code=1)


@app.command()
def serve():
    """Serve the guidance tools over stdio."""
    from b2b_guidance.server import mcp

    logger.info("Starting B2B tool server", transport="stdio")
    mcp.run(transport="stdio")
