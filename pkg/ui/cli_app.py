"""
cli_app.py
----------
Terminal interface for the blind MIMO channel estimation toolkit.
Uses the 'rich' library for tables, progress bars and colored errors.

Usage:
    python ui/cli_app.py sweep --preset mse_vs_snr --out results.csv
    python ui/cli_app.py sweep --config data/default.cfg --seed 7 --estimators blind-vi,aided-ls
    python ui/cli_app.py constellation --preset constellation_qpsk --out scatter.csv
    python ui/cli_app.py gradcheck
    python ui/cli_app.py selftest

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""

import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import argparse
import logging

from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.text import Text
from rich import box

from core.config import ExperimentConfig, load_config, preset_names
from core.errors import BlindMimoError, ConfigError
from core.harness import dump_constellation, gradcheck, sweep
from core.log import setup_logging
from core.report import SweepReport
from core.selftest import run_selftest

console = Console()
logger = logging.getLogger("core.cli")

GRADCHECK_TOLERANCE = 1e-4


# ── Header ───────────────────────────────────

def print_header(command: str):
    console.print(Panel.fit(
        "[bold cyan]BLIND MIMO CHANNEL ESTIMATION[/bold cyan]\n"
        f"[dim]Variational estimator vs pilot-aided baselines  |  {command}[/dim]",
        border_style="cyan",
        padding=(0, 2)
    ))


# ── Configuration ────────────────────────────

def build_config(args) -> ExperimentConfig:
    """Preset, then config file, then command-line flags."""
    config = ExperimentConfig.from_preset(args.preset) if args.preset else ExperimentConfig()
    if args.config:
        config = load_config(args.config, base=config)

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.estimators:
        overrides["estimators"] = [e for e in args.estimators.split(",") if e.strip()]
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    return config.with_overrides(**overrides) if overrides else config


# ── Sweep ────────────────────────────────────

def display_rows(rows: list):
    table = Table(
        box=box.ROUNDED,
        show_header=True,
        header_style="bold cyan",
        title="[bold]Sweep Results[/bold]",
        title_style="bold white"
    )
    table.add_column("Estimator",   style="bold white", width=13)
    table.add_column("SNR (dB)",    justify="right")
    table.add_column("MSE raw",     justify="right", style="dim")
    table.add_column("MSE aligned", justify="right", style="cyan")
    table.add_column("SER",         justify="right", style="yellow")
    table.add_column("Blocks",      justify="right", style="dim")

    for r in rows:
        table.add_row(
            r.estimator,
            f"{r.snr_db:g}",
            f"{r.mse_raw:.4g}",
            f"{r.mse_aligned:.4g}",
            f"{r.ser:.4g}",
            str(r.blocks),
        )
    console.print(table)


def cmd_sweep(args) -> int:
    config = build_config(args)
    total = config.blocks_per_point * len(config.snr_grid_db)

    with Progress(
        TextColumn("[cyan]simulating blocks"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task("sweep", total=total)
        rows = sweep(config, args.out, on_block=lambda: progress.advance(task))

    display_rows(rows)
    console.print()
    console.print(Panel(
        SweepReport(rows, config).get_full_report(),
        border_style="green",
        title="[bold green]Summary[/bold green]",
        padding=(1, 2)
    ))
    if args.out:
        console.print(f"  [green]✓[/green]  results written to [bold]{args.out}[/bold]")
    return 0


# ── Constellation ────────────────────────────

def cmd_constellation(args) -> int:
    config = build_config(args)
    snr_db = args.snr if args.snr is not None else config.snr_grid_db[0]

    with console.status("[cyan]training blind estimator...[/cyan]"):
        dump = dump_constellation(config, snr_db, args.out)

    console.print(
        f"  {config.constellation.upper()} at {snr_db:g} dB, "
        f"{dump.post.shape[1]} slots x {dump.post.shape[0]} users"
    )
    console.print(f"  Nearest-point purity before equalization: [yellow]{dump.pre_purity():.1%}[/yellow]")
    console.print(f"  Nearest-point purity after  equalization: [cyan]{dump.post_purity():.1%}[/cyan]")
    if args.out:
        console.print(f"  [green]✓[/green]  points written to [bold]{args.out}[/bold]")
    return 0


# ── Gradient check ───────────────────────────

def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    errors = gradcheck(instances=args.instances, seed=seed)
    worst = max(errors)
    failed = sum(e >= GRADCHECK_TOLERANCE for e in errors)

    style = "bold green" if failed == 0 else "bold red"
    console.print(
        f"  {len(errors)} instances (N=2, K=2), worst relative error "
        f"[cyan]{worst:.2e}[/cyan]  ->  "
        f"[{style}]{'PASS' if failed == 0 else f'FAIL ({failed})'}[/{style}]"
    )
    return 0 if failed == 0 else 2


# ── Self test ────────────────────────────────

def cmd_selftest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_selftest(seed)

    table = Table(box=box.SIMPLE, show_header=True, header_style="bold cyan")
    table.add_column("Check",  style="bold white")
    table.add_column("Result", width=8)
    table.add_column("Detail", style="dim")
    for r in results:
        table.add_row(
            r.name,
            Text("✓ PASS", style="green") if r.passed else Text("✗ FAIL", style="red"),
            r.detail,
        )
    console.print(table)
    return 0 if all(r.passed for r in results) else 2


# ── Argument parsing ─────────────────────────

def build_parser() -> argparse.ArgumentParser:
    presets = ", ".join(sorted(preset_names()))
    parser = argparse.ArgumentParser(
        prog="cli_app.py",
        description="Blind MIMO channel estimation experiments.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--preset", help=f"named preset ({presets})")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="root random seed")
        p.add_argument("--estimators", help="comma list: blind-vi,aided-ls,aided-mmse,perfect-csi")
        p.add_argument("--out", help="output CSV path")

    p_sweep = sub.add_parser("sweep", help="run the SNR sweep and write a results CSV")
    experiment_flags(p_sweep)
    p_sweep.add_argument("--workers", type=int, help="processes per grid point")
    p_sweep.set_defaults(handler=cmd_sweep)

    p_const = sub.add_parser("constellation", help="dump pre/post equalization points")
    experiment_flags(p_const)
    p_const.add_argument("--snr", type=float, help="SNR in dB (default: first grid point)")
    p_const.set_defaults(handler=cmd_constellation)

    p_grad = sub.add_parser("gradcheck", help="compare ELBO gradients with finite differences")
    p_grad.add_argument("--seed", type=int)
    p_grad.add_argument("--instances", type=int, default=50)
    p_grad.set_defaults(handler=cmd_gradcheck)

    p_self = sub.add_parser("selftest", help="quick PASS/FAIL battery")
    p_self.add_argument("--seed", type=int)
    p_self.set_defaults(handler=cmd_selftest)

    return parser


# ── Main ─────────────────────────────────────

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO, console)
    print_header(args.command)

    try:
        return args.handler(args)
    except ConfigError as exc:
        console.print(f"[bold red]  Configuration error:[/bold red] {exc}")
        return 1
    except BlindMimoError as exc:
        console.print(f"[bold red]  {type(exc).__name__}:[/bold red] {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
