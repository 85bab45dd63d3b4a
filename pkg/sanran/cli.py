#!/usr/bin/env python3
"""Sanran CLI entry point.

usage:
    sanran init                       # Generate .sanran/config/ in the current directory
    sanran gen-data                   # Synthesize the ASC/image dataset
    sanran inject-noise               # Split and corrupt training labels
    sanran train                      # Co-train (or --baseline ce) and write a run directory
    sanran eval CHECKPOINT            # Test accuracy and confusion matrix
    sanran export-plots RUN_DIR       # Plot-ready CSV series
    sanran loss-hist                  # Per-class loss histograms, clean vs mislabeled
    sanran sweep                      # Acceptance sweep: seeds x noise x methods
"""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from sanran import autodiff as ad
from sanran import harness
from sanran.acceptance import AcceptancePlan, run_sweep, setting_name
from sanran.config import ExperimentConfig, init_project, load_experiment
from sanran.errors import DataError, SanranError


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Path to sanran.yaml")
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--data-root", help="Dataset directory (overrides data.root)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--debug", action="store_true", help="Fail on the first non-finite tensor")


def _noise(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--noise-kind", choices=["sym", "asym"])
    parser.add_argument("--noise-rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanran", add_help=False)
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("init", help="Generate .sanran/config/ in the current directory")
    sub.add_parser("help", help="Show this help message")

    p = sub.add_parser("gen-data", help="Synthesize the dataset")
    _common(p)

    p = sub.add_parser("inject-noise", help="Split and corrupt training labels")
    _common(p)
    _noise(p)

    p = sub.add_parser("train", help="Train and write a run directory")
    _common(p)
    _noise(p)
    p.add_argument("--epochs", type=int, help="Total epochs (overrides schedule.total_epochs)")
    p.add_argument("--out", help="Run directory")
    p.add_argument("--baseline", choices=["ce", "clsdf"])

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the test split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data-root", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--debug", action="store_true")

    p = sub.add_parser("export-plots", help="Write plot-ready CSV series for a run")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--checkpoint", type=Path, help="Also export fused test embeddings")
    p.add_argument("--data-root", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--debug", action="store_true")

    p = sub.add_parser("loss-hist", help="Per-class loss histograms (clean vs mislabeled)")
    _common(p)
    p.add_argument(
        "--checkpoint", type=Path, help="Use branch A of this checkpoint instead of a fresh warm-up"
    )
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", type=Path, help="Output CSV")

    p = sub.add_parser("sweep", help="Desk-scale acceptance sweep over seeds, noise and methods")
    _common(p)
    p.add_argument("--plan", type=Path, help="Path to acceptance.yaml")
    p.add_argument("--out", type=Path, help="Sweep directory (default: <out>/acceptance)")
    return parser


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(show_path=False, rich_tracebacks=True)],
        force=True,
    )


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "data.root": getattr(args, "data_root", None),
        "noise.kind": getattr(args, "noise_kind", None),
        "noise.rate": getattr(args, "noise_rate", None),
        "schedule.total_epochs": getattr(args, "epochs", None),
        "out": args.out if args.command == "train" else None,
        "baseline": getattr(args, "baseline", None),
        "debug": True if getattr(args, "debug", False) else None,
    }
    return load_experiment(args.config, **{k: v for k, v in overrides.items() if v is not None})


def cmd_init(console: Console) -> None:
    """Copy .sanran/config/ to the current directory to initialize."""
    try:
        dest = init_project()
        console.print(
            f"[green]Initialization complete.[/green] Configuration files generated at: {dest}"
        )
        console.print("Edit .sanran/config/sanran.yaml to customize settings.")
    except FileExistsError as e:
        console.print(f"[yellow]{e}[/yellow]")


def cmd_gen_data(console: Console, args: argparse.Namespace) -> None:
    config = _experiment(args)
    d = config.data
    console.print(
        f"Synthesizing {d.num_classes} classes x {d.samples_per_class} samples "
        f"({d.num_centers} scattering centers, {d.image_size}x{d.image_size} images)"
    )
    root = harness.generate_dataset(config)
    console.print(f"[green]Dataset written.[/green] {root}")


def cmd_inject_noise(console: Console, args: argparse.Namespace) -> None:
    config = _experiment(args)
    audit = harness.make_noisy_split(config)
    console.print(
        f"[green]Split written.[/green] {len(audit.ids)} training samples, "
        f"{int(audit.corrupted.sum())} corrupted "
        f"({config.noise.kind}, measured rate {audit.noise_fraction:.4f})"
    )


def cmd_train(console: Console, args: argparse.Namespace) -> None:
    config = _experiment(args)
    s = config.schedule
    console.print(
        Panel(
            f"[bold]{config.baseline}[/bold]  noise {config.noise.kind} {config.noise.rate:.2f}  "
            f"features {config.model.features}  alignment {config.ssl.alignment}\n"
            f"epochs {s.total_epochs} (warm-up {s.warm_up_epochs})  "
            f"lr {s.lr}  batch {s.batch_size}\n"
            f"Run directory: [cyan]{config.out}[/cyan]",
            title="Training",
            border_style="blue",
        )
    )
    report = harness.train(config)
    console.rule("[bold green]Training complete[/bold green]")
    console.print(
        f"Final accuracy: [bold]{report.final_accuracy:.4f}[/bold]  "
        f"best: {report.best_accuracy:.4f}"
    )
    console.print(f"Wall clock: {report.wall_clock:.1f}s")


def cmd_eval(console: Console, args: argparse.Namespace) -> None:
    evaluation = harness.evaluate_checkpoint(args.checkpoint, args.data_root)
    console.print(f"Test accuracy: [bold]{evaluation.accuracy:.4f}[/bold]")
    for i, acc in enumerate(evaluation.per_branch):
        console.print(f"  branch {'AB'[i]}: {acc:.4f}")
    table = Table(title="Confusion (rows: true, columns: predicted)")
    table.add_column("")
    for c in range(len(evaluation.confusion)):
        table.add_column(str(c), justify="right")
    for c, row in enumerate(evaluation.confusion):
        table.add_row(str(c), *(str(int(v)) for v in row))
    console.print(table)


def cmd_export_plots(console: Console, args: argparse.Namespace) -> None:
    for path in harness.export_plots(args.run_dir, args.checkpoint, args.data_root):
        console.print(f"  {path}")


def cmd_loss_hist(console: Console, args: argparse.Namespace) -> None:
    config = _experiment(args)
    path = harness.loss_histograms(config, args.checkpoint, args.bins, args.out)
    console.print(f"[green]Histograms written.[/green] {path}")


def cmd_sweep(console: Console, args: argparse.Namespace) -> None:
    config = _experiment(args)
    plan = AcceptancePlan.load(args.plan)
    console.print(
        Panel(
            f"seeds {list(plan.seeds)}  settings "
            f"{', '.join(setting_name(n) for n in plan.settings)}\n"
            f"budget {plan.budget}",
            title="Acceptance sweep",
            border_style="blue",
        )
    )
    report = run_sweep(config, plan, args.out)
    table = Table(title="Acceptance")
    table.add_column("criterion")
    table.add_column("result")
    table.add_column("measured")
    for c in report.criteria:
        verdict = "[green]pass[/green]" if c.passed else "[red]fail[/red]"
        table.add_row(c.name, verdict, str(c.measured))
    console.print(table)
    console.print(f"Wall clock: {report.wall_clock / 60.0:.1f} min")
    if not report.passed:
        sys.exit(1)


def cmd_help(console: Console) -> None:
    console.print(
        Panel(
            "[bold]sanran[/bold]: label-noise robust SAR target recognition\n\n"
            "Commands:\n"
            "  [bold]init[/bold]          Generate .sanran/config/ in the current directory\n"
            "  [bold]gen-data[/bold]      Synthesize the scattering-center dataset\n"
            "  [bold]inject-noise[/bold]  Split and corrupt training labels\n"
            "  [bold]train[/bold]         Train (--epochs, --out, --baseline ce|clsdf)\n"
            "  [bold]eval[/bold]          Evaluate a checkpoint on the test split\n"
            "  [bold]export-plots[/bold]  Write plot-ready CSV series for a run\n"
            "  [bold]loss-hist[/bold]     Per-class loss histograms, clean vs mislabeled\n"
            "  [bold]sweep[/bold]         Acceptance sweep over seeds, noise settings and methods\n"
            "  [bold]help[/bold]          Show this help message",
            title="Usage",
            border_style="blue",
        )
    )


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "inject-noise": cmd_inject_noise,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-plots": cmd_export_plots,
    "loss-hist": cmd_loss_hist,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> None:
    console = Console()
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help", "help"):
        cmd_help(console)
        return
    if argv[0] == "init":
        cmd_init(console)
        return
    if argv[0] not in _COMMANDS:
        console.print(f"[red]Unknown command: {argv[0]}[/red]")
        console.print("Run 'sanran help' to see usage.")
        sys.exit(1)

    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    ad.set_debug(args.debug)
    try:
        _COMMANDS[args.command](console, args)
    except SanranError as e:
        console.print(f"[red]{type(e).__name__}: {e}[/red]")
        sys.exit(e.exit_code)
    except OSError as e:
        console.print(f"[red]DataError: {e}[/red]")
        sys.exit(DataError.exit_code)
    except Exception as e:
        if args.verbose:
            raise
        console.print(f"[red]{type(e).__name__}: {e}[/red] (run with -v for the traceback)")
        sys.exit(1)
    finally:
        ad.set_debug(False)


if __name__ == "__main__":
    main()
