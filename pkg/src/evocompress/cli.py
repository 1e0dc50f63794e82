"""
Command-line interface for evocompress.
"""

import argparse
import json
import sys
from typing import List, Optional

from .config import apply_overrides, load_config, resolve_workers
from .core import evaluate_checkpoint, resume_search, run_search
from .exceptions import ConfigError, DataError, EvoCompressError
from .metrics import metric_vector_to_dict
from .report import REPORT_FORMATS, build_table, collect_rows, render, write_reports
from .utils import check_run_status

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUN = 4


def _require_run(run_dir: str) -> None:
    status = check_run_status(run_dir)
    if not status['exists']:
        raise ConfigError(f"Run directory not found: {run_dir}")
    if not (status['has_state'] or status['has_archive']):
        raise ConfigError(f"{run_dir} has no search state yet")


def cmd_run(args):
    """Handle run command."""
    config = load_config(args.config)
    config = apply_overrides(config, seed=args.seed, generations=args.generations,
                             output_dir=args.output_dir)
    workers = resolve_workers(args.workers)
    out = run_search(config, workers=workers, verbose=not args.quiet)
    print(f"\n✓ Run directory: {out['run_dir']}")
    print(f"  {len(out['result'].archive)} archive member(s)")
    print(f"  Report: {out['reports'].get('md')}")
    print(f"  Plot: {out['plot']}")


def cmd_resume(args):
    """Handle resume command."""
    workers = resolve_workers(args.workers)
    out = resume_search(args.run_dir, workers=workers, verbose=not args.quiet)
    print(f"\n✓ Resumed run finished at generation {out['result'].generation}")
    print(f"  Report: {out['reports'].get('md')}")


def cmd_report(args):
    """Handle report command."""
    _require_run(args.run_dir)
    table = build_table(collect_rows(args.run_dir))
    paths = write_reports(args.run_dir, formats=[args.format])
    print(render(table, args.format))
    print(f"✓ Saved to: {paths[args.format]}")


def cmd_plot(args):
    """Handle plot command."""
    from .visualization import plot_percent_change

    _require_run(args.run_dir)
    path = plot_percent_change(args.run_dir, args.output)
    print(f"✓ Saved to: {path}")


def cmd_eval(args):
    """Handle eval command."""
    metrics = evaluate_checkpoint(args.checkpoint, args.data, fmt=args.format, task=args.task,
                                  seed=args.seed, timing=not args.no_timing)
    print(json.dumps(metric_vector_to_dict(metrics), indent=2, ensure_ascii=False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='evocompress',
        description='Evolutionary search over neural network compression pipelines',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Search from a config file
  %(prog)s run --config configs/desk_two_gaussians.json --seed 42 --generations 5

  # Continue an interrupted run
  %(prog)s resume runs/desk

  # Tables and the percent-change chart
  %(prog)s report runs/desk --format md
  %(prog)s plot runs/desk

  # Measure a saved network on a dataset file
  %(prog)s eval --checkpoint runs/desk/individuals/00003/model.ptra --data data.csv

Exit codes: 0 ok, 2 config error, 3 data error, 4 run failure.
The worker count defaults to the EVOCOMPRESS_WORKERS environment variable.
        """
    )
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    run_parser = subparsers.add_parser('run', help='Start (or continue) a search from a config file')
    run_parser.add_argument('--config', required=True, help='JSON run config')
    run_parser.add_argument('--seed', type=int, help='Override evolution.seed')
    run_parser.add_argument('--generations', type=int, help='Override evolution.max_generations')
    run_parser.add_argument('--output-dir', help='Override output_dir')
    run_parser.add_argument('--workers', type=int, help='Evaluation threads')
    run_parser.add_argument('--quiet', action='store_true', help='Only print step summaries')

    resume_parser = subparsers.add_parser('resume', help='Resume a run from its last generation')
    resume_parser.add_argument('run_dir', help='Run directory')
    resume_parser.add_argument('--workers', type=int, help='Evaluation threads')
    resume_parser.add_argument('--quiet', action='store_true', help='Only print step summaries')

    report_parser = subparsers.add_parser('report', help='Write and print the result table')
    report_parser.add_argument('run_dir', help='Run directory')
    report_parser.add_argument('--format', choices=REPORT_FORMATS, default='txt',
                               help='Table format (default: txt)')

    plot_parser = subparsers.add_parser('plot', help='Write the percent-change chart (SVG)')
    plot_parser.add_argument('run_dir', help='Run directory')
    plot_parser.add_argument('--output', help='Output path (default: <run_dir>/reports/percent_change.svg)')

    eval_parser = subparsers.add_parser('eval', help='Measure a checkpoint on a dataset file')
    eval_parser.add_argument('--checkpoint', required=True, help='PTRA checkpoint')
    eval_parser.add_argument('--data', required=True, help='Dataset file')
    eval_parser.add_argument('--format', default='csv',
                             choices=['csv', 'tabular', 'timeseries', 'image'],
                             help='Dataset format (default: csv)')
    eval_parser.add_argument('--task', choices=['binary', 'multiclass', 'regression'],
                             help="Task kind (default: the checkpoint's)")
    eval_parser.add_argument('--seed', type=int, default=0, help='Split seed (default: 0)')
    eval_parser.add_argument('--no-timing', action='store_true', help='Skip latency and throughput')
    return parser


COMMANDS = {
    'run': cmd_run,
    'resume': cmd_resume,
    'report': cmd_report,
    'plot': cmd_plot,
    'eval': cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return EXIT_RUN
    except ConfigError as e:
        print(f"\nConfig error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"\nData error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EvoCompressError as e:
        print(f"\nError: {e}", file=sys.stderr)
        return EXIT_RUN
    except Exception as e:
        print(f"\nError: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
