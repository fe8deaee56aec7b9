#!/usr/bin/env python3
"""
stochesp - Command Line Application
Entry point for running experiments from YAML configs.

Key responsibilities:
- Logging setup from config/logging_config.yaml
- `run`, `certify` and `list-experiments` commands
- Exit codes: 0 pass, 2 a check failed, 1 error

External dependencies:
- click for the command surface
- PyYAML + logging.config for the logging setup
"""

import logging
import logging.config
import sys

import click
import yaml

from cli.config_schema import apply_overrides, load_config
from cli.experiments import CERTIFY_HEADER, list_experiments, run_experiment
from core.error_handler import ConfigError, ErrorHandler
from core.settings import settings
from core.utilities import NumberUtilities

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2

OT_CHOICES = ["auto", "quantile", "assignment", "sinkhorn"]


def setup_logging():
    """Setup logging configuration for a run"""
    log_dir = settings.project_root / settings.log_directory
    log_dir.mkdir(parents=True, exist_ok=True)

    config_path = settings.logging_config_path
    if config_path.exists():
        with open(config_path, 'r') as f:
            config = yaml.safe_load(f)
        # file handlers are anchored at the project root, not the working directory
        for handler in config.get('handlers', {}).values():
            if 'filename' in handler:
                handler['filename'] = str(settings.project_root / handler['filename'])
        logging.config.dictConfig(config)
    else:
        logging.basicConfig(
            level=logging.INFO,
            format='%(asctime)s | %(name)s | %(levelname)s | %(message)s',
            handlers=[logging.StreamHandler(sys.stderr), logging.FileHandler(log_dir / 'stochesp.log')]
        )

    logger = logging.getLogger('stochesp')
    logger.info(f"🚀 {settings.library_name} {settings.library_version} logging initialized")
    return logger


def _load(config_path, out, seed, ot, threads, experiment=None):
    loaded = load_config(config_path)
    config = apply_overrides(loaded.config, out=out, seed=seed, ot=ot, threads=threads)
    if experiment is not None:
        config = config.model_copy(update={"experiment": experiment})
    return loaded, config


def _execute(operation: str, config_path: str, action) -> int:
    error_handler = ErrorHandler('stochesp')
    try:
        return action()
    except ConfigError as e:
        error_handler.log_error(operation, e, {'config': config_path})
        click.echo(str(e), err=True)
        return EXIT_ERROR
    except Exception as e:
        error_handler.log_error(operation, e, {'config': config_path, 'type': type(e).__name__})
        click.echo(f"error: {e}", err=True)
        return EXIT_ERROR


config_option = click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                             help='Experiment YAML config.')
out_option = click.option('--out', default=None, help='Output directory (overrides run.output_dir).')
seed_option = click.option('--seed', default=None, type=click.IntRange(0, 2 ** 64 - 1),
                           help='Run a single seed instead of the configured list.')
ot_option = click.option('--ot', default=None, type=click.Choice(OT_CHOICES), help='OT solver.')
threads_option = click.option('--threads', default=None, type=click.IntRange(min=1), envvar='STOCHESP_THREADS',
                              help='Worker threads (env STOCHESP_THREADS).')


@click.group()
def cli():
    """Stochastic solutions of state-space systems: experiments and certificates."""


@cli.command()
@config_option
@out_option
@seed_option
@ot_option
@threads_option
def run(config_path, out, seed, ot, threads):
    """Run the experiment named in CONFIG and write its artifacts."""
    setup_logging()

    def action():
        loaded, config = _load(config_path, out, seed, ot, threads)
        passed, summary, _ = run_experiment(loaded, config)
        click.echo(f"{config.experiment}: {'pass' if passed else 'FAIL'} "
                   f"(artifacts in {config.run.output_dir})")
        return EXIT_PASS if passed else EXIT_CHECK_FAILED

    sys.exit(_execute('run', config_path, action))


@cli.command()
@config_option
@out_option
@seed_option
@threads_option
def certify(config_path, out, seed, threads):
    """Compute the certificates for the model in CONFIG and print them as a table."""
    setup_logging()

    def action():
        loaded, config = _load(config_path, out, seed, None, threads, experiment="certify")
        passed, _, results = run_experiment(loaded, config)
        widths = (16, 18, 24, 6, 12, 10, 24)
        for result in results:
            click.echo(f"seed {result.seed}")
            click.echo("".join(h.ljust(n) for h, n in zip(CERTIFY_HEADER, widths)))
            for row in result.trace_rows:
                cells = [NumberUtilities.format_value(v) for v in row]
                click.echo("".join(c.ljust(n) for c, n in zip(cells, widths)))
        click.echo("pass" if passed else "FAIL")
        return EXIT_PASS if passed else EXIT_CHECK_FAILED

    sys.exit(_execute('certify', config_path, action))


@cli.command('list-experiments')
def list_experiments_command():
    """List experiments with their required config sections."""
    click.echo(list_experiments(), nl=False)


def main():
    cli()


if __name__ == '__main__':
    main()
