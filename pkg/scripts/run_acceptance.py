#!/usr/bin/env python3
"""
Acceptance Runner - stochesp
Runs every config under config/experiments and reports pass/fail per experiment.
"""
import sys
import os
import logging
from pathlib import Path

# Add src path for imports
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
src_path = os.path.join(project_root, 'src')
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from cli.app import setup_logging
from cli.config_schema import apply_overrides, load_config
from cli.experiments import run_experiment
from core.error_handler import ErrorHandler


def main():
    setup_logging()
    logger = logging.getLogger('stochesp')
    error_handler = ErrorHandler('stochesp')
    out_root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(project_root) / 'results' / 'acceptance'

    failures = []
    for config_path in sorted((Path(project_root) / 'config' / 'experiments').glob('*.yaml')):
        def execute():
            loaded = load_config(config_path)
            config = apply_overrides(loaded.config, out=str(out_root / config_path.stem))
            passed, _, _ = run_experiment(loaded, config)
            return passed

        passed = error_handler.safe_execute(f"acceptance {config_path.stem}", execute, default_return=False)
        print(f"{'✅' if passed else '❌'} {config_path.stem}")
        if not passed:
            failures.append(config_path.stem)

    if failures:
        logger.error(f"❌ {len(failures)} acceptance config(s) failed: {', '.join(failures)}")
        sys.exit(2)
    logger.info("✅ All acceptance configs passed")


if __name__ == '__main__':
    main()
