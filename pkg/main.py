#!/usr/bin/env python3
"""
Plaid command-line entry point.

Usage:
    python3 main.py tokenize corpus.txt [--out data/]
    python3 main.py train [--config run.cfg] [--set train.batch_size=32] [--steps N] [--resume]
    python3 main.py eval --checkpoint runs/checkpoint.pldk [--seed N]
    python3 main.py sample --checkpoint runs/checkpoint.pldk [--steps T] [--tau 0.9] [--num-samples 4]
    python3 main.py guide --checkpoint ... --span "0::Once upon" --lexical "x" --negate --guidance-weight 2
    python3 main.py scaling-fit records.jsonl [--table fits.csv] [--plot isoflop.png]

Exit codes:
  0  success
  1  runtime failure (the module error is printed)
  2  bad configuration or arguments (schema diagnostics are printed)
"""

import argparse
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
load_dotenv()

from logging_service import configure_level, get_logging_service, get_logger

logging_service = get_logging_service()
logger = get_logger('plaid.main')

COMMANDS = ('train', 'eval', 'sample', 'guide', 'scaling-fit', 'tokenize')

# Which config key a generic flag sets, per command
_SEED_KEY = {'train': 'train.seed', 'eval': 'eval.seed', 'sample': 'sample.seed', 'guide': 'sample.seed'}
_STEPS_KEY = {'train': 'train.total_steps', 'sample': 'sample.T', 'guide': 'sample.T'}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', help='Flat section.key = value config file')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                   help='Config override (repeatable); beats the config file')
    p.add_argument('--checkpoint', help='Checkpoint path (default <run_dir>/checkpoint.pldk)')
    p.add_argument('--out', help='Output path or directory')
    p.add_argument('--data', help='Packed data directory (default data.dir)')
    p.add_argument('--seed', type=int)
    p.add_argument('--verbose', '-v', action='store_true', help='DEBUG output on the console')


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Train a model on the packed corpus')
    _add_common(p)
    p.add_argument('--steps', type=int, help='Total training steps')
    p.add_argument('--resume', action='store_true', help='Continue from the checkpoint if present')

    p = sub.add_parser('eval', help='Held-out NLL / BPC / PPL of a checkpoint')
    _add_common(p)

    for name, help_text in (('sample', 'Sample from a checkpoint'),
                            ('guide', 'Sample with token guidance')):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument('--steps', type=int, help='Number of reverse steps T')
        p.add_argument('--tau', type=float, help='Score temperature in (0, 1]')
        p.add_argument('--guidance-weight', type=float)
        p.add_argument('--num-samples', type=int)
        if name == 'guide':
            p.add_argument('--span', action='append', default=[], metavar='START:END:TEXT')
            p.add_argument('--lexical', action='append', default=[], metavar='TEXT')
            p.add_argument('--negate', action='store_true', help='Negate every --lexical term')
            p.add_argument('--spec', help='JSON guidance spec file')

    p = sub.add_parser('scaling-fit', help='IsoFLOP fits and power laws over a records file')
    _add_common(p)
    p.add_argument('records', help='JSONL records {budget, params, loss[, family]}')
    p.add_argument('--table', help='Write a CSV of per-budget vertices')
    p.add_argument('--plot', help='Write an IsoFLOP profile figure (needs matplotlib)')

    p = sub.add_parser('tokenize', help='Build the vocabulary and packed datasets')
    _add_common(p)
    p.add_argument('inputs', nargs='+', help='UTF-8 corpus files')
    p.add_argument('--vocab-size', type=int, help='Target vocabulary size (259 = byte level)')
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    cmd = args.command
    flags = {
        'paths.checkpoint': args.checkpoint,
        'paths.out': args.out,
        'data.dir': args.data,
        'sample.tau': getattr(args, 'tau', None),
        'sample.guidance_weight': getattr(args, 'guidance_weight', None),
        'sample.num_samples': getattr(args, 'num_samples', None),
        'data.vocab_size': getattr(args, 'vocab_size', None),
    }
    if cmd in _SEED_KEY:
        flags[_SEED_KEY[cmd]] = args.seed
    if cmd in _STEPS_KEY:
        flags[_STEPS_KEY[cmd]] = getattr(args, 'steps', None)
    return flags


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose:
        configure_level('DEBUG')

    # Imported here so `--help` stays fast
    from app.commands import get_handlers
    from app.config import Config, load_run_config
    from plaid.errors import ConfigError, PlaidError

    try:
        cfg = load_run_config(args.config, args.overrides, _flag_overrides(args))
        Config.apply_threads()
        logger.debug(f"effective config: {cfg.flat()}")
        return get_handlers()[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        for line in e.diagnostics:
            logger.debug(f"config diagnostic: {line}")
        return 2
    except PlaidError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
