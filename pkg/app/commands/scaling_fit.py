"""
Scaling-Fit Command

Reads {budget, params, loss[, family]} records (one JSON object per line),
fits an IsoFLOP quadratic per budget and the loss / parameter power laws per
family, and prints the fit report as JSON.
"""
import json
from pathlib import Path

from app.config import RunConfig
from logging_service import get_logger
from plaid.errors import InputError
from plaid.scaling import plot_isoflop, read_records, report_dict, scaling_report, write_table

logger = get_logger('plaid.cmd.scaling')


def run_scaling_fit(args, cfg: RunConfig) -> int:
    path = Path(args.records)
    if not path.is_file():
        raise InputError(f"records file not found: {path}")
    points = read_records(path)
    if not points:
        raise InputError(f"no scaling records in {path}")

    reports = scaling_report(points)
    report = report_dict(reports)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)

    if cfg.paths.out:
        out = Path(cfg.paths.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + '\n', encoding='utf-8')
    if getattr(args, 'table', None):
        logger.info(f"wrote table {write_table(reports, args.table)}")
    if getattr(args, 'plot', None):
        logger.info(f"wrote plot {plot_isoflop(points, reports, args.plot)}")
    return 0
