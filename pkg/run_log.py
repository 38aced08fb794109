"""
Run Log for training and evaluation runs.

This module provides:
- RunLog for thread-safe, line-oriented JSON records of a run
- read_records for loading a log back (header first, then metrics)

The first line of every log is a header record carrying the effective
configuration; each later line is one metrics record.
"""

import json
import math
import os
import threading
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

from logging_service import get_logger

logger = get_logger('plaid.run_log')

HEADER_KIND = 'header'
METRICS_KIND = 'metrics'


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z')


def _jsonable(value: Any) -> Any:
    # NaN/inf are not valid JSON; record them as strings
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class RunLog:
    """
    Thread-safe append-only JSONL log.

    Usage:
        log = RunLog(path)
        log.write_header(effective_config)
        log.append({'step': 0, 'total': 812.3, ...})

        header, records = read_records(path)
    """

    def __init__(self, path: str, append: bool = False):
        """
        Args:
            path: Log file location (parent directories are created)
            append: Keep existing records (resumed runs) instead of truncating
        """
        self.path = str(path)
        self._lock = threading.RLock()
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        if not append:
            open(self.path, 'w', encoding='utf-8').close()

    def _write(self, record: Dict[str, Any]) -> None:
        line = json.dumps(_jsonable(record), sort_keys=True)
        with self._lock:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + '\n')

    def write_header(self, config: Dict[str, Any], **extra: Any) -> None:
        """Record the effective configuration of this run."""
        self._write({'kind': HEADER_KIND, 'created_at': _utc_now(), 'config': config, **extra})
        logger.debug(f"run log header written to {self.path}")

    def append(self, record: Dict[str, Any], kind: str = METRICS_KIND) -> None:
        self._write({'kind': kind, **record})


def read_records(path: str, kind: Optional[str] = METRICS_KIND) -> Tuple[Optional[Dict[str, Any]], List[Dict[str, Any]]]:
    """Return (first header or None, records of the given kind; all non-header records when kind is None)."""
    header = None
    records: List[Dict[str, Any]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                logger.warning(f"{path}:{line_num}: skipping malformed record ({e})")
                continue
            if record.get('kind') == HEADER_KIND:
                if header is None:
                    header = record
                continue
            if kind is None or record.get('kind') == kind:
                records.append(record)
    return header, records
