"""
Logging Service for Plaid
Provides rotating file logging, console output and an in-memory buffer of recent records.
"""

import os
import sys
import logging
import threading
from datetime import datetime
from logging.handlers import RotatingFileHandler
from collections import deque
from typing import Optional

# Configuration
LOG_DIR = os.path.expanduser(os.getenv('PLAID_LOG_DIR', '~/plaid_logs'))
LOG_FILE_NAME = 'plaid.log'
MAX_LOG_SIZE = 10 * 1024 * 1024  # 10 MB
BACKUP_COUNT = 5
MAX_MEMORY_LINES = 1000  # Keep last 1000 records in memory

LOG_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)-20s | %(message)s'


class LogBuffer:
    """Thread-safe circular buffer for storing recent log records."""

    def __init__(self, max_size: int = MAX_MEMORY_LINES):
        self._buffer = deque(maxlen=max_size)
        self._lock = threading.Lock()

    def append(self, log_entry: dict):
        with self._lock:
            self._buffer.append(log_entry)

    def get_recent(self, count: int = 100) -> list:
        """Get the most recent log entries."""
        with self._lock:
            return list(self._buffer)[-count:]

    def clear(self):
        with self._lock:
            self._buffer.clear()


# Global log buffer
log_buffer = LogBuffer()


class BufferedHandler(logging.Handler):
    """Handler that writes structured entries to the in-memory buffer."""

    def __init__(self, buffer: LogBuffer):
        super().__init__()
        self.buffer = buffer

    def emit(self, record):
        try:
            self.buffer.append({
                'timestamp': datetime.fromtimestamp(record.created).isoformat(),
                'level': record.levelname,
                'logger': record.name,
                'message': self.format(record),
                'module': record.module,
                'line': record.lineno
            })
        except Exception:
            self.handleError(record)


class LoggingService:
    """Central logging service for the application."""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self._initialized = True
        self._setup_logging()

    def _setup_logging(self):
        """Configure logging with file, console and buffer handlers."""
        formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')

        root_logger = logging.getLogger()
        root_logger.setLevel(logging.DEBUG)

        # Only replace handlers this service installed; pytest's capture handlers stay
        for handler in list(root_logger.handlers):
            if getattr(handler, '_plaid', False):
                root_logger.removeHandler(handler)

        self.log_dir = LOG_DIR
        self.log_file = None
        try:
            os.makedirs(LOG_DIR, exist_ok=True)
            self.log_file = os.path.join(LOG_DIR, LOG_FILE_NAME)
            file_handler = RotatingFileHandler(
                self.log_file,
                maxBytes=MAX_LOG_SIZE,
                backupCount=BACKUP_COUNT,
                encoding='utf-8'
            )
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            self._install(root_logger, file_handler)
        except OSError as e:
            sys.stderr.write(f"plaid: file logging disabled ({e})\n")

        self.console_handler = logging.StreamHandler(sys.stdout)
        self.console_handler.setLevel(logging.INFO)
        self.console_handler.setFormatter(formatter)
        self._install(root_logger, self.console_handler)

        buffer_handler = BufferedHandler(log_buffer)
        buffer_handler.setLevel(logging.DEBUG)
        buffer_handler.setFormatter(formatter)
        self._install(root_logger, buffer_handler)

        self.logger = root_logger

    @staticmethod
    def _install(root_logger: logging.Logger, handler: logging.Handler):
        handler._plaid = True
        root_logger.addHandler(handler)

    def get_logger(self, name: str) -> logging.Logger:
        """Get a named logger."""
        return logging.getLogger(name)

    def get_recent_logs(self, count: int = 100) -> list:
        """Get recent log entries from memory."""
        return log_buffer.get_recent(count)

    def configure_level(self, level):
        """Set console verbosity ('DEBUG', 'INFO', ... or a logging level number)."""
        if isinstance(level, str):
            level = logging.getLevelName(level.upper())
        self.console_handler.setLevel(level)


# Singleton instance
_logging_service: Optional[LoggingService] = None


def get_logging_service() -> LoggingService:
    """Get the logging service singleton."""
    global _logging_service
    if _logging_service is None:
        _logging_service = LoggingService()
    return _logging_service


def get_logger(name: str) -> logging.Logger:
    """Convenience function to get a named logger."""
    get_logging_service()  # Ensure logging is initialized
    return logging.getLogger(name)


def configure_level(level):
    get_logging_service().configure_level(level)
