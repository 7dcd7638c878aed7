"""
Logging utilities for the kinetic layer solver

Every record carries the run id and the current solver stage, set with
``run_context`` and ``stage_context``, so that interleaved slab, penalty and
Picard messages can be told apart in one log file.
"""

import contextvars
import logging
import logging.handlers
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s %(stage)s] %(message)s"

_run_id: contextvars.ContextVar[str] = contextvars.ContextVar("klayer_run_id", default="-")
_stage: contextvars.ContextVar[str] = contextvars.ContextVar("klayer_stage", default="-")


class SolverContextFilter(logging.Filter):
    """Attach ``run_id`` and ``stage`` to each record."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = _run_id.get()
        record.stage = _stage.get()
        return True


@contextmanager
def run_context(run_id: str) -> Iterator[None]:
    token = _run_id.set(run_id)
    try:
        yield
    finally:
        _run_id.reset(token)


@contextmanager
def stage_context(stage: str) -> Iterator[None]:
    """Label records emitted inside the block; nested stages are joined with '/'."""

    outer = _stage.get()
    token = _stage.set(stage if outer == "-" else f"{outer}/{stage}")
    try:
        yield
    finally:
        _stage.reset(token)


def current_stage() -> str:
    return _stage.get()


def setup_logging(
    level: str = "INFO",
    format_string: Optional[str] = None,
    log_file: Optional[str] = None,
    max_size_mb: int = 10,
    backup_count: int = 5,
    verbose: bool = False,
) -> None:
    """Configure the root logger for a klayer run.

    In non-verbose mode INFO is raised to WARNING so that solver stage chatter
    stays out of the CLI summary. The file handler, when configured, always
    records INFO so that stage timings survive a quiet console.
    """

    numeric_level = getattr(logging, level.upper(), logging.INFO)
    console_level = logging.WARNING if not verbose and numeric_level == logging.INFO else numeric_level

    formatter = logging.Formatter(format_string or DEFAULT_FORMAT)
    context = SolverContextFilter()

    root_logger = logging.getLogger()
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(context)
    root_logger.addHandler(console_handler)

    handler_levels = [console_level]
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            log_path,
            maxBytes=max_size_mb * 1024 * 1024,
            backupCount=backup_count,
        )
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(formatter)
        file_handler.addFilter(context)
        root_logger.addHandler(file_handler)
        handler_levels.append(numeric_level)

    root_logger.setLevel(min(handler_levels))


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance."""
    return logging.getLogger(name)
