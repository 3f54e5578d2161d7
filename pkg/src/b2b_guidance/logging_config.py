#!/usr/bin/env python

import logging
import os
import sys
from typing import Optional

import structlog

LOGGER_NAME = "b2b_guidance"


def _resolve_level(level: Optional[str]) -> int:
    name = (level or os.environ.get("B2B_LOG_LEVEL") or "INFO").upper()
    resolved = logging.getLevelName(name)
    return resolved if isinstance(resolved, int) else logging.INFO


def setup_logging(level: Optional[str] = None) -> structlog.BoundLogger:
    """Configure structured JSON logging on stderr.

    Stdout is left untouched so command output and the stdio tool transport
    stay clean.

    Args:
        level: Log level name. Falls back to ``B2B_LOG_LEVEL``, then ``INFO``.

    Returns:
        Configured structlog logger instance
    """
    structlog.configure(
        processors=[
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer()
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        logger_factory=structlog.stdlib.LoggerFactory(),
        context_class=dict,
        cache_logger_on_first_use=True,
    )

    resolved = _resolve_level(level)
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=resolved,
    )
    logging.getLogger(LOGGER_NAME).setLevel(resolved)

    return structlog.get_logger(LOGGER_NAME)


def get_logger() -> structlog.BoundLogger:
    """Get the package logger.

    Returns:
        Configured structlog logger instance
    """
    return structlog.get_logger(LOGGER_NAME)
