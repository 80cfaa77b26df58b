import logging
import os
from typing import Dict, Optional
from pythonjsonlogger import jsonlogger

default_log_level = os.getenv("RUN_LOG_LEVEL", "INFO").upper()

# Every logger handed out by setup_logger, so a run log can be attached to all of them.
_loggers: Dict[str, logging.Logger] = {}


class CustomJsonFormatter(jsonlogger.JsonFormatter):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        log_record['name'] = record.name
        log_record['level'] = record.levelname
        log_record['timestamp'] = self.formatTime(record, self.datefmt)
        log_record['message'] = record.getMessage()


def _formatter() -> CustomJsonFormatter:
    return CustomJsonFormatter('%(timestamp)s %(level)s %(message)s')


def setup_logger(name, level=logging._nameToLevel.get(default_log_level, logging.INFO)):
    """
    Sets up a logger with JSON formatting.

    Structured fields are passed with ``extra={...}`` and end up as top-level
    JSON keys next to name/level/timestamp/message.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Remove all existing handlers
    logger.handlers.clear()

    handler = logging.StreamHandler()
    handler.setFormatter(_formatter())
    logger.addHandler(handler)
    logger.propagate = False

    _loggers[name] = logger
    return logger


def set_level(level: str) -> None:
    """Change the level of every module logger (RUN_LOG_LEVEL at runtime)."""
    resolved = logging._nameToLevel.get(str(level).upper(), logging.INFO)
    for logger in _loggers.values():
        logger.setLevel(resolved)


def attach_run_log(path: str) -> logging.Handler:
    """Mirror every module logger into a JSON-lines file, e.g. <run-dir>/events.jsonl."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    handler = logging.FileHandler(path, mode='a', encoding='utf-8')
    handler.setFormatter(_formatter())
    for logger in _loggers.values():
        logger.addHandler(handler)
    return handler


def detach_run_log(handler: Optional[logging.Handler]) -> None:
    """Remove a handler installed by attach_run_log and close its file."""
    if handler is None:
        return
    for logger in _loggers.values():
        if handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()
