"""Structured logging setup."""

import json
import logging
import sys
from datetime import datetime, timezone

_RESERVED = "fields"


class KeyValueFormatter(logging.Formatter):
    """Render records as ``ts level logger msg key=value ...``."""

    def format(self, record: logging.LogRecord) -> str:
        ts = datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds")
        parts = [ts, record.levelname, record.name, record.getMessage()]
        for key, value in getattr(record, _RESERVED, {}).items():
            parts.append(f"{key}={_render(value)}")
        line = " ".join(parts)
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


class JsonFormatter(logging.Formatter):
    """Render records as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        payload.update(getattr(record, _RESERVED, {}))
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def _render(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    text = str(value)
    return f'"{text}"' if " " in text else text


def configure_logging(level: str = "INFO", fmt: str = "kv") -> None:
    """Install a single stderr handler on the root logger.

    Args:
        level: Logging level name.
        fmt: 'kv' for key=value lines, 'json' for JSON lines.
    """
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if fmt == "json" else KeyValueFormatter())
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level.upper())


def fields(**values) -> dict:
    """Build the ``extra`` mapping for a structured log call."""
    return {_RESERVED: values}
