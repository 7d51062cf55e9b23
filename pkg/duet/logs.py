import sys
import json
import logging
import numpy as np
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, TextIO, Union
from mypy_extensions import TypedDict


class record_t(TypedDict, total=False):
    level: str
    logger: str
    event: str
    fields: Dict[str, Any]


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record, without timestamps.

    Structured values travel in `extra={'fields': {...}}`. Leaving out the
    wall clock keeps the logs of two identical runs byte-identical.
    """

    def format(self, record: logging.LogRecord) -> str:
        line: record_t = {
            'level': record.levelname.lower(),
            'logger': record.name,
            'event': record.getMessage(),
        }
        fields = getattr(record, 'fields', None)
        if fields:
            line['fields'] = fields
        if record.exc_info:
            line.setdefault('fields', {})['exception'] = self.formatException(record.exc_info)
        return json.dumps(line, sort_keys=True, default=_plain)


def _plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Enum):
        return value.value
    return str(value)


def configure_logging(level: Union[int, str] = logging.INFO,
                      stream: Optional[TextIO] = None,
                      path: Optional[Union[str, Path]] = None) -> logging.Logger:
    """Route the `duet` loggers to JSON lines on a stream and optionally a file."""
    root = logging.getLogger('duet')
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    formatter = JsonLineFormatter()
    console = logging.StreamHandler(stream or sys.stderr)
    console.setFormatter(formatter)
    root.addHandler(console)
    if path is not None:
        handler = logging.FileHandler(path, mode='w', encoding='utf-8')
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root
