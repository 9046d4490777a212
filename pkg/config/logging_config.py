"""
config/logging_config.py: one logging bootstrap for the CLI, scripts and tests.
- Provides: setup_logging()
- Level comes from EVHOP_LOG_LEVEL unless passed explicitly.
"""
from __future__ import annotations

import logging
import os
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_configured = False


def setup_logging(level: Optional[Union[int, str]] = None) -> None:
    """Configure the root logger once. Later calls only adjust the level."""
    global _configured
    if level is None:
        level = os.environ.get("EVHOP_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.strip().upper())
        if not isinstance(level, int):
            level = logging.INFO
    root = logging.getLogger()
    if not _configured and not root.handlers:
        logging.basicConfig(level=level, format=LOG_FORMAT)
    root.setLevel(level)
    _configured = True
