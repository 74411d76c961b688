"""
log.py
------
Logging setup. Library modules only call logging.getLogger(__name__);
the CLI calls setup_logging() once to route everything through rich.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler

ROOT_LOGGER = "core"


def setup_logging(level: int = logging.INFO, console: Console | None = None) -> logging.Logger:
    """Attach a single RichHandler to the 'core' logger (safe to call twice)."""
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(level)

    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)

    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
        markup=False,
    )
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
