"""Lightweight logging utility.

Usage:
    from dest_qa.utils.log import log, set_verbose

    set_verbose(True)           # Enable logging (or DEST_VERBOSE=1)
    log("message", "trainer")   # Prints: HH:MM:SS.mmm [    trainer ] message
    log("message")              # Auto-detects tag from caller's filename

Log lines go to stderr so that reports printed on stdout stay byte-stable.
"""

import inspect
import sys
from datetime import datetime
from pathlib import Path

from dest_qa.config import env_flag

_verbose = env_flag("DEST_VERBOSE")


def set_verbose(enabled: bool) -> None:
    """Enable or disable verbose logging."""
    global _verbose
    _verbose = enabled


def is_verbose() -> bool:
    return _verbose


def log(message: str, tag: str | None = None) -> None:
    """Log a message if verbose mode is enabled.

    Args:
        message: The message to log.
        tag: Source identifier. If None, uses caller's filename (without extension).
    """
    if not _verbose:
        return
    if tag is None:
        caller_frame = inspect.currentframe().f_back
        tag = Path(caller_frame.f_code.co_filename).stem
    now = datetime.now()
    timestamp = now.strftime("%H:%M:%S") + f".{now.microsecond // 1000:03d}"
    print(f"{timestamp} [ {tag:>10} ] {message}", file=sys.stderr)
