"""Utility functions for LightTBNet."""

from typing import Any, Dict, Iterable, List, Optional, Sequence
import csv
import json
import os
import logging
import pathlib
import platform

import numpy as np


# Configure logging to file
def setup_logging():
    """Set up logging to file for troubleshooting."""
    log_dir_override = os.environ.get("LIGHTTBNET_LOG_DIR", "")
    if log_dir_override:
        log_dir = pathlib.Path(log_dir_override)
    else:
        # Get platform-specific path for logs
        if platform.system() == "Windows":
            base_path = pathlib.Path(os.environ.get("APPDATA", ""))
        elif platform.system() == "Darwin":  # macOS
            base_path = pathlib.Path.home() / "Library" / "Application Support"
        else:  # Assume Linux/Unix
            base_path = pathlib.Path.home() / ".config"
        log_dir = base_path / "lighttbnet"

    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / "lighttbnet_debug.log"

    level_name = os.environ.get("LIGHTTBNET_LOG_LEVEL", "DEBUG").upper()
    level = getattr(logging, level_name, logging.DEBUG)

    # Configure file logger
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        filename=str(log_file),
        filemode='a'  # Append mode
    )

    logger = logging.getLogger("lighttbnet")
    logger.setLevel(level)

    logger.info(f"Logging initialized. Log file: {log_file}")
    logger.info(f"Platform: {platform.system()} {platform.release()}")
    logger.info(f"numpy {np.__version__}, OMP_NUM_THREADS={os.environ.get('OMP_NUM_THREADS')}")

    return logger

# Create the logger instance to be imported by other modules
logger = setup_logging()


def make_rng(*entropy: int) -> np.random.Generator:
    """
    Create a numpy Generator from one or more integer seeds.

    Several integers are mixed through a SeedSequence, which is how
    independent streams (seed, epoch, sample index) are derived.
    """
    return np.random.default_rng(np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy]))


def write_csv(path: os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> pathlib.Path:
    """
    Write rows to a UTF-8 CSV file with a header line.

    Args:
        path: Destination file (parent directories are created)
        header: Column names
        rows: Row values, already formatted or plain Python values

    Returns:
        The path that was written
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))
    logger.debug(f"Wrote CSV {path}")
    return path


def write_json(path: os.PathLike, payload: Dict[str, Any]) -> pathlib.Path:
    """Write a JSON document with stable key order."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
    return path


def format_table(header: Sequence[str], rows: List[Sequence[Any]]) -> str:
    """
    Render rows as an aligned plain-text table.

    Cells are converted with str(); None renders as an empty cell.
    """
    cells = [[("" if c is None else str(c)) for c in row] for row in rows]
    widths = [len(h) for h in header]
    for row in cells:
        for i, c in enumerate(row):
            widths[i] = max(widths[i], len(c))

    def fmt(row: Sequence[str]) -> str:
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip()

    lines = [fmt(list(header)), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(row) for row in cells)
    return "\n".join(lines)


def fmt_float(value: Optional[float], digits: int = 3) -> str:
    """Format a float for reports; None and NaN become an empty cell."""
    if value is None:
        return ""
    if isinstance(value, float) and np.isnan(value):
        return ""
    return f"{value:.{digits}f}"
