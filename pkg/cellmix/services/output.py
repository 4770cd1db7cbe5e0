"""
Output Writers

CSV tables with a provenance header and SVG log-log plots.
"""

import logging
import sys
from pathlib import Path
from typing import Optional, TextIO

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from cellmix import __version__  # noqa: E402
from cellmix.models.params import RunConfig  # noqa: E402
from cellmix.models.results import FitResult  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
STDOUT = "-"


def header_lines(config: RunConfig) -> str:
    return (
        f"# cellmix {__version__}\n"
        f"# command: {config.command}\n"
        f"# config: {config.header_json()}\n"
    )


def _write(stream: TextIO, table: pd.DataFrame, config: RunConfig) -> None:
    stream.write(header_lines(config))
    table.to_csv(stream, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_table(table: pd.DataFrame, path: str, config: RunConfig) -> None:
    """
    Write a table as CSV preceded by the comment header.

    Args:
        table (pd.DataFrame): Rows to write
        path (str): Output file, or "-" for standard output
        config (RunConfig): Resolved run configuration for the header
    """
    if path == STDOUT:
        _write(sys.stdout, table, config)
        sys.stdout.flush()
        return
    target = Path(path)
    if target.parent and not target.parent.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        _write(fh, table, config)
    logger.info(f"💾 Wrote {len(table)} rows to {target}")


def events_path(path: str) -> Optional[str]:
    """Sibling ``<stem>.events.csv`` of a trajectory file; None for standard output."""
    if path == STDOUT:
        return None
    p = Path(path)
    return str(p.with_name(f"{p.stem}.events.csv"))


def read_table(path: str) -> pd.DataFrame:
    """Read a CSV written by ``write_table``, skipping the comment header."""
    return pd.read_csv(path, comment="#")


def plot_loglog(x, y, path: str, xlabel: str, ylabel: str, title: str = "",
                fit: Optional[FitResult] = None, yerr=None) -> None:
    """Log-log scatter with an optional fitted line, saved as a reproducible SVG."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(x, y, yerr=yerr, fmt="o", capsize=3, label="measured")
    if fit is not None:
        xs = sorted(x)
        ys = np.exp(fit.intercept) * np.power(xs, fit.slope)
        ax.plot(xs, ys, "-", label=f"slope {fit.slope:.3f} (r2 {fit.r2:.3f})")
        ax.legend()
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"📊 Saved plot {target}")
