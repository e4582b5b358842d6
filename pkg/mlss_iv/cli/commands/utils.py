from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from mlss_iv.core.errors import ConfigError
from mlss_iv.core.report_formatter import dumps, write_json, write_table

THREADS_ENV = "MLSS_THREADS"


def str2bool(v: str) -> bool:
    """Convert string to boolean for argparse."""
    if v.lower() in {'true', '1', 'yes', 'y'}:
        return True
    elif v.lower() in {'false', '0', 'no', 'n'}:
        return False
    else:
        raise argparse.ArgumentTypeError(f'Boolean value expected, got: {v}')


def parse_tau_grid(spec: str) -> np.ndarray:
    """``lo:hi:step`` -> evenly spaced grid including both ends."""
    try:
        lo, hi, step = (float(part) for part in spec.split(":"))
    except ValueError:
        raise ConfigError(f"--tau-grid must look like lo:hi:step, got {spec!r}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or step <= 0 or hi < lo:
        raise ConfigError(f"--tau-grid needs finite lo <= hi and step > 0, got {spec!r}")
    count = int(round((hi - lo) / step)) + 1
    if count > 10_000_000:
        raise ConfigError(f"--tau-grid {spec!r} has {count} points; use a coarser step")
    return np.linspace(lo, hi, count)


def threads_from_env() -> int:
    """Worker cap from MLSS_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def print_problems(problems: Sequence[str]) -> None:
    print("Configuration error:", file=sys.stderr)
    for problem in problems:
        print(f"  - {problem}", file=sys.stderr)


def emit_report(report: Dict[str, Any], out: Optional[str], fmt: str = "json",
                rows: Optional[List[Dict[str, Any]]] = None) -> None:
    """Write the report to ``out`` (or stdout). CSV output flattens ``rows``."""
    if fmt == "csv" and rows is not None:
        if out:
            write_table(rows, out)
            print(f"Wrote {out}", file=sys.stderr)
        else:
            sys.stdout.write(pd.DataFrame(rows).to_csv(index=False, lineterminator="\n"))
        return
    if out:
        write_json(report, out)
        print(f"Wrote {out}", file=sys.stderr)
    else:
        sys.stdout.write(dumps(report))


def ensure_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out
