"""CSV and JSON report emission."""

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from loguru import logger

from services.config import TOOL_VERSION
from services.costmodel import TradeoffPoint
from services.probe import LandscapeGrid
from services.storage import claim_output

TRADEOFF_HEADER = ["tau", "accuracy", "mean_flops", "exit_hist_json"]
GRID_HEADER = ["alpha", "beta", "loss"]


def header_comment(config_hash: str) -> str:
    return f"# cascade-kd {TOOL_VERSION} config={config_hash}"


def _cell(value: object) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]], config_hash: str) -> Path:
    path = claim_output(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        f.write(header_comment(config_hash) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        count = 0
        for row in rows:
            writer.writerow([_cell(v) for v in row])
            count += 1
    logger.info(f"Wrote {count} rows → {path}")
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, payload: object) -> Path:
    path = claim_output(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote report → {path}")
    return path


def tradeoff_rows(points: Sequence[TradeoffPoint]) -> List[Tuple[object, ...]]:
    return [(p.tau, p.accuracy, p.mean_flops, json.dumps(list(p.exit_histogram))) for p in points]


def grid_rows(grid: LandscapeGrid) -> List[Tuple[float, float, float]]:
    return [
        (float(a), float(b), float(grid.losses[i, j]))
        for i, a in enumerate(grid.alphas)
        for j, b in enumerate(grid.betas)
    ]


def summarize(values: Sequence[float]) -> Tuple[float, float, int]:
    """Mean, sample standard deviation (0 for a single value) and count."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std, int(arr.size)
