"""Deterministic writers for run artifacts.

All JSON goes through :func:`dumps_canonical` so that two runs with the same
configuration produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def dumps_canonical(payload: Any) -> str:
    """Serialize *payload* with sorted keys and a fixed layout."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)


def write_json(path: Path, payload: Any) -> Path:
    """Write a JSON document; pydantic models are dumped in JSON mode first."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_canonical(payload) + "\n", encoding="utf-8")
    logger.debug("Wrote %s", path)
    return path


def write_jsonl(path: Path, records: Iterable[BaseModel | dict[str, Any]]) -> Path:
    """Write one compact JSON object per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            if isinstance(record, BaseModel):
                record = record.model_dump(mode="json")
            fh.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")
    logger.debug("Wrote %s", path)
    return path


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    """Read a JSON-lines file into a list of dicts."""
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_real(value: float) -> str:
    """Shortest text that parses back to exactly *value*."""
    return repr(float(value))


def write_matrix_csv(path: Path, matrix: np.ndarray) -> Path:
    """Write a 2-D array as a headerless CSV at full precision."""
    frame = pd.DataFrame(np.asarray(matrix, dtype=np.float64)).map(format_real)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, header=False, index=False)
    logger.debug("Wrote %s (%d x %d)", path, frame.shape[0], frame.shape[1])
    return path


def config_hash(payload: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of *payload*."""
    return hashlib.sha256(dumps_canonical(payload).encode("utf-8")).hexdigest()
