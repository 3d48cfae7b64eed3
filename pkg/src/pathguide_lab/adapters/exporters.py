"""CSV and JSON export of report rows.

CSV columns follow the pydantic field order of the row model; floats are
written in shortest round-trip form so identical runs produce identical
bytes.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


def rows_to_csv(rows: Sequence[BaseModel], row_type: type[BaseModel]) -> bytes:
    """Render rows of one model type as UTF-8 CSV with a header line.

    Nested model or list fields are not supported in CSV rows.
    """
    fieldnames = list(row_type.model_fields)
    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({name: _cell(getattr(row, name)) for name in fieldnames})
    return output.getvalue().encode("utf-8")


def model_to_json(model: BaseModel) -> bytes:
    """Deterministic JSON (sorted keys, two-space indent) of a report model."""
    return (json.dumps(model.model_dump(mode="json"), sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_bytes(path: Path, payload: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path
