"""
Line-oriented parsing and formatting.
- Observation JSONL: one object per line with exactly frame, crop_ref, clip_score, embedding
- Rope index tables: tab-separated seq_pos, kind, subject_id, t, y, x
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

from core.core_errors import ConsolidationError, LayoutError

logger = logging.getLogger(__name__)

OBSERVATION_FIELDS = frozenset({"frame", "crop_ref", "clip_score", "embedding"})
ROPE_TABLE_HEADER = ("seq_pos", "kind", "subject_id", "t", "y", "x")


# ============================================================================
# OBSERVATION JSONL
# ============================================================================
def parse_observation_line(line: str, line_no: int = 0, source: str = "<input>") -> Dict[str, Any]:
    where = f"{source}:{line_no}"
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise ConsolidationError(f"{where}: JSON decode error: {e}") from None
    if not isinstance(data, dict):
        raise ConsolidationError(f"{where}: record must be an object")
    keys = set(data)
    if keys != OBSERVATION_FIELDS:
        missing = sorted(OBSERVATION_FIELDS - keys)
        extra = sorted(keys - OBSERVATION_FIELDS)
        raise ConsolidationError(f"{where}: bad fields (missing {missing}, unexpected {extra})")

    frame, score, embedding = data["frame"], data["clip_score"], data["embedding"]
    if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
        raise ConsolidationError(f"{where}: frame must be a non-negative integer")
    if not isinstance(data["crop_ref"], str):
        raise ConsolidationError(f"{where}: crop_ref must be a string")
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
        raise ConsolidationError(f"{where}: clip_score must be a number in [0, 1]")
    if (not isinstance(embedding, list) or not embedding
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in embedding)):
        raise ConsolidationError(f"{where}: embedding must be a non-empty array of numbers")
    if not all(math.isfinite(v) for v in embedding):
        raise ConsolidationError(f"{where}: embedding holds non-finite values")
    return {"frame": frame, "crop_ref": data["crop_ref"], "clip_score": float(score),
            "embedding": [float(v) for v in embedding]}


def parse_observation_lines(lines: Iterable[str], source: str = "<input>") -> List[Dict[str, Any]]:
    records = []
    for line_no, line in enumerate(lines, start=1):
        if line.strip():
            records.append(parse_observation_line(line, line_no, source))
    logger.debug(f"Parsed {len(records)} observation records from {source}")
    return records


def read_observation_file(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConsolidationError(f"cannot read observations {path}: {e}") from None
    return parse_observation_lines(text.splitlines(), str(path))


def format_observation_line(record: Dict[str, Any]) -> str:
    return json.dumps({key: record[key] for key in sorted(OBSERVATION_FIELDS)}, sort_keys=True)


# ============================================================================
# ROPE TABLES
# ============================================================================
def format_rope_table(rows: Sequence[Sequence[Any]]) -> str:
    """Tab-separated table with header; None subject ids print as '-'."""
    lines = ["\t".join(ROPE_TABLE_HEADER)]
    for row in rows:
        lines.append("\t".join("-" if value is None else str(value) for value in row))
    return "\n".join(lines) + "\n"


def parse_rope_table(text: str) -> List[tuple]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or tuple(lines[0].split("\t")) != ROPE_TABLE_HEADER:
        raise LayoutError("rope table is missing its header")
    rows = []
    for line in lines[1:]:
        seq_pos, kind, subject, t, y, x = line.split("\t")
        rows.append((int(seq_pos), kind, None if subject == "-" else int(subject), int(t), int(y), int(x)))
    return rows
