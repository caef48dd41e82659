"""
Versioned CSV tables.

Every table starts with one comment line carrying the schema string and
optional key=value metadata, e.g.
    # schema=aifkit.filter/1; loglik=-401.2; names=alpha_2,alpha_3
followed by a plain pandas CSV body.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import pandas as pd

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """A table does not carry the expected schema or columns."""


def _format_header(schema: str, meta: Optional[Dict[str, object]]) -> str:
    parts = [f"schema={schema}"]
    for key, value in (meta or {}).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        parts.append(f"{key}={value}")
    return "# " + "; ".join(parts) + "\n"


def parse_header(line: str) -> Dict[str, str]:
    if not line.startswith("#"):
        return {}
    meta = {}
    for part in line.lstrip("#").strip().split(";"):
        if "=" in part:
            key, value = part.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def write_table(df: pd.DataFrame, path: Union[str, Path], schema: str,
                meta: Optional[Dict[str, object]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(_format_header(schema, meta))
        df.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {path} ({len(df)} rows)")
    return path


def read_table(path: Union[str, Path], schema: Optional[str] = None,
               required_columns: Iterable[str] = ()) -> Tuple[pd.DataFrame, Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Table not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    meta = parse_header(first)
    if schema is not None and meta.get("schema") != schema:
        raise SchemaError(f"{path}: expected schema '{schema}', found '{meta.get('schema')}'")
    df = pd.read_csv(path, skiprows=1 if first.startswith("#") else 0, float_precision="round_trip")
    for column in required_columns:
        if column not in df.columns:
            raise SchemaError(f"{path}: missing column '{column}'")
    return df, meta
