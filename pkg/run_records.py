"""
QuantumLeak Lab - Run Records Module

This module persists everything an experiment produces: oracle query logs and
attack reports as newline-delimited JSON with a schema header record, and flat
result rows as CSV. Every number in a summary report is read back from here.
"""

import json
import os
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from oracle import QueryDataset

RECORD_VERSION = 1
QUERY_LOG_SCHEMA = "quantumleak-query-log"
REPORT_SCHEMA = "quantumleak-report"


def _header(schema: str) -> Dict:
    return {"schema": schema, "version": RECORD_VERSION}


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def append_records(path: str, schema: str, records: Iterable[Dict]) -> int:
    """
    Append records to an NDJSON file, writing the schema header first when the
    file is new.

    Returns:
        Number of records appended
    """
    lines = [json.dumps(_jsonable(r), sort_keys=True) for r in records]
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    if not new:
        read_header(path, schema)
    with open(path, "a") as f:
        if new:
            f.write(json.dumps(_header(schema), sort_keys=True) + "\n")
        if lines:
            f.write("\n".join(lines) + "\n")
    return len(lines)


def read_header(path: str, schema: str) -> Dict:
    with open(path) as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: line 1: invalid header: {e.msg}") from e
    if header.get("schema") != schema:
        raise ValueError(f"{path}: expected schema '{schema}', found '{header.get('schema')}'")
    if header.get("version") != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported {schema} version {header.get('version')}")
    return header


def read_records(path: str, schema: str) -> List[Dict]:
    """Read all records after the schema header; a torn last line is dropped."""
    read_header(path, schema)
    records = []
    with open(path) as f:
        lines = f.read().splitlines()[1:]
    for lineno, line in enumerate(lines, start=2):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            if lineno == len(lines) + 1:
                print(f"⚠️ {path}: dropping incomplete last record")
                break
            raise ValueError(f"{path}: line {lineno}: {e.msg}") from e
    return records


# ---------------------------------------------------------------------------
# Query logs
# ---------------------------------------------------------------------------

def append_query_log(path: str, data: QueryDataset) -> int:
    records = (
        {"features": data.features[i], "raw": data.raw[i], "t": float(data.t[i]), "round": int(data.round[i])}
        for i in range(len(data))
    )
    return append_records(path, QUERY_LOG_SCHEMA, records)


def read_query_log(path: str, per_round: Optional[int] = None) -> Optional[QueryDataset]:
    """
    Read a query log back into a QueryDataset; only complete rounds are kept so
    an interrupted round is queried again on resume.

    A round is complete when it holds per_round records, or when per_round is
    None and it is as large as the largest round in the log.
    """
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return None
    records = read_records(path, QUERY_LOG_SCHEMA)
    if not records:
        return None
    rounds = np.array([r["round"] for r in records], dtype=int)
    sizes = {r: int(np.sum(rounds == r)) for r in np.unique(rounds)}
    full = per_round if per_round is not None else max(sizes.values())
    keep = [i for i, r in enumerate(rounds) if sizes[r] == full]
    if not keep:
        return None
    data = QueryDataset(
        np.array([records[i]["features"] for i in keep], dtype=float),
        np.array([records[i]["raw"] for i in keep], dtype=float),
        np.array([records[i]["t"] for i in keep], dtype=float),
        rounds[keep],
    )
    return data


def trim_query_log(path: str, per_round: int) -> Optional[QueryDataset]:
    """
    Drop the records of incomplete rounds from a query log so resumed rounds are
    appended after complete ones only. Returns the complete rounds.
    """
    data = read_query_log(path, per_round)
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return data
    kept = 0 if data is None else len(data)
    with open(path) as f:
        lines = [line for line in f.read().splitlines()[1:] if line.strip()]
    if kept == len(lines):
        return data
    print(f"⚠️ {path}: discarding {len(lines) - kept} records of an interrupted round")
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        os.remove(tmp)
    append_records(tmp, QUERY_LOG_SCHEMA, [])
    if data is not None:
        append_query_log(tmp, data)
    os.replace(tmp, path)
    return data


# ---------------------------------------------------------------------------
# Reports and result rows
# ---------------------------------------------------------------------------

def write_report(path: str, report: Dict) -> str:
    """
    Write an attack report once.

    Raises:
        FileExistsError: when the report already exists
    """
    with open(path, "x") as f:
        f.write(json.dumps(_header(REPORT_SCHEMA), sort_keys=True) + "\n")
        f.write(json.dumps(_jsonable(report), sort_keys=True) + "\n")
    return path


def read_report(path: str) -> Dict:
    records = read_records(path, REPORT_SCHEMA)
    if len(records) != 1:
        raise ValueError(f"{path}: expected one report record, found {len(records)}")
    return records[0]


def append_result_row(path: str, row: Dict, columns: List[str]) -> str:
    """Append one CSV row with a fixed column order; the header is written once."""
    missing = [c for c in columns if c not in row]
    if missing:
        raise ValueError(f"Result row is missing columns: {', '.join(missing)}")
    extra = [c for c in row if c not in columns]
    if extra:
        raise ValueError(f"Result row has unknown columns: {', '.join(extra)}")
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    pd.DataFrame([row], columns=columns).to_csv(path, mode="a", header=new, index=False)
    return path
