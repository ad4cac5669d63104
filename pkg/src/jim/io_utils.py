"""CSV and JSONL helpers shared by trainer, evaluation and reporting.

CSV dialect: comma-separated, '.' decimal point, one header row, '#'
comment rows. Every file starts with a comment row carrying the run seed
and config hash.
"""

from __future__ import annotations

import json
import os


def format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows, seed=None, cfg_hash=None, extra_comment=None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# seed={seed} config={cfg_hash}\n")
        if extra_comment:
            f.write(f"# {extra_comment}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(format_cell(v) for v in row) + "\n")


def read_csv(path):
    """Returns (columns, rows-as-strings, comments)."""
    comments = []
    columns = None
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif columns is None:
                columns = line.split(",")
            else:
                rows.append(line.split(","))
    return columns or [], rows, comments


def read_csv_dicts(path):
    columns, rows, comments = read_csv(path)
    return [dict(zip(columns, row)) for row in rows], comments


def write_jsonl(path, records, header: dict | None = None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    """Returns (records, header-or-None)."""
    header = None
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if header is None and "header" in obj and len(obj) == 1:
                header = obj["header"]
            else:
                records.append(obj)
    return records, header


def write_json(path, payload: dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
