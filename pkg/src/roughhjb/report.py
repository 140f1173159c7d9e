"""Machine-readable run reports shared by the command-line tools."""
from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from importlib import resources

import numpy as np

SCHEMA_VERSION = "1.0"
#: Fields that legitimately differ between identical runs.
VOLATILE = ("timestamp", "runtime")


def jsonable(obj):
    """Numpy-free, JSON-safe copy; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def gate(name: str, value, threshold, passed: bool, detail: str = "") -> dict:
    return {"name": name, "value": jsonable(value), "threshold": jsonable(threshold),
            "passed": bool(passed), "detail": detail}


def make_report(command: str, config: dict, results: dict, gates: list[dict],
                runtime: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": jsonable(config),
        "results": jsonable(results),
        "gates": gates,
        "status": "pass" if all(g["passed"] for g in gates) else "fail",
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "runtime": jsonable(runtime or {}),
    }


def stable(report: dict) -> dict:
    """The report without its volatile fields, for comparisons."""
    return {k: v for k, v in report.items() if k not in VOLATILE}


def to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def to_csv(report: dict) -> str:
    """Flat ``section,key,value`` rows: gates first, then scalar results."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "key", "value"])
    for g in report["gates"]:
        w.writerow(["gate", g["name"], json.dumps(g["value"])])
        w.writerow(["gate_passed", g["name"], g["passed"]])

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                walk(f"{prefix}.{k}" if prefix else k, obj[k])
        elif not isinstance(obj, list):
            w.writerow(["result", prefix, obj])

    walk("", report["results"])
    w.writerow(["status", "status", report["status"]])
    return buf.getvalue()


def load_schema() -> dict:
    return json.loads(resources.files("roughhjb").joinpath("schemas/report.schema.json").read_text())
