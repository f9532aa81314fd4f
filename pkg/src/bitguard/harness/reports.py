"""Report emission: canonical JSON, schema-checked CSV, plot series.

Serialization is deterministic end to end (sorted keys, fixed separators,
stable column order), so rerunning an experiment with the same config and
seeds reproduces every report file byte for byte.  Wall-clock timings are
the one exception and live in their own sidecar file.
"""

import csv
import json
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

from ..errors import FormatError

# identity and ledger fields lead; everything else is sorted
_PRIORITY = ("config_hash", "stage", "seed", "method", "alpha", "eta",
             "m_tcu", "m_lock", "m_total")


def canonical_json(obj) -> str:
    """Deterministic JSON text; rejects NaN and infinities outright."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False) + "\n"


def load_schema() -> dict:
    raw = resources.files("bitguard").joinpath(
        "schemas/report_schema.json").read_text()
    return json.loads(raw)


def _type_ok(value, spec: str) -> bool:
    for option in spec.split("|"):
        if option == "null" and value is None:
            return True
        if option == "string" and isinstance(value, str):
            return True
        if option == "boolean" and isinstance(value, bool):
            return True
        # bool is an int subclass; it never satisfies the numeric types
        if option == "integer" and isinstance(value, int) \
                and not isinstance(value, bool):
            return True
        if option == "number" and isinstance(value, (int, float)) \
                and not isinstance(value, bool):
            return True
    return False


def validate_rows(rows: List[dict], schema: Optional[dict] = None) -> None:
    """Check every row against the committed per-stage field contract."""
    if schema is None:
        schema = load_schema()
    common, stages = schema["common"], schema["stages"]
    for i, row in enumerate(rows):
        stage = row.get("stage")
        if stage not in stages:
            raise FormatError(f"row {i}: unknown stage {stage!r}")
        expected = {**common, **stages[stage]}
        for name, spec in expected.items():
            if name not in row:
                raise FormatError(f"row {i} ({stage}): missing field {name!r}")
            if not _type_ok(row[name], spec):
                raise FormatError(
                    f"row {i} ({stage}): field {name!r} = {row[name]!r} "
                    f"does not match type {spec!r}")
        extra = set(row) - set(expected)
        if extra:
            raise FormatError(
                f"row {i} ({stage}): unexpected fields {sorted(extra)}")


def _columns(rows: List[dict]) -> List[str]:
    seen = set()
    for row in rows:
        seen.update(row)
    lead = [c for c in _PRIORITY if c in seen]
    return lead + sorted(seen - set(lead))


def write_rows_csv(rows: List[dict], path: str) -> None:
    """One row per dict; every cell is a JSON value so types survive."""
    cols = _columns(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([
                json.dumps(row[c], sort_keys=True, allow_nan=False)
                if c in row else "" for c in cols
            ])


def load_rows_csv(path: str) -> List[dict]:
    """Inverse of write_rows_csv; empty cells mean the field was absent."""
    out: List[dict] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            cols = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        for cells in reader:
            row = {}
            for name, cell in zip(cols, cells):
                if cell != "":
                    row[name] = json.loads(cell)
            out.append(row)
    return out


def write_report(report, out_dir: str) -> Dict[str, str]:
    """Validate and emit report.json, rows.csv, plot series, timings.

    Returns the path of every file written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    validate_rows(report.rows)

    paths: Dict[str, str] = {}
    report_path = out / "report.json"
    report_path.write_text(canonical_json(report.to_json()))
    paths["report"] = str(report_path)

    csv_path = out / "rows.csv"
    write_rows_csv(report.rows, str(csv_path))
    paths["rows"] = str(csv_path)

    series = report.aggregates.get("accuracy_vs_budget")
    if series:
        plot_path = out / "accuracy_vs_budget.json"
        plot_path.write_text(canonical_json(series))
        paths["plots"] = str(plot_path)

    # wall clock differs run to run; keep it away from the stable files
    timings_path = out / "timings.json"
    timings_path.write_text(canonical_json(
        {k: round(v, 6) for k, v in sorted(report.timings.items())}))
    paths["timings"] = str(timings_path)
    return paths
