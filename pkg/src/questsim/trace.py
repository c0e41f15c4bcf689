"""Run traces and their canonical JSON / per-family CSV exports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

FORMAT_VERSION = 1

# fixed column order per record family; also the CSV headers
FAMILIES: dict[str, tuple[str, ...]] = {
    "schedule": ("time_start", "time_end", "pcpu", "sandbox", "vcpu", "job", "foreground"),
    "job": ("time", "sandbox", "pcpu", "vcpu", "job", "compute", "finished"),
    "translation": ("time", "sandbox", "isn", "gva", "gpa", "hpa", "access", "outcome"),
    "io": ("time", "sandbox", "isn", "kind", "target", "detail", "outcome", "value"),
    "irq": ("time", "irq_line", "destinations"),
    "trap": ("time", "sandbox", "kind", "isn", "detail", "resolution", "cost_ns", "charged_vcpu"),
    "violation": ("time", "sandbox", "kind", "detail", "action"),
    "channel": ("time", "id", "a", "b", "hpa_first", "n_pages", "gpa_a", "gpa_b", "perms_a", "perms_b"),
    "fault": ("time", "sandbox", "kind", "target", "outcome", "contained"),
}

_INT_FIELDS = {
    "time_start", "time_end", "pcpu", "sandbox", "time", "compute", "finished", "isn", "gva", "gpa",
    "hpa", "value", "irq_line", "cost_ns", "id", "a", "b", "hpa_first", "n_pages", "gpa_a", "gpa_b",
}
_BOOL_FIELDS = {"foreground", "contained"}


class Trace:
    def __init__(self, meta: dict | None = None, records: dict | None = None, counters: dict | None = None):
        self.meta = meta or {}
        self.records: dict[str, list[dict]] = {f: [] for f in FAMILIES}
        if records:
            if not isinstance(records, dict):
                raise ValueError("records must map family names to row lists")
            for fam, rows in records.items():
                if fam not in FAMILIES:
                    raise ValueError(f"unknown record family {fam!r}")
                self.records[fam] = list(rows)
        self.counters = counters or {}

    def add(self, family: str, **fields) -> dict:
        rec = {k: fields.get(k) for k in FAMILIES[family]}
        self.records[family].append(rec)
        return rec

    def __len__(self) -> int:
        return sum(len(v) for v in self.records.values())

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {"meta": self.meta, "records": self.records, "counters": self.counters}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Trace":
        if not isinstance(d, dict):
            raise ValueError("a trace is a JSON object with meta, records and counters")
        return cls(d.get("meta"), d.get("records"), d.get("counters"))

    @classmethod
    def from_json(cls, text: str) -> "Trace":
        return cls.from_dict(json.loads(text))

    # -- CSV ----------------------------------------------------------------

    def write_csv(self, directory: str | Path) -> list[Path]:
        """One ``<family>.csv`` per record family, plus ``meta.json`` and ``counters.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for fam, cols in FAMILIES.items():
            path = d / f"{fam}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for rec in self.records[fam]:
                    w.writerow([_csv_cell(rec.get(c)) for c in cols])
            written.append(path)
        for name, obj in (("meta", self.meta), ("counters", self.counters)):
            path = d / f"{name}.json"
            path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
            written.append(path)
        return written

    @classmethod
    def from_csv(cls, directory: str | Path) -> "Trace":
        d = Path(directory)
        records = {}
        for fam, cols in FAMILIES.items():
            path = d / f"{fam}.csv"
            if not path.exists():
                continue
            with path.open(newline="") as fh:
                rows = list(csv.DictReader(fh))
            records[fam] = [{c: _parse_cell(c, r.get(c, "")) for c in cols} for r in rows]
        meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
        counters = json.loads((d / "counters.json").read_text()) if (d / "counters.json").exists() else {}
        return cls(meta, records, counters)


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def _parse_cell(col: str, s: str):
    if s == "":
        return None
    if col in _BOOL_FIELDS:
        return s == "true"
    if col == "destinations":
        return [int(x) for x in s.split(";")]
    if col in _INT_FIELDS:
        try:
            return int(s)
        except ValueError:
            return s
    return s


def export(trace: Trace, fmt: str, path: str | Path | None = None):
    """Export as ``json`` (returns the text, writes it if ``path``) or ``csv`` (writes a directory)."""
    if fmt == "json":
        text = trace.to_json()
        if path is not None:
            Path(path).write_text(text)
        return text
    if fmt == "csv":
        if path is None:
            raise ValueError("csv export needs a directory")
        return trace.write_csv(path)
    raise ValueError(f"unknown format {fmt!r}")


def load_trace(path: str | Path) -> Trace:
    p = Path(path)
    if p.is_dir():
        return Trace.from_csv(p)
    return Trace.from_json(p.read_text())
