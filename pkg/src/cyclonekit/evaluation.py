"""Error metrics, grouped reports and their table / long-format CSV layouts."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
VARIABLES = ("msw", "mslp", "track")
UNITS = {"msw": "m/s", "mslp": "hPa", "track": "km"}
LABELS = {"msw": "MSW", "mslp": "MSLP", "track": "Track"}
TABLE_LEADS = {"msw": (6, 24, 48, 72, 96, 120), "mslp": (6, 24, 48, 72, 96, 120), "track": (6, 24, 48, 72)}
VALID_LEADS = frozenset(range(6, 121, 6))
LONG_COLUMNS = ("basin", "model", "variable", "lead", "year", "mae", "count")
BASELINE_COLUMNS = ("model", "basin", "variable", "lead", "mae")


def mae(predictions, observations) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    o = np.asarray(observations, dtype=np.float64).reshape(-1)
    if p.size == 0 or p.size != o.size:
        raise ContractError(f"need equal, non-empty pairings; got {p.size} predictions and {o.size} observations")
    return float(np.mean(np.abs(p - o)))


def track_error_km(lat1, lon1, lat2, lon2):
    """Haversine great-circle distance on a sphere of radius 6371.0 km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class Cell:
    mae: float
    count: int


def combine(cells: Iterable[Cell]) -> Cell:
    """Count-weighted mean of several cells."""
    cells = list(cells)
    n = sum(c.count for c in cells)
    if n <= 0:
        raise ContractError("cannot combine cells with no samples")
    return Cell(sum(c.mae * c.count for c in cells) / n, n)


class EvalReport:
    """Mean absolute errors keyed by ``(basin, model, variable, lead, year)``; ``year`` may be None."""

    def __init__(self):
        self.rows: dict[tuple, Cell] = {}

    def add(self, basin, model, variable, lead, value, count=1, year=None, warn_duplicate=False):
        if variable not in UNITS:
            raise ContractError(f"unknown variable {variable!r}")
        if not (math.isfinite(value) and value >= 0) or count <= 0:
            raise ContractError(f"invalid cell {model}/{basin}/{variable}/{lead}: mae={value}, count={count}")
        key = (basin, model, variable, int(lead), year)
        if warn_duplicate and key in self.rows:
            log.warning("duplicate row %s: keeping the later value %s", key, value)
        self.rows[key] = Cell(float(value), int(count))

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport()
        out.rows = {**self.rows, **other.rows}
        return out

    def models(self, basin=None) -> list[str]:
        seen = []
        for b, m, *_ in self.rows:
            if (basin is None or b == basin) and m not in seen:
                seen.append(m)
        return seen

    def basins(self) -> list[str]:
        seen = []
        for b, *_ in self.rows:
            if b not in seen:
                seen.append(b)
        return seen

    def overall(self) -> "EvalReport":
        """Collapse the per-year breakdown into all-year cells."""
        return aggregate_report(self, ("basin", "model", "variable", "lead"))

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.rows == other.rows

    def __len__(self):
        return len(self.rows)


KEY_FIELDS = ("basin", "model", "variable", "lead", "year")


def aggregate(records: Iterable[dict], keys: Sequence[str] = KEY_FIELDS) -> EvalReport:
    """Group per-pair absolute errors (``abs_error``) or partial cells (``mae`` + ``count``).

    Fields not in ``keys`` are pooled; pooling across variables with different
    units is refused.
    """
    groups: dict[tuple, list[Cell]] = defaultdict(list)
    units: dict[tuple, set] = defaultdict(set)
    for r in records:
        k = tuple(r.get(f) if f in keys else None for f in KEY_FIELDS)
        cell = Cell(r["abs_error"], 1) if "abs_error" in r else Cell(r["mae"], r.get("count", 1))
        groups[k].append(cell)
        units[k].add(UNITS.get(r["variable"]))
    report = EvalReport()
    for k, cells in groups.items():
        if len(units[k]) > 1:
            raise ContractError(f"group {k} mixes units {sorted(map(str, units[k]))}")
        c = combine(cells)
        # pooled over variables of a single unit: label by that unit's variable
        variable = k[2] if k[2] is not None else next(v for v, u in UNITS.items() if u in units[k])
        report.rows[(k[0], k[1], variable, k[3], k[4])] = c
    return report


def aggregate_report(report: EvalReport, keys: Sequence[str]) -> EvalReport:
    recs = [dict(zip(KEY_FIELDS, k), mae=c.mae, count=c.count) for k, c in report.rows.items()]
    return aggregate(recs, keys)


# ---------------------------------------------------------------- scoring

def score(predictions: Sequence[dict], tracks: dict, model: str = "CycloneMAE",
          persistence_model: str | None = "Persistence") -> EvalReport:
    """Score prediction records against best tracks, per year of t0.

    A record is ``{"cyclone_id", "basin", "t0", "variable", "forecasts": {lead: entry}}``
    as written by the predict stage. With ``persistence_model`` the same
    (t0, lead) pairs are also scored for a forecast that repeats the t0 state.
    """
    recs = []
    for p in predictions:
        track = tracks[p["cyclone_id"]]
        t0 = p["t0"] if isinstance(p["t0"], datetime) else datetime.fromisoformat(p["t0"].replace("Z", "+00:00"))
        k0 = track.index_of(t0)
        var = p["variable"]
        for lead, entry in p["forecasts"].items():
            lead = int(lead)
            try:
                k = track.index_of(t0 + timedelta(hours=lead))
            except ContractError:
                continue
            base = {"basin": p["basin"], "variable": var, "lead": lead, "year": t0.year}
            if var == "track":
                err = track_error_km(entry["lat"], entry["lon"], track.lat[k], track.lon[k])
                pers = track_error_km(track.lat[k0], track.lon[k0], track.lat[k], track.lon[k])
            else:
                obs = track.value(var, k)
                err = abs(entry["value"] - obs)
                pers = abs(track.value(var, k0) - obs)
            recs.append(dict(base, model=model, abs_error=float(err)))
            if persistence_model:
                recs.append(dict(base, model=persistence_model, abs_error=float(pers)))
    return aggregate(recs)


# ---------------------------------------------------------------- CSV layouts

def table_columns() -> list[str]:
    return ["basin", "model"] + [f"{LABELS[v]} {lead}h" for v in VARIABLES for lead in TABLE_LEADS[v]]


def _fmt(x: float, precision: int) -> str:
    return f"{x:.{precision}f}"


def emit_table(report: EvalReport, path=None, precision: int = 1) -> str:
    """Wide table: one row per (basin, model), MSW / MSLP / Track lead columns; blank when absent."""
    cells = report.overall().rows if any(k[4] is not None for k in report.rows) else report.rows
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table_columns())
    for basin in report.basins():
        for model in report.models(basin):
            row = [basin, model]
            for v in VARIABLES:
                for lead in TABLE_LEADS[v]:
                    c = cells.get((basin, model, v, lead, None))
                    row.append("" if c is None else _fmt(c.mae, precision))
            w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_table(source) -> EvalReport:
    """Inverse of :func:`emit_table` (counts are not stored in the table and read back as 1)."""
    text = _text(source)
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    if header[:2] != ["basin", "model"]:
        raise ContractError(f"not a report table: header starts {header[:2]}")
    columns = []
    for h in header[2:]:
        label, lead = h.rsplit(" ", 1)
        var = {lab: v for v, lab in LABELS.items()}.get(label)
        if var is None or not lead.endswith("h"):
            raise ContractError(f"unrecognised column {h!r}")
        columns.append((var, int(lead[:-1])))
    report = EvalReport()
    for r in rows[1:]:
        for (var, lead), cell in zip(columns, r[2:]):
            if cell != "":
                report.add(r[0], r[1], var, lead, float(cell))
    return report


def emit_long(report: EvalReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LONG_COLUMNS)
    for (basin, model, var, lead, year), c in sorted(report.rows.items(), key=_sort_key):
        w.writerow([basin, model, var, lead, "" if year is None else year, repr(c.mae), c.count])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_long(source) -> EvalReport:
    report = EvalReport()
    for r in csv.DictReader(io.StringIO(_text(source))):
        report.add(r["basin"], r["model"], r["variable"], int(r["lead"]), float(r["mae"]), int(r["count"]),
                   None if r["year"] == "" else int(r["year"]))
    return report


def _sort_key(item):
    (basin, model, var, lead, year), _ = item
    return basin, model, VARIABLES.index(var), lead, -1 if year is None else year


def _text(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        return Path(source).read_text(encoding="utf-8")
    return source


def ingest_baselines(source, report: EvalReport | None = None) -> EvalReport:
    """Merge ``model,basin,variable,lead,mae`` rows; bad rows are logged and skipped, duplicates keep the last."""
    report = report if report is not None else EvalReport()
    reader = csv.DictReader(io.StringIO(_text(source)))
    missing = set(BASELINE_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ContractError(f"baseline CSV lacks columns {sorted(missing)}")
    for line, r in enumerate(reader, start=2):
        var = r["variable"].strip().lower()
        try:
            lead = int(r["lead"])
            value = float(r["mae"])
        except ValueError:
            log.warning("baseline line %d rejected: unparsable lead/mae %r/%r", line, r["lead"], r["mae"])
            continue
        if var not in UNITS or lead not in VALID_LEADS:
            log.warning("baseline line %d rejected: unknown variable/lead %r/%r", line, r["variable"], r["lead"])
            continue
        if not (math.isfinite(value) and value >= 0):
            log.warning("baseline line %d rejected: mae %r is not a nonnegative number", line, r["mae"])
            continue
        report.add(r["basin"], r["model"], var, lead, value, warn_duplicate=True)
    return report


def table_to_baselines(report: EvalReport) -> str:
    """Baseline-schema CSV for the all-year cells of a report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BASELINE_COLUMNS)
    for (basin, model, var, lead, year), c in report.rows.items():
        if year is None:
            w.writerow([model, basin, var, lead, repr(c.mae)])
    return buf.getvalue()
