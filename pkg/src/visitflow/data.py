"""Flow-record ingestion and aggregation, plus synthetic data."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .forecast.flowtensor import FlowTensor, iso_weeks, parse_iso_week
from .forecast.train import DataError

FLOW_COLUMNS = ("origin_id", "dest_id", "naics", "week", "visits", "dest_lat", "dest_lon")
SOCIO_COLUMNS = ("unit_id", "health", "education", "crime", "work", "economy", "housing", "lat", "lon")
SOCIAL_VARIABLES = SOCIO_COLUMNS[1:7]

# Three sub-variables per composite, in catalog order.
SUBVARIABLES = {
    "health": ("PPD", "PMD", "FEI"),
    "education": ("HSE", "BHD", "CCB"),
    "crime": ("VCO", "FF", "NID"),
    "work": ("CMM", "EP", "HWP"),
    "economy": ("GDP", "MHI", "HIC"),
    "housing": ("MHV", "HRE", "HSE_spend"),
}


class FormatError(ValueError):
    """Input text does not follow the expected layout."""


class IndustryClass(enum.Enum):
    AUTOMOTIVE = "Automotive"
    CYBERSECURITY = "Cybersecurity"
    TRANSPORT_LOGISTICS = "TransportLogistics"
    UNCLASSIFIED = "Unclassified"

    @classmethod
    def parse(cls, text: str) -> "IndustryClass":
        key = text.strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        for member in cls:
            if member.value.lower() == key or member.name.lower().replace("_", "") == key:
                return member
        raise ValueError(f"unknown industry {text!r}")


NAICS_TABLE: dict[str, IndustryClass] = {
    "336": IndustryClass.AUTOMOTIVE,
    "4231": IndustryClass.AUTOMOTIVE,
    "8111": IndustryClass.AUTOMOTIVE,
    "54151": IndustryClass.CYBERSECURITY,
    "541512": IndustryClass.CYBERSECURITY,
    "541519": IndustryClass.CYBERSECURITY,
    "56162": IndustryClass.CYBERSECURITY,
    "561622": IndustryClass.CYBERSECURITY,
    "541690": IndustryClass.CYBERSECURITY,
    "481": IndustryClass.TRANSPORT_LOGISTICS,
    "482": IndustryClass.TRANSPORT_LOGISTICS,
    "483": IndustryClass.TRANSPORT_LOGISTICS,
    "484": IndustryClass.TRANSPORT_LOGISTICS,
    "485": IndustryClass.TRANSPORT_LOGISTICS,
    "488": IndustryClass.TRANSPORT_LOGISTICS,
    "492": IndustryClass.TRANSPORT_LOGISTICS,
    "493": IndustryClass.TRANSPORT_LOGISTICS,
}


def classify_naics(code: str) -> IndustryClass:
    """Longest listed prefix of ``code`` decides the sector."""
    code = str(code).strip()
    if not code or not code.isdigit():
        raise FormatError(f"NAICS code must be a digit string, got {code!r}")
    for length in range(len(code), 2, -1):
        hit = NAICS_TABLE.get(code[:length])
        if hit is not None:
            return hit
    return IndustryClass.UNCLASSIFIED


@dataclass(frozen=True)
class FlowRecord:
    origin_id: str
    dest_id: str
    naics: str
    week: str
    visits: int
    dest_lat: float
    dest_lon: float


@dataclass
class IngestResult:
    records: list[FlowRecord]
    rejected: list[tuple[int, str]]  # (data row number, reason)
    n_rows: int

    def summary(self) -> str:
        return f"{len(self.records)} accepted, {len(self.rejected)} rejected of {self.n_rows} rows"


def _parse_row(row: dict) -> FlowRecord | str:
    if any(row.get(c) is None or str(row[c]).strip() == "" for c in FLOW_COLUMNS):
        return "empty value"
    naics = row["naics"].strip()
    if not naics.isdigit() or not 3 <= len(naics) <= 6:
        return "malformed naics"
    try:
        parse_iso_week(row["week"])
    except ValueError:
        return "unparseable week"
    try:
        visits_f = float(row["visits"])
        lat, lon = float(row["dest_lat"]), float(row["dest_lon"])
    except ValueError:
        return "malformed value"
    if not (math.isfinite(visits_f) and math.isfinite(lat) and math.isfinite(lon)):
        return "out-of-range"
    if visits_f < 0 or not -90 <= lat <= 90 or not -180 <= lon <= 180:
        return "out-of-range"
    if visits_f != int(visits_f):
        return "malformed value"
    return FlowRecord(row["origin_id"].strip(), row["dest_id"].strip(), naics,
                      row["week"].strip(), int(visits_f), lat, lon)


def ingest(path) -> IngestResult:
    """Read a flow CSV, keeping valid rows in file order and logging the rest."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in FLOW_COLUMNS if c not in header]
        if missing:
            raise FormatError(
                f"{path}: missing columns {missing}; expected header {','.join(FLOW_COLUMNS)}"
            )
        records, rejected, n = [], [], 0
        for n, row in enumerate(reader, 1):
            parsed = _parse_row(row)
            if isinstance(parsed, str):
                rejected.append((n, parsed))
            else:
                records.append(parsed)
    return IngestResult(records, rejected, n)


def unit_of(record: FlowRecord, level: str, crosswalk: dict[str, str] | None = None) -> str:
    if level == "cbg":
        return record.origin_id
    if level == "state":
        if crosswalk is not None:
            try:
                return crosswalk[record.origin_id]
            except KeyError:
                raise DataError(f"crosswalk has no entry for {record.origin_id}") from None
        return record.origin_id[:2]
    raise ValueError(f"level must be 'state' or 'cbg', got {level!r}")


def aggregate(
    records: Iterable[FlowRecord],
    level: str = "cbg",
    industry: IndustryClass = IndustryClass.AUTOMOTIVE,
    crosswalk: dict[str, str] | None = None,
    weeks: Sequence[str] | None = None,
) -> FlowTensor:
    """Sum visits per (unit, week) for one industry into an ``N x 1 x T`` tensor.

    Weeks run continuously from the first to the last observed week unless
    ``weeks`` is given; empty cells become 0 and are counted in
    ``FlowTensor.sparsity``. Unit coordinates are the mean destination
    coordinates of the unit's records.
    """
    picked = [r for r in records if classify_naics(r.naics) == industry]
    if not picked:
        raise DataError(f"no records for industry {industry.value}")
    cells: dict[tuple[str, str], int] = defaultdict(int)
    coords: dict[str, list[float]] = defaultdict(lambda: [0.0, 0.0, 0])
    for r in picked:
        unit = unit_of(r, level, crosswalk)
        cells[(unit, r.week)] += r.visits
        c = coords[unit]
        c[0] += r.dest_lat
        c[1] += r.dest_lon
        c[2] += 1
    if weeks is None:
        ordered = sorted({r.week for r in picked}, key=parse_iso_week)
        y0, w0 = parse_iso_week(ordered[0])
        y1, w1 = parse_iso_week(ordered[-1])
        span = (dt.date.fromisocalendar(y1, w1, 1) - dt.date.fromisocalendar(y0, w0, 1)).days // 7 + 1
        weeks = iso_weeks(ordered[0], span)
    weeks = list(weeks)
    units = sorted(coords)
    col = {w: t for t, w in enumerate(weeks)}
    row = {u: i for i, u in enumerate(units)}
    values = np.zeros((len(units), 1, len(weeks)))
    filled = np.zeros((len(units), len(weeks)), dtype=bool)
    for (unit, week), v in cells.items():
        if week not in col:
            raise DataError(f"week {week} lies outside the requested range")
        values[row[unit], 0, col[week]] = v
        filled[row[unit], col[week]] = True
    xy = np.array([[coords[u][0] / coords[u][2], coords[u][1] / coords[u][2]] for u in units])
    imputed = int((~filled).sum())
    total = filled.size
    sparsity = {"imputed": imputed, "cells": total, "text": f"{imputed}/{total} cells imputed"}
    return FlowTensor(values, units, ["visits"], weeks, xy, sparsity)


def write_flow_csv(records: Iterable[FlowRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(FLOW_COLUMNS)
        for r in records:
            out.writerow([r.origin_id, r.dest_id, r.naics, r.week, r.visits,
                          repr(r.dest_lat), repr(r.dest_lon)])


# ---------------------------------------------------------------------------
# Socioeconomic covariates


def minmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (v - lo) / span


def composite(sub_values, weights=None) -> np.ndarray:
    """Weighted mean of min-max normalized sub-variables (columns of ``sub_values``)."""
    sub = minmax(np.asarray(sub_values, dtype=np.float64))
    k = sub.shape[1]
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or (w < 0).any() or w.sum() == 0:
        raise ValueError("weights must be non-negative, one per sub-variable, not all zero")
    return sub @ (w / w.sum())


@dataclass
class SocioTable:
    unit_ids: list[str]
    values: np.ndarray  # (N, 6) composites in SOCIAL_VARIABLES order
    lat: np.ndarray
    lon: np.ndarray

    def features(self) -> np.ndarray:
        """``[six composites, lat, lon]`` per unit."""
        return np.column_stack([self.values, self.lat, self.lon])

    def reorder(self, unit_ids: Sequence[str]) -> "SocioTable":
        index = {u: i for i, u in enumerate(self.unit_ids)}
        missing = [u for u in unit_ids if u not in index]
        if missing:
            raise DataError(f"socioeconomic table lacks units {missing[:5]}")
        idx = [index[u] for u in unit_ids]
        return SocioTable(list(unit_ids), self.values[idx], self.lat[idx], self.lon[idx])


def read_socioeconomic(path, normalize: bool = False) -> SocioTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SOCIO_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}; expected {','.join(SOCIO_COLUMNS)}")
        rows = list(reader)
    ids = [r["unit_id"].strip() for r in rows]
    vals = np.array([[float(r[c]) for c in SOCIAL_VARIABLES] for r in rows])
    if normalize:
        vals = minmax(vals)
    elif ((vals < 0) | (vals > 1)).any():
        raise DataError("socioeconomic composites must lie in [0, 1]; pass normalize to rescale")
    lat = np.array([float(r["lat"]) for r in rows])
    lon = np.array([float(r["lon"]) for r in rows])
    return SocioTable(ids, vals, lat, lon)


def write_socioeconomic(table: SocioTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SOCIO_COLUMNS)
        for i, u in enumerate(table.unit_ids):
            out.writerow([u, *(repr(float(v)) for v in table.values[i]),
                          repr(float(table.lat[i])), repr(float(table.lon[i]))])


# ---------------------------------------------------------------------------
# Synthetic data

SEASON_PERIOD = 13
INDUSTRY_CODES = {
    IndustryClass.AUTOMOTIVE: ("336111", "423110", "811111"),
    IndustryClass.CYBERSECURITY: ("541512", "541519", "561621"),
    IndustryClass.TRANSPORT_LOGISTICS: ("484110", "488510", "493110"),
}
BASE_LEVEL = {
    IndustryClass.AUTOMOTIVE: 400.0,
    IndustryClass.CYBERSECURITY: 120.0,
    IndustryClass.TRANSPORT_LOGISTICS: 250.0,
}


@dataclass
class SyntheticData:
    records: list[FlowRecord]
    socio: SocioTable
    manifest: dict = field(default_factory=dict)


def synthetic_flow(manifest: dict, unit: int, industry: str, poi: int, week_index: int) -> float:
    """Noise-free generative visit count for one (unit, industry, POI, week)."""
    u = manifest["units"][unit]
    ind = manifest["industries"][industry]
    t = week_index
    trend = 1.0 + u["growth"] * t / manifest["weeks"]
    season = 1.0 + manifest["season_amplitude"] * math.sin(
        2 * math.pi * (t + u["phase"]) / manifest["season_period"])
    return ind["base"] * u["factor"] * ind["poi_share"][poi] * trend * season


def generate_synthetic(
    seed: int = 7,
    n_units: int = 12,
    weeks: int = 60,
    industries: Sequence[IndustryClass] | None = None,
    noise: float = 0.05,
    start_week: str = "2022-W01",
    pois_per_unit: int = 2,
) -> SyntheticData:
    """Planted visitor flows over a jittered grid of units.

    Flow = base x unit factor x POI share x (1 + growth t / T)
    x (1 + a sin(2 pi (t + phase) / 13)) x (1 + noise e), rounded to whole
    visits. Unit growth carries a planted relationship to the covariates::

        growth = 0.6 * geo + 0.15 * (education - 0.5) + 0.3 * geo * (work - 0.5)

    where ``geo`` is the unit's min-max scaled latitude minus 0.5.
    """
    if n_units < 4:
        raise ValueError("n_units must be at least 4")
    if weeks < 20:
        raise ValueError("weeks must be at least 20")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    industries = list(industries or INDUSTRY_CODES)
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(n_units))
    r, c = np.divmod(np.arange(n_units), side)
    lat = 32.0 + 2.5 * r + rng.uniform(-0.5, 0.5, n_units)
    lon = -112.0 + 3.0 * c + rng.uniform(-0.5, 0.5, n_units)
    socio_vals = rng.uniform(0.0, 1.0, size=(n_units, 6))
    geo = minmax(lat) - 0.5
    edu, work = socio_vals[:, 1], socio_vals[:, 3]
    growth = 0.6 * geo + 0.15 * (edu - 0.5) + 0.3 * geo * (work - 0.5)
    factor = rng.uniform(0.5, 1.5, n_units)
    phase = rng.uniform(0.0, SEASON_PERIOD, n_units)
    # state FIPS-like prefixes shared by consecutive triples of units
    ids = [f"{10 + i // 3:02d}{i:03d}{100 + i:06d}1" for i in range(n_units)]

    manifest = {
        "generator": "visitflow.data.generate_synthetic",
        "seed": seed,
        "n_units": n_units,
        "weeks": weeks,
        "start_week": start_week,
        "noise": noise,
        "season_period": SEASON_PERIOD,
        "season_amplitude": 0.3,
        "growth_formula": "0.6*geo + 0.15*(education-0.5) + 0.3*geo*(work-0.5)",
        "units": [
            {"id": ids[i], "lat": float(lat[i]), "lon": float(lon[i]), "factor": float(factor[i]),
             "phase": float(phase[i]), "growth": float(growth[i]), "geo": float(geo[i])}
            for i in range(n_units)
        ],
        "industries": {},
    }
    for ind in industries:
        share = rng.dirichlet(np.ones(pois_per_unit) * 4.0)
        manifest["industries"][ind.value] = {
            "base": BASE_LEVEL[ind],
            "codes": list(INDUSTRY_CODES[ind]),
            "poi_share": [float(s) for s in share],
        }

    labels = iso_weeks(start_week, weeks)
    poi_offsets = rng.uniform(-0.05, 0.05, size=(n_units, len(industries), pois_per_unit, 2))
    poi_codes = rng.integers(0, 3, size=(n_units, len(industries), pois_per_unit))
    eps = rng.standard_normal((n_units, len(industries), pois_per_unit, weeks))
    records = []
    for i in range(n_units):
        for k, ind in enumerate(industries):
            codes = INDUSTRY_CODES[ind]
            for p in range(pois_per_unit):
                dest = f"poi-{i:03d}-{k}-{p}"
                dlat = round(float(lat[i] + poi_offsets[i, k, p, 0]), 6)
                dlon = round(float(lon[i] + poi_offsets[i, k, p, 1]), 6)
                for t in range(weeks):
                    mean = synthetic_flow(manifest, i, ind.value, p, t)
                    v = max(0.0, mean * (1.0 + noise * eps[i, k, p, t]))
                    records.append(FlowRecord(ids[i], dest, codes[poi_codes[i, k, p]], labels[t],
                                              int(round(v)), dlat, dlon))
    socio = SocioTable(ids, socio_vals, lat, lon)
    return SyntheticData(records, socio, manifest)


def write_synthetic(data: SyntheticData, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "flows": d / "flows.csv",
        "socioeconomic": d / "socioeconomic.csv",
        "manifest": d / "synthetic_manifest.json",
    }
    write_flow_csv(data.records, paths["flows"])
    write_socioeconomic(data.socio, paths["socioeconomic"])
    paths["manifest"].write_text(json.dumps(data.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
