"""Survey record ingestion, the hurdle split, and design indexing."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import SchemaError, ValidationError

KM_PER_DEGREE = 111.32

DEFAULT_COLUMNS = {
    "lon": "lon",
    "lat": "lat",
    "year": "year",
    "gear": "gear",
    "species": "species",
    "value": "value",
}


@dataclass(frozen=True)
class HaulRecord:
    """One survey observation in its gear-native unit."""

    lon: float
    lat: float
    year: int
    gear: str
    species: str
    value: float


@dataclass(frozen=True)
class RowError:
    line: int
    reason: str


@dataclass
class ParseResult:
    records: list[HaulRecord]
    rejected: list[RowError] = field(default_factory=list)


@dataclass(frozen=True)
class DetectionTable:
    record_index: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.z)


@dataclass(frozen=True)
class AbundanceTable:
    record_index: np.ndarray
    log_value: np.ndarray

    def __len__(self):
        return len(self.log_value)


@dataclass(frozen=True)
class DesignIndex:
    """Integer catalog indices (0-based) and planar coordinates per record."""

    species: np.ndarray
    gear: np.ndarray
    year: np.ndarray
    x: np.ndarray
    y: np.ndarray
    species_catalog: tuple[str, ...]
    gear_catalog: tuple[str, ...]
    years: tuple[int, ...]

    def __len__(self):
        return len(self.species)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def subset(self, rows) -> "DesignIndex":
        rows = np.asarray(rows)
        return DesignIndex(
            self.species[rows], self.gear[rows], self.year[rows],
            self.x[rows], self.y[rows],
            self.species_catalog, self.gear_catalog, self.years,
        )


def parse_haul_records(
    source: TextIO | str | Path,
    schema: dict[str, str] | None = None,
    delimiter: str = ",",
    species: Sequence[str] | None = None,
    gears: Sequence[str] | None = None,
    year_range: tuple[int, int] | None = None,
) -> ParseResult:
    """Parse delimited survey rows into :class:`HaulRecord` objects.

    ``schema`` maps the canonical field names (lon, lat, year, gear, species,
    value) to column headers in the source. Rows whose numeric fields cannot
    be parsed are skipped and listed in ``ParseResult.rejected`` with their
    1-based line number (the header is line 1). Negative values, unknown
    catalog entries and out-of-range years raise :class:`ValidationError`.
    """
    schema = {**DEFAULT_COLUMNS, **(schema or {})}
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_haul_records(fh, schema, delimiter, species, gears, year_range)

    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("input has no header row") from None
    missing = [col for col in schema.values() if col not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    pos = {key: header.index(col) for key, col in schema.items()}
    species_ok = set(species) if species is not None else None
    gears_ok = set(gears) if gears is not None else None

    records: list[HaulRecord] = []
    rejected: list[RowError] = []
    for line, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            rejected.append(RowError(line, f"expected {len(header)} fields, got {len(row)}"))
            continue
        try:
            lon = float(row[pos["lon"]])
            lat = float(row[pos["lat"]])
            year = int(row[pos["year"]])
            value = float(row[pos["value"]])
        except ValueError as exc:
            rejected.append(RowError(line, f"unparseable numeric: {exc}"))
            continue
        if not all(math.isfinite(v) for v in (lon, lat, value)):
            rejected.append(RowError(line, "non-finite numeric"))
            continue
        gear = row[pos["gear"]].strip()
        spec = row[pos["species"]].strip()
        if value < 0:
            raise ValidationError(f"line {line}: negative value {value}")
        if gears_ok is not None and gear not in gears_ok:
            raise ValidationError(f"line {line}: gear {gear!r} not in catalog")
        if species_ok is not None and spec not in species_ok:
            raise ValidationError(f"line {line}: species {spec!r} not in catalog")
        if year_range is not None and not year_range[0] <= year <= year_range[1]:
            raise ValidationError(f"line {line}: year {year} outside {year_range}")
        records.append(HaulRecord(lon, lat, year, gear, spec, value))
    return ParseResult(records, rejected)


def write_rejected(rejected: Iterable[RowError], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line", "reason"])
        for err in rejected:
            writer.writerow([err.line, err.reason])


def write_haul_records(records: Iterable[HaulRecord], target: TextIO | str | Path) -> None:
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            write_haul_records(records, fh)
        return
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(list(DEFAULT_COLUMNS))
    for r in records:
        writer.writerow([repr(float(r.lon)), repr(float(r.lat)), int(r.year), r.gear, r.species, repr(float(r.value))])


def records_to_csv_text(records: Iterable[HaulRecord]) -> str:
    buf = io.StringIO()
    write_haul_records(records, buf)
    return buf.getvalue()


def split_hurdle(records: Sequence[HaulRecord]) -> tuple[DetectionTable, AbundanceTable]:
    values = np.array([r.value for r in records], dtype=float)
    if np.any(values < 0):
        raise ValidationError("negative response value")
    z = (values > 0).astype(np.int8)
    positive = np.flatnonzero(z)
    detection = DetectionTable(np.arange(len(values)), z)
    abundance = AbundanceTable(positive, np.log(values[positive]))
    return detection, abundance


def recombine_hurdle(detection: DetectionTable, abundance: AbundanceTable) -> np.ndarray:
    """Inverse of :func:`split_hurdle`: zeros where z = 0, exp(log value) elsewhere."""
    values = np.zeros(len(detection))
    values[abundance.record_index] = np.exp(abundance.log_value)
    return values


def project_coordinates(lon, lat, reference_lat: float):
    """Equirectangular projection to km, cosine-corrected at ``reference_lat``."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if np.any(np.abs(lat) >= 89):
        raise ValidationError("latitude too close to a pole for the planar projection")
    x = KM_PER_DEGREE * math.cos(math.radians(reference_lat)) * lon
    y = KM_PER_DEGREE * lat
    return x, y


def unproject_coordinates(x_km, y_km, reference_lat: float):
    lon = np.asarray(x_km, dtype=float) / (KM_PER_DEGREE * math.cos(math.radians(reference_lat)))
    lat = np.asarray(y_km, dtype=float) / KM_PER_DEGREE
    return lon, lat


def mean_latitude(records: Sequence[HaulRecord]) -> float:
    return float(np.mean([r.lat for r in records]))


def build_design_index(
    records: Sequence[HaulRecord],
    species: Sequence[str],
    gears: Sequence[str],
    years: Sequence[int],
    reference_lat: float,
) -> DesignIndex:
    species = tuple(species)
    gears = tuple(gears)
    years = tuple(int(y) for y in years)
    s_pos = {s: i for i, s in enumerate(species)}
    g_pos = {g: i for i, g in enumerate(gears)}
    t_pos = {t: i for i, t in enumerate(years)}
    try:
        s_idx = np.array([s_pos[r.species] for r in records], dtype=int)
        g_idx = np.array([g_pos[r.gear] for r in records], dtype=int)
        t_idx = np.array([t_pos[r.year] for r in records], dtype=int)
    except KeyError as exc:
        raise ValidationError(f"record outside catalog: {exc.args[0]!r}") from None
    x, y = project_coordinates([r.lon for r in records], [r.lat for r in records], reference_lat)
    return DesignIndex(s_idx, g_idx, t_idx, x, y, species, gears, years)
