"""Back-transformed summaries of a fitted hurdle model.

Everything here is post-processing over an immutable :class:`FitResult`:
detection-probability and abundance surfaces on a prediction grid, the
per-gear efficiency table and the scaled annual index series.  Nonlinear
quantities are computed per mixture sample and then summarized, so the
reported means carry no Jensen bias.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from .errors import DegenerateSeriesError, ValidationError
from .inference import FitResult, SubmodelFit
from .mesh import projection_matrix

log = logging.getLogger(__name__)

SURFACE_QUANTITIES = ("p", "abundance", "field_detection", "field_abundance")
AVERAGING = ("grid", "data")


# --- index arithmetic ---------------------------------------------------------


def back_transform(eta1, eta2):
    """``invlogit(eta1) * exp(eta2)``, evaluated on the log scale to avoid overflow."""
    eta1 = np.asarray(eta1, dtype=float)
    eta2 = np.asarray(eta2, dtype=float)
    if not (np.all(np.isfinite(eta1)) and np.all(np.isfinite(eta2))):
        raise ValidationError("back_transform needs finite predictors")
    out = np.exp(log_expit(eta1) + eta2)
    return float(out) if out.ndim == 0 else out


def rms(b) -> float:
    """Root of ``sum(b**2) / (T - 1)``; the T - 1 denominator is deliberate."""
    b = np.asarray(b, dtype=float).ravel()
    if b.size < 2:
        raise DegenerateSeriesError(f"an index series needs at least 2 years, got {b.size}")
    if not np.all(np.isfinite(b)):
        raise DegenerateSeriesError("index series contains non-finite values")
    return math.sqrt(float(b @ b) / (b.size - 1))


def scale_index(b) -> np.ndarray:
    b = np.asarray(b, dtype=float).ravel()
    r = rms(b)
    if r == 0.0:
        raise DegenerateSeriesError("cannot scale an all-zero index series")
    return b / r


def gear_efficiency(eta) -> float:
    """Detection percentage for a gear-level logit predictor."""
    return 100.0 * float(expit(eta))


# --- prediction design --------------------------------------------------------


def prediction_matrix(spec, xy, year: int, species: int = 0, gear: int | None = None,
                      projection=None) -> sp.csr_matrix:
    """Rows mapping the latent vector to predictors at ``xy`` in year index ``year``.

    ``gear=None`` sets the gear effect to zero, i.e. the reference level
    shared by all gears. ``projection`` may be supplied to avoid relocating
    the cells.
    """
    lay = spec.layout()
    xy = np.atleast_2d(np.asarray(xy, dtype=float)).reshape(-1, 2)
    n = len(xy)
    if not 0 <= species < spec.L:
        raise ValidationError(f"species index {species} out of range")
    if not 0 <= year < spec.T:
        raise ValidationError(f"year index {year} out of range")
    blocks = [sp.csr_matrix((np.ones(n), (np.arange(n), np.full(n, species))), shape=(n, lay.size))]
    if gear is not None:
        if not lay.n_gear:
            raise ValidationError("the fit has no gear effects")
        blocks.append(sp.csr_matrix((np.ones(n), (np.arange(n), np.full(n, lay.gear.start + gear))),
                                    shape=(n, lay.size)))
    off = lay.field.start
    if spec.variant == "temporal":
        blocks.append(sp.csr_matrix((np.ones(n), (np.arange(n), np.full(n, off + year))), shape=(n, lay.size)))
    elif spec.spatial:
        A = projection_matrix(spec.mesh, xy) if projection is None else sp.coo_matrix(projection)
        A = sp.coo_matrix(A)
        shift = year * spec.M if spec.variant == "spatiotemporal" else 0
        blocks.append(sp.csr_matrix((A.data, (A.row, off + shift + A.col)), shape=(n, lay.size)))
    return sum(blocks[1:], blocks[0]).tocsr()


def field_matrix(spec, xy, year: int, projection=None) -> sp.csr_matrix:
    """Rows picking only the field contribution at ``xy``."""
    X = prediction_matrix(spec, xy, year, projection=projection).tolil()
    X[:, : spec.layout().field.start] = 0
    return X.tocsr()


def inside_cells(spec, xy) -> tuple[np.ndarray, np.ndarray, sp.csr_matrix | None]:
    """Split cells into (kept indices, skipped indices, projection of kept)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float)).reshape(-1, 2)
    if spec.mesh is None:
        return np.arange(len(xy)), np.zeros(0, dtype=int), None
    A, outside = projection_matrix(spec.mesh, xy, skip_outside=True)
    keep = np.setdiff1d(np.arange(len(xy)), outside)
    return keep, outside, A[keep]


def regular_grid(bounds, resolution_km: float) -> np.ndarray:
    """Cell centres of a regular grid over ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = bounds
    if resolution_km <= 0:
        raise ValidationError("grid resolution must be positive")
    xs = np.arange(x0 + 0.5 * resolution_km, x1, resolution_km)
    ys = np.arange(y0 + 0.5 * resolution_km, y1, resolution_km)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def default_grid(spec, resolution_km: float | None = None) -> np.ndarray:
    """Prediction cells for a spec: mesh vertices, or a regular grid over the mesh."""
    if spec.mesh is None:
        return np.zeros((1, 2))
    if resolution_km is None:
        return np.asarray(spec.mesh.vertices, dtype=float)
    return regular_grid(spec.mesh.hull().bounds, resolution_km)


# --- surfaces -----------------------------------------------------------------


@dataclass
class Surface:
    """Per-cell posterior means and sds for one year."""

    year: int
    x_km: np.ndarray
    y_km: np.ndarray
    values: dict  # quantity -> (mean, sd)
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.x_km)

    def rows(self):
        for q, (mean, sd) in self.values.items():
            for x, y, m, s in zip(self.x_km, self.y_km, mean, sd):
                yield x, y, self.year, q, m, s


def _sample_sd(draws) -> np.ndarray:
    return draws.std(axis=1, ddof=1) if draws.shape[1] > 1 else np.zeros(len(draws))


def predict_surface(fit: FitResult, xy, year, species: int | str = 0, gear=None) -> Surface:
    """Posterior surfaces at grid cells for one survey year.

    ``year`` is a calendar year in ``fit.spec.years``. Cells outside the mesh are
    skipped and counted. Field means are exact projections of the latent
    marginal means; ``p`` and ``abundance`` (``exp(eta2)``) are summarized
    from transformed mixture samples.
    """
    spec = fit.spec
    t = _year_index(spec, year)
    s = _catalog_index(spec.species, species, "species")
    g = None if gear is None else _catalog_index(spec.gears, gear, "gear")
    xy = np.atleast_2d(np.asarray(xy, dtype=float)).reshape(-1, 2)
    keep, outside, A = inside_cells(spec, xy)
    if len(outside):
        log.warning("[predict] %d of %d cells outside the mesh skipped", len(outside), len(xy))
    cells = xy[keep]
    values = {}
    subs = (("p", "field_detection", fit.detection), ("abundance", "field_abundance", fit.abundance))
    for resp, fname, sub in subs:
        if sub is None:
            continue
        X = prediction_matrix(spec, cells, t, s, g, A)
        draws = X @ sub.samples.T  # (cells, S)
        if resp == "p":
            tr = expit(draws)
        else:
            tr = np.exp(draws)
        values[resp] = (tr.mean(axis=1), _sample_sd(tr))
        if spec.variant != "none":
            F = field_matrix(spec, cells, t, A)
            values[fname] = (F @ sub.latent_mean, _sample_sd(F @ sub.samples.T))
    return Surface(int(spec.years[t]), cells[:, 0].copy(), cells[:, 1].copy(), values, outside)


def mean_posterior_sd(fit: FitResult, submodel: str = "detection", xy=None, quantity: str = "field") -> float:
    """Scalar precision measure used when comparing gear subsets.

    ``quantity="field"`` averages the posterior sd of the latent field values,
    the parameters every gear subset shares with the same meaning.
    ``quantity="surface"`` averages the sample sd over cells and years of p
    (detection) or eta2 (abundance) with gear effects held at zero.
    """
    sub = fit.detection if submodel == "detection" else fit.abundance
    if sub is None:
        raise ValidationError(f"fit has no {submodel} submodel")
    spec = fit.spec
    if quantity == "field":
        sl = spec.layout().field
        if sl.stop == sl.start:
            raise ValidationError(f"variant {spec.variant!r} has no latent field")
        return float(np.mean(sub.latent_sd[sl]))
    if quantity != "surface":
        raise ValidationError(f"unknown precision quantity {quantity!r}")
    xy = default_grid(spec) if xy is None else np.atleast_2d(np.asarray(xy, dtype=float))
    keep, _, A = inside_cells(spec, xy)
    sds = []
    for t in range(spec.T):
        draws = prediction_matrix(spec, xy[keep], t, projection=A) @ sub.samples.T
        if submodel == "detection":
            draws = expit(draws)
        sds.append(_sample_sd(draws))
    return float(np.mean(np.concatenate(sds)))


def _year_index(spec, year) -> int:
    try:
        return spec.years.index(int(year))
    except ValueError:
        raise ValidationError(f"year {year} is not in the fitted years {spec.years}") from None


def _catalog_index(catalog, value, what) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= value < len(catalog):
            raise ValidationError(f"{what} index {value} out of range")
        return int(value)
    if value not in catalog:
        raise ValidationError(f"unknown {what} {value!r}")
    return catalog.index(value)


# --- gear table ---------------------------------------------------------------


@dataclass
class GearRow:
    gear: str
    mean: float
    lo: float
    hi: float


@dataclass
class GearEfficiencyTable:
    species: str
    efficiency: list  # GearRow, detection percentage
    effects: list  # GearRow, abundance gear effect on the linear scale

    def rows(self):
        for section, rows in (("gear_efficiency_pct", self.efficiency), ("gear_effect", self.effects)):
            for r in rows:
                yield section, r.gear, r.mean, r.lo, r.hi


def gear_efficiency_summary(fit: FitResult, species: int | str = 0) -> GearEfficiencyTable:
    """Per-gear detection percentage and abundance gear effect with 95% intervals."""
    spec = fit.spec
    if not spec.include_gear_effect:
        raise ValidationError("gear efficiency needs a fit with gear effects")
    s = _catalog_index(spec.species, species, "species")
    lay = spec.layout()
    eff = []
    det = fit.detection
    for j, g in enumerate(spec.gears):
        pct = 100.0 * expit(det.samples[:, s] + det.samples[:, lay.gear.start + j])
        lo, hi = np.percentile(pct, [2.5, 97.5])
        eff.append(GearRow(g, float(pct.mean()), float(lo), float(hi)))
    effects = []
    if fit.abundance is not None:
        ab = fit.abundance
        for j, g in enumerate(spec.gears):
            i = lay.gear.start + j
            lo, hi = ab.latent_interval(i)
            effects.append(GearRow(g, float(ab.latent_mean[i]), lo, hi))
    return GearEfficiencyTable(spec.species[s], eff, effects)


# --- index series -------------------------------------------------------------


@dataclass
class IndexSeries:
    years: tuple
    b: np.ndarray
    b_scaled: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    gaps: tuple = ()

    def rows(self):
        for row in zip(self.years, self.b, self.b_scaled, self.lo95, self.hi95):
            yield row


def index_from_predictors(years, eta1, eta2) -> IndexSeries:
    """Index series from year-averaged predictors, without credible bands."""
    b = np.atleast_1d(back_transform(eta1, eta2))
    bs = scale_index(b)
    return IndexSeries(tuple(years), b, bs, bs.copy(), bs.copy())


def _averaged_draws(spec, sub: SubmodelFit, cells, t, species) -> np.ndarray:
    keep, _, A = inside_cells(spec, cells)
    if not len(keep):
        return None
    X = prediction_matrix(spec, np.asarray(cells)[keep], t, species, projection=A)
    row = np.asarray(X.mean(axis=0)).ravel()
    return sub.samples @ row  # (S,)


def index_series(fit: FitResult, years=None, species: int | str = 0, cells=None,
                 average: str = "grid", data_locations: dict | None = None) -> IndexSeries:
    """Scaled annual index from the averaged detection and abundance predictors.

    Per year the unweighted mean of eta1 and eta2 over the prediction cells
    is back-transformed per mixture sample. ``b`` is the sample mean, the
    scaled series is ``b`` divided by its own RMS, and the 95% band comes
    from scaling each sample path the same way. With ``average="data"``
    the cells for year t are ``data_locations[t]``. Years without cells
    are reported as gaps (NaN) and left out of the scaling.
    """
    spec = fit.spec
    if fit.abundance is None:
        raise ValidationError("the index needs both detection and abundance fits")
    if average not in AVERAGING:
        raise ValidationError(f"average must be one of {AVERAGING}")
    s = _catalog_index(spec.species, species, "species")
    years = tuple(spec.years) if years is None else tuple(int(y) for y in years)
    grid = default_grid(spec) if cells is None else np.atleast_2d(np.asarray(cells, dtype=float))
    n_s = min(len(fit.detection.samples), len(fit.abundance.samples))
    paths = np.full((n_s, len(years)), np.nan)
    gaps = []
    for k, y in enumerate(years):
        if y not in spec.years:
            gaps.append(y)
            continue
        t = spec.years.index(y)
        where = grid if average == "grid" else np.asarray((data_locations or {}).get(y, np.zeros((0, 2))))
        if len(where) == 0:
            gaps.append(y)
            continue
        e1 = _averaged_draws(spec, fit.detection, where, t, s)
        e2 = _averaged_draws(spec, fit.abundance, where, t, s)
        if e1 is None:
            gaps.append(y)
            continue
        paths[:, k] = back_transform(e1[:n_s], e2[:n_s])
    if gaps:
        warnings.warn(f"index years without prediction cells: {gaps}", RuntimeWarning)
    ok = ~np.isnan(paths[0])
    b = np.full(len(years), np.nan)
    bs = np.full(len(years), np.nan)
    lo = np.full(len(years), np.nan)
    hi = np.full(len(years), np.nan)
    b[ok] = paths[:, ok].mean(axis=0)
    bs[ok] = scale_index(b[ok])
    scaled_paths = paths[:, ok] / np.sqrt((paths[:, ok] ** 2).sum(axis=1, keepdims=True) / (ok.sum() - 1))
    lo[ok], hi[ok] = np.percentile(scaled_paths, [2.5, 97.5], axis=0)
    return IndexSeries(years, b, bs, lo, hi, tuple(gaps))


# --- CSV output ---------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_surface_csv(surfaces, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_km", "y_km", "year", "quantity", "mean", "sd"])
        for surf in surfaces:
            for x, y, yr, q, m, s in surf.rows():
                w.writerow([_fmt(x), _fmt(y), yr, q, _fmt(m), _fmt(s)])


def write_index_csv(series: IndexSeries, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "b", "b_scaled", "lo95", "hi95"])
        for yr, *vals in series.rows():
            w.writerow([yr] + [_fmt(v) for v in vals])


def read_index_csv(path) -> IndexSeries:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) if r[k] else np.nan for r in rows])  # noqa: E731
    years = tuple(int(r["year"]) for r in rows)
    gaps = tuple(y for y, v in zip(years, col("b")) if np.isnan(v))
    return IndexSeries(years, col("b"), col("b_scaled"), col("lo95"), col("hi95"), gaps)


def write_gear_table_csv(table: GearEfficiencyTable, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["species", "section", "gear", "mean", "lo95", "hi95"])
        for section, g, m, lo, hi in table.rows():
            w.writerow([table.species, section, g, _fmt(m), _fmt(lo), _fmt(hi)])


def format_gear_table(table: GearEfficiencyTable) -> str:
    """Plain-text block in the 'mean (lo, hi)' style of a results table."""
    lines = [f"Gear efficiency (%) [{table.species}]"]
    lines += [f"  {r.gear:<12} {r.mean:.2f} ({r.lo:.2f}, {r.hi:.2f})" for r in table.efficiency]
    if table.effects:
        lines.append("Gear effects")
        lines += [f"  {r.gear:<12} {r.mean:.2f} ({r.lo:.2f}, {r.hi:.2f})" for r in table.effects]
    return "\n".join(lines)
