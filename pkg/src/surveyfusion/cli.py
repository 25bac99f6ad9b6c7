"""Command-line entry point: fit, compare, simulate, predict and index.

A run is fully described by one INI file. Sections mirror the modules::

    [run]        out, seed, threads
    [data]       path, species, gears, years, reference_lat, delimiter
    [columns]    optional header names for lon, lat, year, gear, species, value
    [mesh]       file | inner_max_edge, outer_extension, outer_max_edge, cutoff
    [model]      variant, variants (compare)
    [priors]     PriorSettings fields
    [inference]  InferenceSettings fields
    [index_report] resolution_km, bounds, average, species, gear
    [simulate]   default_scenario arguments

Relative paths are resolved against the config file's directory. Exit
codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import index_report as ir
from .data_io import mean_latitude, parse_haul_records, project_coordinates, write_haul_records
from .errors import NumericalError, SurveyFusionError, ValidationError
from .inference import FitResult, GridResult, HyperGridPoint, InferenceSettings, SubmodelFit, compare_waic, fit
from .mesh import build_mesh, read_mesh, write_mesh
from .model import VARIANTS, HurdleModelSpec, PriorSettings

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


# --- configuration ---------------------------------------------------------------------


def _list(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(s.strip() for s in text.replace("\n", ",").split(",") if s.strip())


def _years(text: str | None) -> tuple[int, ...]:
    out = []
    for item in _list(text):
        if "-" in item[1:]:
            a, b = item.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(item))
    return tuple(out)


def _typed(cls, section) -> dict:
    """Convert config values to the field types of a dataclass."""
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ValidationError(f"unknown setting {key!r} for {cls.__name__}")
        t = str(kinds[key])
        try:
            out[key] = int(raw) if t == "int" else float(raw)
        except ValueError:
            raise ValidationError(f"setting {key} = {raw!r} is not a number") from None
    return out


@dataclass
class RunConfig:
    base: Path
    out: Path
    seed: int = 0
    threads: int = 1
    data_path: Path | None = None
    species: tuple = ()
    gears: tuple = ()
    years: tuple = ()
    reference_lat: float | None = None
    delimiter: str = ","
    columns: dict = field(default_factory=dict)
    mesh_file: Path | None = None
    mesh_args: dict = field(default_factory=dict)
    variant: str = "spatiotemporal"
    variants: tuple = ()
    priors: PriorSettings = field(default_factory=PriorSettings)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    resolution_km: float | None = None
    bounds: tuple | None = None
    average: str = "grid"
    index_species: str | None = None
    index_gear: str | None = None
    simulate: dict = field(default_factory=dict)

    def require_data(self):
        if self.data_path is None:
            raise ValidationError("[data] path is required")
        if not self.data_path.is_file():
            raise ValidationError(f"data file not found: {self.data_path}")
        if self.mesh_file is not None and not self.mesh_file.is_file():
            raise ValidationError(f"mesh file not found: {self.mesh_file}")


def load_config(path, seed=None, out=None, threads=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse config: {exc}") from None
    base = path.resolve().parent
    get = lambda sec, key, default=None: cp.get(sec, key, fallback=default)  # noqa: E731
    resolve = lambda p: None if not p else (base / p if not Path(p).is_absolute() else Path(p))  # noqa: E731

    cfg = RunConfig(base=base, out=resolve(get("run", "out", "results")))
    cfg.seed = int(get("run", "seed", "0"))
    cfg.threads = int(get("run", "threads", "1"))
    cfg.data_path = resolve(get("data", "path"))
    cfg.species = _list(get("data", "species"))
    cfg.gears = _list(get("data", "gears"))
    cfg.years = _years(get("data", "years"))
    lat = get("data", "reference_lat")
    cfg.reference_lat = float(lat) if lat else None
    cfg.delimiter = get("data", "delimiter", ",")
    if cp.has_section("columns"):
        cfg.columns = dict(cp.items("columns"))
    cfg.mesh_file = resolve(get("mesh", "file"))
    if cp.has_section("mesh"):
        for key in ("inner_max_edge", "outer_extension", "outer_max_edge", "cutoff"):
            if cp.has_option("mesh", key):
                cfg.mesh_args[key] = float(cp.get("mesh", key))
    cfg.variant = get("model", "variant", "spatiotemporal")
    cfg.variants = _list(get("model", "variants"))
    for v in (cfg.variant,) + cfg.variants:
        if v not in VARIANTS:
            raise ValidationError(f"unknown model variant {v!r}; expected one of {VARIANTS}")
    if cp.has_section("priors"):
        cfg.priors = PriorSettings(**_typed(PriorSettings, dict(cp.items("priors"))))
    inf = _typed(InferenceSettings, dict(cp.items("inference"))) if cp.has_section("inference") else {}
    res = get("index_report", "resolution_km")
    cfg.resolution_km = float(res) if res else None
    bounds = _list(get("index_report", "bounds"))
    if bounds:
        if len(bounds) != 4:
            raise ValidationError("[index_report] bounds needs x0, y0, x1, y1 in km")
        cfg.bounds = tuple(float(b) for b in bounds)
    cfg.average = get("index_report", "average", "grid")
    if cfg.average not in ir.AVERAGING:
        raise ValidationError(f"average must be one of {ir.AVERAGING}")
    cfg.index_species = get("index_report", "species")
    cfg.index_gear = get("index_report", "gear")
    if cp.has_section("simulate"):
        cfg.simulate = dict(cp.items("simulate"))

    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = Path(out)
    if threads is not None:
        cfg.threads = threads
    if cfg.threads < 1:
        raise ValidationError("threads must be at least 1")
    inf.setdefault("seed", cfg.seed)
    if seed is not None:
        inf["seed"] = seed
    inf["threads"] = cfg.threads
    cfg.inference = InferenceSettings(**inf)
    return cfg


# --- fit artifacts ---------------------------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v))


def save_fit(result: FitResult, out: Path) -> None:
    """Write the plain-text/CSV form of a fit that predict and index reload."""
    spec = result.spec
    man = configparser.ConfigParser(interpolation=None)
    man["fit"] = {
        "species": ", ".join(spec.species),
        "gears": ", ".join(spec.gears),
        "years": ", ".join(str(y) for y in spec.years),
        "variant": spec.variant,
        "include_gear_effect": str(spec.include_gear_effect),
        "reference_lat": _num(spec.reference_lat),
        "mesh": "mesh.txt" if spec.mesh is not None else "",
        "submodels": ", ".join(m.kind for m in result.submodels()),
    }
    with open(out / "fit.ini", "w", encoding="utf-8") as fh:
        man.write(fh)
    if spec.mesh is not None:
        write_mesh(spec.mesh, out / "mesh.txt")
    for sub in result.submodels():
        with open(out / f"latent_{sub.kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "mean", "sd"])
            for lab, m, s in zip(sub.labels, sub.latent_mean, sub.latent_sd):
                w.writerow([lab, _num(m), _num(s)])
        with open(out / f"samples_{sub.kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(sub.labels)
            for row in sub.samples:
                w.writerow([_num(v) for v in row])


def _light_submodel(kind, labels, mean, sd, samples) -> SubmodelFit:
    grid = GridResult([HyperGridPoint(np.zeros(0), (), 0.0, 1.0)], None, False, 1)
    return SubmodelFit(kind, (), list(labels), None, None, grid, {}, mean, sd, mean[None], sd[None], samples,
                       np.zeros((len(samples), 0)), math.nan, math.nan, 0, "")


def load_fit(directory) -> FitResult:
    """Rebuild a sample-based :class:`FitResult` from ``save_fit`` output.

    Latent marginals are the stored mixture moments; the hyperparameter grid
    is not kept, so only sample-based post-processing is available.
    """
    d = Path(directory)
    man = configparser.ConfigParser(interpolation=None)
    if not man.read(d / "fit.ini", encoding="utf-8"):
        raise ValidationError(f"no fit artifact in {d}")
    f = man["fit"]
    mesh = read_mesh(d / f["mesh"]) if f.get("mesh") else None
    spec = HurdleModelSpec(
        _list(f["species"]), _list(f["gears"]), tuple(int(y) for y in _list(f["years"])), f["variant"],
        mesh=mesh, include_gear_effect=f.get("include_gear_effect") == "True",
        reference_lat=float(f["reference_lat"]),
    )
    subs = {}
    for kind in _list(f["submodels"]):
        with open(d / f"latent_{kind}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        labels = [r["label"] for r in rows]
        if labels != spec.latent_labels():
            raise ValidationError(f"latent_{kind}.csv does not match the fitted model layout")
        mean = np.array([float(r["mean"]) for r in rows])
        sd = np.array([float(r["sd"]) for r in rows])
        with open(d / f"samples_{kind}.csv", newline="") as fh:
            reader = csv.reader(fh)
            if next(reader) != labels:
                raise ValidationError(f"samples_{kind}.csv header does not match the latent labels")
            samples = np.array([[float(v) for v in row] for row in reader])
        subs[kind] = _light_submodel(kind, labels, mean, sd, samples)
    if "detection" not in subs:
        raise ValidationError("fit artifact has no detection submodel")
    return FitResult(spec, subs["detection"], subs.get("abundance"), math.nan, {"variant": spec.variant})


# --- summaries -------------------------------------------------------------------------------


_HYPER_LABELS = (
    ("variance", "Marginal variance, sigma_omega^2", 1.0),
    ("rho", "Interannual correlation, rho (%)", 100.0),
    ("range", "Range (km)", 1.0),
    ("sigma_f", "Gear effect sd, sigma_f", 1.0),
    ("sigma_e", "Nugget sd, sigma_e", 1.0),
)


def _ci(m, lo, hi, scale=1.0) -> str:
    return f"{m * scale:.2f} ({lo * scale:.2f}, {hi * scale:.2f})"


def format_summary(result: FitResult) -> str:
    spec = result.spec
    lines = [
        "Posterior marginal estimates",
        f"variant: {spec.variant}",
        f"species: {', '.join(spec.species)}",
        f"gears: {', '.join(spec.gears)}",
        f"years: {spec.years[0]}-{spec.years[-1]} ({spec.T})",
        f"records: {result.metadata.get('n_records')} (positive {result.metadata.get('n_positive')})",
        "",
    ]
    table = ir.gear_efficiency_summary(result) if spec.include_gear_effect else None
    for sub in result.submodels():
        lines.append(sub.kind.capitalize())
        for key, label, scale in _HYPER_LABELS:
            if key in sub.hyper:
                h = sub.hyper[key]
                lines.append(f"  {label:<36} {_ci(h.mean, h.lo, h.hi, scale)}")
        for i in range(spec.L):
            lo, hi = sub.latent_interval(i)
            lines.append(f"  {'Intercept ' + spec.species[i]:<36} {_ci(sub.latent_mean[i], lo, hi)}")
        if table is not None:
            if sub.kind == "detection":
                lines.append("  Gear efficiency (%):")
                lines += [f"    {r.gear:<34} {_ci(r.mean, r.lo, r.hi)}" for r in table.efficiency]
            else:
                lines.append("  Gear effects:")
                lines += [f"    {r.gear:<34} {_ci(r.mean, r.lo, r.hi)}" for r in table.effects]
        lines.append(f"  {'WAIC':<36} {sub.waic:.2f} (p_eff {sub.p_eff:.2f})")
        lines.append("")
    lines.append(f"WAIC total: {result.waic:.2f}")
    return "\n".join(lines) + "\n"


def write_hyper_csv(result: FitResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["submodel", "parameter", "mean", "lo95", "hi95"])
        for sub in result.submodels():
            for name, h in sub.hyper.items():
                w.writerow([sub.kind, name, _num(h.mean), _num(h.lo), _num(h.hi)])


# --- stages ----------------------------------------------------------------------------------


def _stage(name, func, *args, **kw):
    try:
        return func(*args, **kw)
    except (SurveyFusionError, ArithmeticError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def _read_data(cfg: RunConfig):
    cfg.require_data()
    parsed = parse_haul_records(cfg.data_path, cfg.columns or None, cfg.delimiter,
                                cfg.species or None, cfg.gears or None,
                                (min(cfg.years), max(cfg.years)) if cfg.years else None)
    if parsed.rejected:
        log.warning("[data] %d malformed rows skipped", len(parsed.rejected))
    records = parsed.records
    if not records:
        raise ValidationError("no usable records in the data file")
    log.info("[data] %d records from %s", len(records), cfg.data_path.name)
    species = cfg.species or tuple(sorted({r.species for r in records}))
    gears = cfg.gears or tuple(sorted({r.gear for r in records}))
    years = cfg.years or tuple(sorted({r.year for r in records}))
    return records, species, gears, years


def _mesh_for(cfg: RunConfig, records, reference_lat, variant):
    if variant not in ("spatial", "spatiotemporal") and cfg.mesh_file is None:
        return None
    if cfg.mesh_file is not None:
        mesh = read_mesh(cfg.mesh_file)
    else:
        x, y = project_coordinates([r.lon for r in records], [r.lat for r in records], reference_lat)
        if "inner_max_edge" not in cfg.mesh_args:
            raise ValidationError("[mesh] needs either file or inner_max_edge")
        mesh = build_mesh(np.column_stack([x, y]), **cfg.mesh_args)
    log.info("[mesh] %d nodes, %d triangles", mesh.n_vertices, len(mesh.triangles))
    return mesh


def _spec(cfg, records, species, gears, years, variant, mesh=None):
    lat = cfg.reference_lat if cfg.reference_lat is not None else mean_latitude(records)
    if mesh is None:
        mesh = _mesh_for(cfg, records, lat, variant)
    if variant in ("none", "temporal"):
        mesh = None
    return HurdleModelSpec(species, gears, years, variant, mesh=mesh, reference_lat=lat, priors=cfg.priors)


def _fit(cfg, spec, records) -> FitResult:
    log.info("[inference] fitting %s variant", spec.variant)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = fit(spec, records, cfg.inference)
    for w in caught:
        log.warning("[inference] %s", w.message)
    log.info("[inference] done in %.1fs, WAIC %.2f", res.metadata["runtime_s"], res.waic)
    return res


def _prepare_out(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


# --- commands -----------------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> int:
    records, species, gears, years = _stage("data", _read_data, cfg)
    spec = _stage("model", _spec, cfg, records, species, gears, years, cfg.variant)
    res = _stage("inference", _fit, cfg, spec, records)
    out = _stage("output", _prepare_out, cfg)

    def emit():
        (out / "summary.txt").write_text(format_summary(res), encoding="utf-8")
        write_hyper_csv(res, out / "hyperparameters.csv")
        if spec.include_gear_effect:
            ir.write_gear_table_csv(ir.gear_efficiency_summary(res), out / "gear_table.csv")
        with open(out / "waic.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["submodel", "waic", "p_eff"])
            for sub in res.submodels():
                w.writerow([sub.kind, _num(sub.waic), _num(sub.p_eff)])
            w.writerow(["total", _num(res.waic), ""])
        save_fit(res, out)

    _stage("output", emit)
    log.info("[output] wrote fit to %s", out)
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    variants = tuple(v for v in VARIANTS if v in set(cfg.variants))
    if len(variants) < 2:
        raise StageError("config", ValidationError("compare needs at least two distinct variants in [model] variants"))
    records, species, gears, years = _stage("data", _read_data, cfg)
    lat = cfg.reference_lat if cfg.reference_lat is not None else mean_latitude(records)
    mesh = None
    if any(v in ("spatial", "spatiotemporal") for v in variants):
        mesh = _stage("mesh", _mesh_for, cfg, records, lat, "spatial")
    fits = {}
    for v in variants:
        spec = _stage("model", _spec, cfg, records, species, gears, years, v, mesh)
        fits[v] = _stage("inference", _fit, cfg, spec, records)
    ranking = _stage("inference", compare_waic, fits)
    best = ranking[0][0]
    out = _stage("output", _prepare_out, cfg)

    def emit():
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "waic_detection", "waic_abundance", "waic_total", "lowest"])
            for v in variants:
                f = fits[v]
                ab = f.abundance.waic if f.abundance is not None else 0.0
                w.writerow([v, f"{f.detection.waic:.6f}", f"{ab:.6f}", f"{f.waic:.6f}", int(v == best)])
        lines = ["WAIC comparison (lower is better)"]
        for v in variants:
            mark = "  <- lowest" if v == best else ""
            lines.append(f"  {v:<16} {fits[v].waic:.2f}{mark}")
        (out / "compare.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _stage("output", emit)
    log.info("[output] lowest WAIC: %s", best)
    return EXIT_OK


_SIM_FLOATS = ("width_km", "spacing_km", "rho", "range_km", "reference_lat")
_SIM_INTS = ("acoustic_repeats", "stations")


def _scenario(cfg: RunConfig):
    from .simulate import default_scenario

    kw = {}
    for key, raw in cfg.simulate.items():
        if key in _SIM_FLOATS:
            kw[key] = float(raw)
        elif key in _SIM_INTS:
            kw[key] = int(raw)
        elif key == "years":
            kw[key] = _years(raw)
        elif key == "variant":
            kw[key] = raw
        elif key in ("detection_gear_effects", "abundance_gear_effects"):
            kw[key] = tuple(float(v) for v in _list(raw))
        else:
            raise ValidationError(f"unknown [simulate] setting {key!r}")
    return default_scenario(seed=cfg.seed, **kw)


def cmd_simulate(cfg: RunConfig) -> int:
    from .simulate import simulate_survey

    sc = _stage("config", _scenario, cfg)
    records = _stage("simulate", simulate_survey, sc)
    out = _stage("output", _prepare_out, cfg)

    def emit():
        write_haul_records(records, out / "records.csv")
        write_mesh(sc.mesh, out / "mesh.txt")
        with open(out / "truth.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["submodel", "parameter", "value"])
            for kind, t in (("detection", sc.detection), ("abundance", sc.abundance)):
                for i, b in enumerate(t.beta):
                    w.writerow([kind, f"beta[{sc.species[i]}]", _num(b)])
                for g, e in zip(sc.gears, t.gear_effects):
                    w.writerow([kind, f"gear[{g}]", _num(e)])
                for name in ("sigma_omega", "rho", "kappa") + (("sigma_e",) if kind == "abundance" else ()):
                    w.writerow([kind, name, _num(getattr(t, name))])

    _stage("output", emit)
    log.info("[simulate] %d records (seed %d) written to %s", len(records), sc.seed, out)
    return EXIT_OK


def _fit_dir(cfg: RunConfig, fit_dir) -> Path:
    return Path(fit_dir) if fit_dir else cfg.out


def _cells(cfg: RunConfig, spec):
    if cfg.bounds is not None:
        return ir.regular_grid(cfg.bounds, cfg.resolution_km or 1.0)
    return ir.default_grid(spec, cfg.resolution_km)


def cmd_predict(cfg: RunConfig, fit_dir=None) -> int:
    res = _stage("load", load_fit, _fit_dir(cfg, fit_dir))
    spec = res.spec
    cells = _stage("grid", _cells, cfg, spec)
    surfaces = []
    skipped = 0
    for year in spec.years:
        s = _stage("predict", ir.predict_surface, res, cells, year, cfg.index_species or 0, cfg.index_gear)
        skipped = len(s.skipped)
        surfaces.append(s)
    if skipped:
        log.warning("[predict] %d of %d grid cells outside the mesh were skipped", skipped, len(cells))
    out = _stage("output", _prepare_out, cfg)
    _stage("output", ir.write_surface_csv, surfaces, out / "surface.csv")
    log.info("[predict] %d cells x %d years written", len(cells) - skipped, len(surfaces))
    return EXIT_OK


def cmd_index(cfg: RunConfig, fit_dir=None) -> int:
    res = _stage("load", load_fit, _fit_dir(cfg, fit_dir))
    spec = res.spec
    cells = _stage("grid", _cells, cfg, spec)
    locations = None
    if cfg.average == "data":
        records, *_ = _stage("data", _read_data, cfg)
        x, y = project_coordinates([r.lon for r in records], [r.lat for r in records], spec.reference_lat)
        locations = {}
        for r, xi, yi in zip(records, x, y):
            locations.setdefault(r.year, []).append((xi, yi))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        series = _stage("index", ir.index_series, res, None, cfg.index_species or 0, cells, cfg.average, locations)
    for w in caught:
        log.warning("[index] %s", w.message)
    out = _stage("output", _prepare_out, cfg)
    _stage("output", ir.write_index_csv, series, out / "index.csv")
    log.info("[index] %d years written", len(series.years))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surveyfusion", description="Spatio-temporal hurdle models for multi-gear surveys.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("fit", "fit one model variant and write summaries"),
        ("compare", "fit several variants and rank them by WAIC"),
        ("simulate", "write a synthetic multi-gear survey"),
        ("predict", "posterior surfaces from a saved fit"),
        ("index", "scaled annual index from a saved fit"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", help="override [run] out directory")
        sp.add_argument("--threads", type=int, help="worker threads for the hyperparameter grid")
        if name in ("predict", "index"):
            sp.add_argument("--fit", dest="fit_dir", help="fit artifact directory (default: the output directory)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _configure_logging(level) -> None:
    # one stderr handler on the package logger; repeated calls replace it
    pkg = logging.getLogger("surveyfusion")
    for h in [h for h in pkg.handlers if getattr(h, "_surveyfusion_cli", False)]:
        pkg.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._surveyfusion_cli = True
    pkg.addHandler(handler)
    pkg.setLevel(level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = _stage("config", load_config, args.config, args.seed, args.out, args.threads)
        command = {
            "fit": cmd_fit,
            "compare": cmd_compare,
            "simulate": cmd_simulate,
            "predict": lambda c: cmd_predict(c, args.fit_dir),
            "index": lambda c: cmd_index(c, args.fit_dir),
        }[args.command]
        return command(cfg)
    except StageError as err:
        numeric = isinstance(err.exc, (NumericalError, ArithmeticError))
        code = EXIT_NUMERIC if numeric else EXIT_VALIDATION
        kind = "numerical failure" if numeric else "validation failure"
        log.error("[%s] %s: %s", err.stage, kind, err.exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
