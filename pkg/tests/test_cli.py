import csv
import math
from pathlib import Path

import numpy as np
import pytest

from surveyfusion import cli
from surveyfusion.errors import ConvergenceError
from surveyfusion.inference import FitResult
from surveyfusion.model import HurdleModelSpec

SIM = """
[run]
out = sim
seed = 4

[simulate]
width_km = 4
spacing_km = 1
years = 2009-2011
stations = 4
acoustic_repeats = 1
"""

FIT = """
[run]
out = {out}
seed = 0

[data]
path = sim/records.csv
species = MAC
gears = AS, IBTS, BTS
years = 2009-2011
reference_lat = 55

[mesh]
file = sim/mesh.txt

[model]
variant = {variant}
variants = {variants}

[inference]
n_samples = 60

[index_report]
resolution_km = 1.0
"""


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write(d / "sim.ini", SIM)
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    return d


@pytest.fixture(scope="module")
def fitted(workdir):
    cfg = _write(workdir / "fit.ini", FIT.format(out="fit", variant="spatiotemporal", variants=""))
    assert cli.main(["fit", "--config", str(cfg)]) == 0
    return workdir / "fit"


def test_simulate_is_deterministic(workdir):
    cfg = workdir / "sim.ini"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(workdir / "sim2")]) == 0
    a = (workdir / "sim" / "records.csv").read_bytes()
    assert a == (workdir / "sim2" / "records.csv").read_bytes()
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(workdir / "sim3"), "--seed", "5"]) == 0
    assert a != (workdir / "sim3" / "records.csv").read_bytes()
    header = a.decode().splitlines()[0]
    assert header == "lon,lat,year,gear,species,value"


def test_fit_writes_summary(fitted):
    text = (fitted / "summary.txt").read_text()
    for section in ("Detection", "Abundance", "Marginal variance", "Interannual correlation",
                    "Gear efficiency (%):", "Gear effects:", "WAIC total"):
        assert section in text
    for name in ("hyperparameters.csv", "gear_table.csv", "waic.csv", "fit.ini", "mesh.txt",
                 "samples_detection.csv", "latent_abundance.csv"):
        assert (fitted / name).is_file()


def test_fit_rerun_is_byte_identical(workdir, fitted):
    cfg = workdir / "fit.ini"
    assert cli.main(["fit", "--config", str(cfg), "--out", str(workdir / "fit_again")]) == 0
    for name in ("summary.txt", "hyperparameters.csv", "samples_abundance.csv"):
        assert (fitted / name).read_bytes() == (workdir / "fit_again" / name).read_bytes()


def test_saved_fit_round_trip(fitted):
    res = cli.load_fit(fitted)
    assert res.spec.variant == "spatiotemporal" and res.spec.gears == ("AS", "IBTS", "BTS")
    assert res.detection.samples.shape == (60, res.spec.layout().size)


def test_missing_data_file_exit_2(tmp_path, caplog):
    cfg = _write(tmp_path / "bad.ini", FIT.format(out="x", variant="none", variants=""))
    assert cli.main(["fit", "--config", str(cfg)]) == 2
    assert "[data]" in caplog.text and "not found" in caplog.text
    assert not (tmp_path / "x").exists()
    assert cli.main(["fit", "--config", str(tmp_path / "nope.ini")]) == 2


def test_numeric_failure_exit_3(workdir, monkeypatch, caplog):
    def boom(*a, **k):
        raise ConvergenceError("inner Newton did not converge", [1.0])

    monkeypatch.setattr(cli, "fit", boom)
    cfg = _write(workdir / "boom.ini", FIT.format(out="boom", variant="none", variants=""))
    assert cli.main(["fit", "--config", str(cfg)]) == 3
    assert "[inference] numerical failure" in caplog.text


def test_compare_single_variant_rejected(workdir):
    cfg = _write(workdir / "cmp1.ini", FIT.format(out="cmp1", variant="none", variants="none"))
    assert cli.main(["compare", "--config", str(cfg)]) == 2


def test_compare_order_independent(workdir):
    a = _write(workdir / "cmp_a.ini", FIT.format(out="cmp_a", variant="none", variants="none, temporal"))
    b = _write(workdir / "cmp_b.ini", FIT.format(out="cmp_b", variant="none", variants="temporal, none"))
    assert cli.main(["compare", "--config", str(a)]) == 0
    assert cli.main(["compare", "--config", str(b)]) == 0
    ta = (workdir / "cmp_a" / "compare.csv").read_text()
    assert ta == (workdir / "cmp_b" / "compare.csv").read_text()
    rows = list(csv.DictReader(ta.splitlines()))
    assert [r["variant"] for r in rows] == ["none", "temporal"]
    assert sum(int(r["lowest"]) for r in rows) == 1


def test_predict_skips_out_of_hull(workdir, fitted, caplog):
    cfg = _write(workdir / "pred.ini", FIT.format(out="fit", variant="spatiotemporal", variants="")
                 + "bounds = 99, 6099, 105, 6105\n")
    assert cli.main(["predict", "--config", str(cfg), "--out", str(workdir / "pred"), "--fit", str(fitted)]) == 0
    assert "outside the mesh were skipped" in caplog.text
    rows = list(csv.DictReader(open(workdir / "pred" / "surface.csv")))
    assert {r["quantity"] for r in rows} == {"p", "abundance", "field_detection", "field_abundance"}
    assert {int(r["year"]) for r in rows} == {2009, 2010, 2011}
    xs = {float(r["x_km"]) for r in rows}
    assert min(xs) >= 100 and max(xs) <= 104
    assert all(0 < float(r["mean"]) < 1 for r in rows if r["quantity"] == "p")


def test_index_command_on_fit(workdir, fitted):
    cfg = workdir / "fit.ini"
    assert cli.main(["index", "--config", str(cfg), "--out", str(workdir / "idx"), "--fit", str(fitted)]) == 0
    rows = list(csv.DictReader(open(workdir / "idx" / "index.csv")))
    assert [int(r["year"]) for r in rows] == [2009, 2010, 2011]
    scaled = np.array([float(r["b_scaled"]) for r in rows])
    assert float(scaled @ scaled) == pytest.approx(2.0, abs=1e-12)


def test_index_two_year_fixture(tmp_path):
    # temporal fit whose draws put b = (3, 4): p = 0.5 and exp(eta2) = 6, 8
    spec = HurdleModelSpec(("MAC",), ("AS", "IBTS"), (2001, 2002), "temporal")
    p = spec.layout().size
    det = np.zeros((5, p))
    ab = np.zeros((5, p))
    ab[:, spec.layout().field] = [math.log(6.0), math.log(8.0)]
    art = tmp_path / "art"
    art.mkdir()
    subs = [cli._light_submodel(k, spec.latent_labels(), x.mean(0), x.std(0), x) for k, x in
            (("detection", det), ("abundance", ab))]
    cli.save_fit(FitResult(spec, subs[0], subs[1], 0.0, {}), art)
    cfg = _write(tmp_path / "idx.ini", "[run]\nout = out\n")
    assert cli.main(["index", "--config", str(cfg), "--fit", str(art)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "index.csv")))
    assert [float(r["b"]) for r in rows] == pytest.approx([3.0, 4.0], abs=1e-12)
    assert [float(r["b_scaled"]) for r in rows] == pytest.approx([0.6, 0.8], abs=1e-12)


def test_outputs_stay_in_out_dir(tmp_path, workdir):
    d = tmp_path / "iso"
    d.mkdir()
    (d / "sim").symlink_to(workdir / "sim")
    cfg = _write(d / "c.ini", FIT.format(out="only_here", variant="none", variants=""))
    before = {p for p in d.rglob("*") if "only_here" not in p.parts}
    assert cli.main(["fit", "--config", str(cfg)]) == 0
    after = {p for p in d.rglob("*") if "only_here" not in p.parts}
    assert before == after
    assert (d / "only_here" / "summary.txt").is_file()


def test_bad_variant_is_validation_error(tmp_path):
    cfg = _write(tmp_path / "v.ini", "[model]\nvariant = banana\n")
    assert cli.main(["fit", "--config", str(cfg)]) == 2
