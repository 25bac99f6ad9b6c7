import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surveyfusion.data_io import (
    HaulRecord,
    build_design_index,
    parse_haul_records,
    project_coordinates,
    recombine_hurdle,
    split_hurdle,
    unproject_coordinates,
    write_haul_records,
    write_rejected,
)
from surveyfusion.errors import SchemaError, ValidationError

HEADER = "lon,lat,year,gear,species,value\n"


def test_parse_single_row():
    res = parse_haul_records(io.StringIO(HEADER + "3.1,54.2,2009,IBTS,HER,12.5\n"))
    assert res.records == [HaulRecord(3.1, 54.2, 2009, "IBTS", "HER", 12.5)]
    assert res.rejected == []


def test_parse_custom_schema_and_delimiter():
    text = "x;y;yr;survey;sp;catch\n3.1;54.2;2009;IBTS;HER;0\n"
    schema = dict(lon="x", lat="y", year="yr", gear="survey", species="sp", value="catch")
    res = parse_haul_records(io.StringIO(text), schema=schema, delimiter=";")
    assert res.records[0].value == 0.0 and res.records[0].gear == "IBTS"


def test_missing_column_is_schema_error():
    with pytest.raises(SchemaError, match="value"):
        parse_haul_records(io.StringIO("lon,lat,year,gear,species\n1,2,2009,A,B\n"))


def test_negative_value_names_row():
    text = HEADER + "1,54,2009,IBTS,HER,1\n1,54,2009,IBTS,HER,-2\n"
    with pytest.raises(ValidationError, match="line 3"):
        parse_haul_records(io.StringIO(text))


def test_unparseable_rows_rejected_with_line_numbers(tmp_path):
    text = HEADER + "1,54,2009,IBTS,HER,1\n1,abc,2009,IBTS,HER,2\n1,54,20x9,IBTS,HER,2\n2,55,2010,BTS,HER,0\n"
    res = parse_haul_records(io.StringIO(text))
    assert len(res.records) == 2
    assert [e.line for e in res.rejected] == [3, 4]
    side = tmp_path / "rejected.csv"
    write_rejected(res.rejected, side)
    assert side.read_text().splitlines()[1].startswith("3,")


def test_catalog_and_year_checks():
    text = HEADER + "1,54,2009,XX,HER,1\n"
    with pytest.raises(ValidationError, match="gear"):
        parse_haul_records(io.StringIO(text), gears=["IBTS"])
    with pytest.raises(ValidationError, match="year"):
        parse_haul_records(io.StringIO(HEADER + "1,54,2001,A,HER,1\n"), year_range=(2007, 2013))


@pytest.mark.parametrize(
    "counts,total",
    [((1771, 1179, 21599), 24549), ((1235, 829, 10998), 13062)],
)
def test_combined_counts_add_up(counts, total):
    rows = [HEADER]
    for gear, n in zip(("IBTS", "BTS", "AS"), counts):
        rows.extend(f"{1 + i * 1e-4},{55},{2009},{gear},MAC,{i % 3}\n" for i in range(n))
    res = parse_haul_records(io.StringIO("".join(rows)))
    assert len(res.records) == total


def test_write_parse_round_trip():
    recs = [HaulRecord(0.1 * i, 54 + 0.01 * i, 2009 + i % 2, "AS", "SPR", float(i)) for i in range(7)]
    buf = io.StringIO()
    write_haul_records(recs, buf)
    assert parse_haul_records(io.StringIO(buf.getvalue())).records == recs


def _rec(v):
    return HaulRecord(1.0, 55.0, 2010, "IBTS", "HER", v)


def test_split_zero_and_positive():
    det, ab = split_hurdle([_rec(0.0), _rec(5.2)])
    assert list(det.z) == [0, 1]
    assert list(ab.record_index) == [1]
    assert ab.log_value[0] == pytest.approx(1.6487, abs=1e-4)


def test_split_counts_on_fixture():
    values = [0, 1.5, 0, 2.0, 3.0, 0, 0.2, 7.0, 0, 9.9]
    det, ab = split_hurdle([_rec(v) for v in values])
    assert len(det) == 10 and det.z.sum() == 6 and len(ab) == 6
    assert not set(ab.record_index) & set(np.flatnonzero(det.z == 0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 1e6)), min_size=1, max_size=40))
def test_split_round_trip(values):
    det, ab = split_hurdle([_rec(v) for v in values])
    back = recombine_hurdle(det, ab)
    v = np.array(values)
    assert np.all((back == 0) == (v == 0))
    nz = v > 0
    assert np.allclose(back[nz], v[nz], rtol=1e-12, atol=0)


def test_projection_examples():
    assert project_coordinates(0, 0, 0) == (0, 0)
    x, y = project_coordinates(1, 0, 0)
    assert x == pytest.approx(111.32) and y == 0
    for ref in (0.0, 30.0, 56.0):
        x, y = project_coordinates(0, 1, ref)
        assert x == 0 and y == pytest.approx(111.32)


def test_projection_scales_with_reference_latitude():
    x, _ = project_coordinates(1, 60, 60)
    assert x == pytest.approx(111.32 * 0.5)
    lon, lat = unproject_coordinates(*project_coordinates(3.7, 55.2, 55.0), 55.0)
    assert lon == pytest.approx(3.7, rel=1e-14) and lat == pytest.approx(55.2, rel=1e-14)
    with pytest.raises(ValidationError):
        project_coordinates(0, 89.5, 0)


def test_design_index():
    recs = [
        HaulRecord(2.0, 55.0, 2010, "BTS", "HER", 1.0),
        HaulRecord(3.0, 56.0, 2009, "IBTS", "SPR", 0.0),
    ]
    idx = build_design_index(recs, ["HER", "SPR"], ["IBTS", "BTS"], [2009, 2010], 55.0)
    assert list(idx.species) == [0, 1]
    assert list(idx.gear) == [1, 0]
    assert list(idx.year) == [1, 0]
    assert idx.x[0] == pytest.approx(111.32 * math.cos(math.radians(55)) * 2)
    with pytest.raises(ValidationError):
        build_design_index(recs, ["HER"], ["IBTS", "BTS"], [2009, 2010], 55.0)
