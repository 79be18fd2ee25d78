import json

import numpy as np
import pandas as pd
import pytest

from spatial_iml.errors import DataError
from spatial_iml.report import (choropleth_svg, compare_coefficients, compare_periods,
                                diverging_color, emit_maps, load_boundaries, validate_bundle)


def coef_geojson(values: dict[str, dict[str, float]]) -> dict:
    """Minimal MGWR-style GeoJSON: ``values[district][term]``."""
    feats = []
    for i, (dist, terms) in enumerate(sorted(values.items())):
        props = {"district_id": dist}
        props.update({f"beta_{t}": v for t, v in terms.items()})
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": [i, i % 3]},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats,
            "metadata": {"kernel": "bisquare", "criterion": "AICc", "bandwidths": {"no2": 5},
                         "converged": True, "iterations": 3}}


def square(x, y):
    return {"type": "Polygon", "coordinates": [[[x, y], [x + 1, y], [x + 1, y + 1], [x, y + 1], [x, y]]]}


def test_diverging_endpoints():
    assert diverging_color(1.0, 1.0) == "#b2182b"
    assert diverging_color(-1.0, 1.0) == "#2166ac"
    assert diverging_color(0.0, 1.0) == "#f7f7f7"
    assert diverging_color(5.0, 1.0) == "#b2182b"
    assert diverging_color(float("nan"), 1.0) == "#bdbdbd"


def test_choropleth_colors_and_determinism():
    geoms = {"a": square(0, 0), "b": square(1, 0)}
    svg = choropleth_svg({"a": -1.0, "b": 1.0}, geoms, "no2")
    assert 'fill="#2166ac"' in svg and 'fill="#b2182b"' in svg
    assert svg == choropleth_svg({"b": 1.0, "a": -1.0}, geoms, "no2")


def test_emit_maps_missing_districts(tmp_path):
    geo = coef_geojson({"E1": {"no2": 0.5}, "E2": {"no2": -0.2}, "E3": {"no2": 0.1}})
    bounds = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": square(0, 0), "properties": {"district_id": "E1"}},
        {"type": "Feature", "geometry": square(1, 0), "properties": {"district_id": "E2"}}]}
    paths = emit_maps(geo, tmp_path, bounds)
    assert [p.name for p in paths] == ["no2.svg"]
    assert (tmp_path / "missing_districts.txt").read_text() == "E3\n"
    first = paths[0].read_bytes()
    emit_maps(geo, tmp_path, bounds)
    assert paths[0].read_bytes() == first
    # all districts covered: the missing list disappears
    emit_maps(geo, tmp_path, None)
    assert not (tmp_path / "missing_districts.txt").exists()


def test_malformed_geojson_position(tmp_path):
    p = tmp_path / "b.geojson"
    p.write_text('{"type": "FeatureCollection",\n "features": [,]}')
    with pytest.raises(DataError, match=r"line 2 column 15"):
        load_boundaries(p)
    p.write_text('{"type": "Feature"}')
    with pytest.raises(DataError, match="FeatureCollection"):
        load_boundaries(p)


def test_compare_identical_and_flip():
    a = coef_geojson({"E1": {"no2": 0.8, "pm25": 0.1}, "E2": {"no2": -0.7, "pm25": 0.2}})
    same = compare_coefficients(a, a)
    assert np.all(same.delta == 0) and np.all(same.flip == "")
    b = coef_geojson({"E1": {"no2": -0.9, "pm25": 0.1}, "E2": {"no2": -0.7, "pm25": 0.6}})
    df = compare_coefficients(a, b, threshold=0.5)
    row = df[(df.district_id == "E1") & (df.term == "no2")].iloc[0]
    assert row.flip == "pos_to_neg"
    assert row.delta == pytest.approx(-1.7)
    # crossing zero without clearing the threshold is not a flip
    assert set(df.flip) == {"", "pos_to_neg"}


def test_compare_mismatch_raises():
    a = coef_geojson({"E1": {"no2": 0.8}, "E2": {"no2": 0.1}})
    with pytest.raises(DataError, match="different districts"):
        compare_coefficients(a, coef_geojson({"E1": {"no2": 0.8}, "E3": {"no2": 0.1}}))
    with pytest.raises(DataError, match="different predictor"):
        compare_coefficients(a, coef_geojson({"E1": {"pm25": 0.8}, "E2": {"pm25": 0.1}}))


def test_compare_periods_bundles(tmp_path):
    for name, v in (("a", 0.8), ("b", -0.8)):
        d = tmp_path / name / "o_y"
        d.mkdir(parents=True)
        (d / "mgwr.geojson").write_text(json.dumps(coef_geojson({"E1": {"no2": v}, "E2": {"no2": 0.0}})))
    df = compare_periods(tmp_path / "a", tmp_path / "b", tmp_path / "cmp")
    assert list(df.flip) == ["pos_to_neg", ""]
    flips = pd.read_csv(tmp_path / "cmp" / "flips.csv")
    assert len(flips) == 1 and flips.district_id[0] == "E1"
    assert (tmp_path / "cmp" / "o_y_no2_delta.svg").exists()
    (tmp_path / "c").mkdir()
    with pytest.raises(DataError, match="different outcomes"):
        compare_periods(tmp_path / "a", tmp_path / "c", tmp_path / "cmp2")


def test_validate_bundle_schema_violation(tmp_path):
    d = tmp_path / "o_y"
    d.mkdir()
    good = coef_geojson({"E1": {"intercept": 1.0, "no2": 0.8}})
    good["features"][0]["properties"]["residual"] = 0.1
    (d / "mgwr.geojson").write_text(json.dumps(good))
    assert validate_bundle(tmp_path) == ["o_y/mgwr.geojson"]
    bad = dict(good, metadata={"kernel": "bisquare"})
    (d / "mgwr.geojson").write_text(json.dumps(bad))
    with pytest.raises(DataError, match="violates its schema"):
        validate_bundle(tmp_path)
