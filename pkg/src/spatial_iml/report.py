"""Static report emission: SVG choropleths, period comparison and output
contract validation."""

from __future__ import annotations

import csv
import fnmatch
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np
import pandas as pd

from .config import load_schema
from .errors import DataError

# diverging palette: negative -> blue, zero -> near white, positive -> red
_NEG = (33, 102, 172)
_MID = (247, 247, 247)
_POS = (178, 24, 43)
SVG_SIZE = 600
MARGIN = 40


def load_boundaries(path) -> dict:
    """Parse a boundary GeoJSON, reporting the position of syntax errors."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed GeoJSON {path}: {exc.msg} at line {exc.lineno} "
                        f"column {exc.colno} (offset {exc.pos})") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise DataError(f"{path} is not a GeoJSON FeatureCollection")
    return doc


def boundary_shapes(doc: Mapping | None) -> dict[str, dict]:
    shapes = {}
    for feat in (doc or {}).get("features", []):
        key = feat.get("properties", {}).get("district_id")
        if key is not None and feat.get("geometry"):
            shapes[str(key)] = feat["geometry"]
    return shapes


def diverging_color(value: float, vmax: float) -> str:
    """Hex colour for ``value`` on a symmetric scale ``[-vmax, vmax]``."""
    if not math.isfinite(value):
        return "#bdbdbd"
    t = 0.0 if vmax <= 0 else max(-1.0, min(1.0, value / vmax))
    end = _POS if t >= 0 else _NEG
    a = abs(t)
    rgb = [round(m + (e - m) * a) for m, e in zip(_MID, end)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _rings(geom: Mapping) -> list[list]:
    kind = geom.get("type")
    if kind == "Polygon":
        return [geom["coordinates"][0]]
    if kind == "MultiPolygon":
        return [poly[0] for poly in geom["coordinates"]]
    return []


def _bbox(geoms: Sequence[Mapping]) -> tuple[float, float, float, float]:
    xs, ys = [], []
    for g in geoms:
        if g["type"] == "Point":
            xs.append(g["coordinates"][0])
            ys.append(g["coordinates"][1])
        for ring in _rings(g):
            for x, y in ring:
                xs.append(x)
                ys.append(y)
    if not xs:
        return 0.0, 0.0, 1.0, 1.0
    return min(xs), min(ys), max(xs), max(ys)


def choropleth_svg(values: Mapping[str, float], geoms: Mapping[str, Mapping], title: str) -> str:
    """One SVG document; ``geoms`` maps district id to a GeoJSON geometry
    (Point geometries are drawn as circles)."""
    keys = sorted(k for k in values if k in geoms)
    vals = np.array([values[k] for k in keys], dtype=float)
    finite = vals[np.isfinite(vals)]
    vmax = float(np.max(np.abs(finite))) if finite.size else 0.0
    x0, y0, x1, y1 = _bbox([geoms[k] for k in keys])
    span = max(x1 - x0, y1 - y0) or 1.0
    scale = (SVG_SIZE - 2 * MARGIN) / span

    def px(x, y):
        return MARGIN + (x - x0) * scale, SVG_SIZE - MARGIN - (y - y0) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE + 50}" '
        f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE + 50}">',
        f'<title>{_esc(title)}</title>',
        f'<rect width="{SVG_SIZE}" height="{SVG_SIZE + 50}" fill="#ffffff"/>',
        f'<text x="{SVG_SIZE / 2:.1f}" y="22" font-family="sans-serif" font-size="16" '
        f'text-anchor="middle">{_esc(title)}</text>',
    ]
    radius = max(3.0, min(14.0, 0.35 * (SVG_SIZE - 2 * MARGIN) / math.sqrt(max(len(keys), 1))))
    for k, v in zip(keys, vals):
        g = geoms[k]
        color = diverging_color(v, vmax)
        label = f"{_esc(k)}: {v:.4g}"
        if g["type"] == "Point":
            cx, cy = px(*g["coordinates"][:2])
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius:.2f}" fill="{color}" '
                       f'stroke="#333333" stroke-width="0.5"><title>{label}</title></circle>')
        else:
            parts = []
            for ring in _rings(g):
                pts = " L ".join(f"{a:.2f} {b:.2f}" for a, b in (px(x, y) for x, y in ring))
                parts.append(f"M {pts} Z")
            out.append(f'<path d="{" ".join(parts)}" fill="{color}" stroke="#333333" '
                       f'stroke-width="0.5"><title>{label}</title></path>')
    # legend
    ly = SVG_SIZE + 10
    steps = 21
    w = (SVG_SIZE - 2 * MARGIN) / steps
    for s in range(steps):
        t = -1 + 2 * s / (steps - 1)
        out.append(f'<rect x="{MARGIN + s * w:.2f}" y="{ly}" width="{w + 0.5:.2f}" height="12" '
                   f'fill="{diverging_color(t, 1.0)}"/>')
    for x, txt, anchor in ((MARGIN, f"{-vmax:.3g}", "start"), (SVG_SIZE / 2, "0", "middle"),
                           (SVG_SIZE - MARGIN, f"{vmax:.3g}", "end")):
        out.append(f'<text x="{x:.1f}" y="{ly + 28}" font-family="sans-serif" font-size="11" '
                   f'text-anchor="{anchor}">{txt}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def emit_maps(coef_geojson: Mapping, out_dir, boundaries: Mapping | None = None,
              prefix: str = "") -> list[Path]:
    """One SVG per coefficient property ``beta_*`` of an MGWR GeoJSON.

    District shapes come from ``boundaries`` when given; districts missing
    there fall back to their centroid point and are listed in
    ``missing_districts.txt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = coef_geojson["features"]
    shapes = boundary_shapes(boundaries)
    geoms, missing = {}, []
    for f in feats:
        dist = f["properties"]["district_id"]
        if boundaries is not None and dist not in shapes:
            missing.append(dist)
        geoms[dist] = shapes.get(dist, f["geometry"])
    missing_path = out_dir / "missing_districts.txt"
    if missing:
        missing_path.write_text("\n".join(sorted(missing)) + "\n")
    elif missing_path.exists():
        missing_path.unlink()
    terms = sorted({k for f in feats for k in f["properties"] if k.startswith("beta_")})
    written = []
    for term in terms:
        values = {f["properties"]["district_id"]: float(f["properties"][term]) for f in feats}
        name = term[len("beta_"):]
        path = out_dir / f"{prefix}{name}.svg"
        path.write_text(choropleth_svg(values, geoms, f"{prefix}{name} coefficient"))
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# period comparison

def _coef_table(geo: Mapping) -> pd.DataFrame:
    rows = []
    for f in geo["features"]:
        props = f["properties"]
        for k, v in props.items():
            if k.startswith("beta_"):
                rows.append({"district_id": props["district_id"], "term": k[5:], "coef": float(v)})
    return pd.DataFrame(rows, columns=["district_id", "term", "coef"])


def compare_coefficients(geo_a: Mapping, geo_b: Mapping, threshold: float = 0.5,
                         outcome: str = "") -> pd.DataFrame:
    """Per-district deltas ``b - a`` and sign flips across ``+/- threshold``."""
    a, b = _coef_table(geo_a), _coef_table(geo_b)
    da, db = set(a.district_id), set(b.district_id)
    if da != db:
        raise DataError(f"bundles cover different districts: {sorted(da ^ db)}")
    ta, tb = set(a.term), set(b.term)
    if ta != tb:
        raise DataError(f"bundles have different predictor sets: {sorted(ta ^ tb)}")
    m = a.merge(b, on=["district_id", "term"], suffixes=("_a", "_b"))
    m["delta"] = m.coef_b - m.coef_a
    up = (m.coef_a <= -threshold) & (m.coef_b >= threshold)
    down = (m.coef_a >= threshold) & (m.coef_b <= -threshold)
    m["flip"] = np.where(up, "neg_to_pos", np.where(down, "pos_to_neg", ""))
    m.insert(0, "outcome", outcome)
    return m.sort_values(["term", "district_id"]).reset_index(drop=True)[
        ["outcome", "district_id", "term", "coef_a", "coef_b", "delta", "flip"]]


def compare_periods(bundle_a, bundle_b, out_dir, threshold: float = 0.5,
                    boundaries: Mapping | None = None) -> pd.DataFrame:
    """Compare the MGWR surfaces of two report bundles outcome by outcome."""
    bundle_a, bundle_b = Path(bundle_a), Path(bundle_b)
    outs_a = {p.parent.name for p in bundle_a.glob("*/mgwr.geojson")}
    outs_b = {p.parent.name for p in bundle_b.glob("*/mgwr.geojson")}
    if not outs_a or outs_a != outs_b:
        raise DataError(f"bundles have different outcomes: {sorted(outs_a ^ outs_b) or 'none found'}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for outcome in sorted(outs_a):
        ga = json.loads((bundle_a / outcome / "mgwr.geojson").read_text())
        gb = json.loads((bundle_b / outcome / "mgwr.geojson").read_text())
        df = compare_coefficients(ga, gb, threshold, outcome)
        frames.append(df)
        geoms = {f["properties"]["district_id"]: f["geometry"] for f in ga["features"]}
        shapes = boundary_shapes(boundaries)
        geoms.update({k: v for k, v in shapes.items() if k in geoms})
        for term, sub in df.groupby("term", sort=True):
            vals = dict(zip(sub.district_id, sub.delta))
            (out_dir / f"{outcome}_{term}_delta.svg").write_text(
                choropleth_svg(vals, geoms, f"{outcome} {term} change"))
    table = pd.concat(frames, ignore_index=True)
    table.to_csv(out_dir / "compare_deltas.csv", index=False, float_format="%.17g")
    flips = table[table.flip != ""]
    flips.to_csv(out_dir / "flips.csv", index=False, float_format="%.17g")
    return table


# ---------------------------------------------------------------------------
# output contracts

JSON_SCHEMAS = {
    "knockoff_report.json": "knockoff_report.schema.json",
    "gam_summary.json": "gam_summary.schema.json",
    "mgwr.geojson": "mgwr_geojson.schema.json",
}


def csv_header_contracts() -> dict[str, list[str]]:
    return load_schema("csv_headers.json")


def validate_bundle(root) -> list[str]:
    """Check every known output under ``root`` against its contract; returns
    the list of validated files and raises DataError on the first failure."""
    root = Path(root)
    checked = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or ".cache" in path.parts:
            continue
        rel = path.relative_to(root)
        schema = JSON_SCHEMAS.get(path.name)
        if schema:
            try:
                jsonschema.validate(json.loads(path.read_text()), load_schema(schema))
            except (jsonschema.ValidationError, json.JSONDecodeError) as exc:
                raise DataError(f"{rel} violates its schema: {getattr(exc, 'message', exc)}") from None
            checked.append(str(rel))
        elif path.suffix == ".csv":
            header = _csv_header(path)
            expected = _expected_header(path)
            if expected is None:
                continue
            if header[:len(expected)] != expected:
                raise DataError(f"{rel} header {header} does not start with {expected}")
            checked.append(str(rel))
    return checked


def _csv_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


def _expected_header(path: Path) -> list[str] | None:
    contracts = csv_header_contracts()
    name = path.name
    local = f"{path.parent.name}/{name}"
    if local in contracts:
        return contracts[local]
    if name in contracts:
        return contracts[name]
    for pattern, header in contracts.items():
        if "/" in pattern and fnmatch.fnmatch(local, pattern):
            return header
    return None
