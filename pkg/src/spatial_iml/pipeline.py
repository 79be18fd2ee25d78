"""Stage orchestration with content-hash caching.

Each stage's cache key hashes its own settings together with the keys of the
stages it consumes, so changing, say, the GAM grid reruns only the GAM stages
and leaves the Rashomon ensemble untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import __version__
from .config import PipelineConfig
from .datastore import CsvSchema, aggregate_by_district, load_csv, standardize, synth_medsat
from .errors import ConfigError, SpatialImlError
from .gam import fit_global_gam, fit_local_gams, global_shape_table, shape_grid, sign_summary, write_json
from .gbt import Hyperparams, sample_rashomon, tune_hyperparams
from .importance import ensemble_importance, prune_correlated
from .knockoff import run_knockoffs
from .mgwr import fit_mgwr, region_candidates, write_geojson
from .report import emit_maps, load_boundaries, validate_bundle

logger = logging.getLogger(__name__)

STAGES = ("ingest", "knockoff", "tune", "rashomon", "importance", "prune", "aggregate",
          "global-gam", "mgwr", "local-gam", "report")


def _hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageArtifact:
    stage: str
    scope: str
    input_hash: str
    outputs: list[str] = field(default_factory=list)
    seconds: float = 0.0
    cached: bool = False

    def as_dict(self) -> dict:
        return {"stage": self.stage, "scope": self.scope, "input_hash": self.input_hash,
                "outputs": self.outputs, "seconds": round(self.seconds, 3), "cached": self.cached}


class StageError(SpatialImlError):
    """Wraps a failure with the stage it happened in."""

    def __init__(self, stage: str, scope: str, cause: BaseException):
        super().__init__(f"stage {stage}{'/' + scope if scope else ''} failed: {cause}")
        self.stage, self.scope, self.cause = stage, scope, cause
        self.exit_code = getattr(cause, "exit_code", 1)


class StageRunner:
    def __init__(self, out_dir: Path, force: bool = False, echo: bool = True):
        self.out_dir = Path(out_dir)
        self.cache_dir = self.out_dir / ".cache"
        self.force = force
        self.echo = echo
        self.artifacts: list[StageArtifact] = []

    def run(self, stage: str, scope: str, params: Any, upstream: list[str],
            compute: Callable[[], Any], emit: Callable[[Any], list[Path]] | None = None):
        key = _hash({"stage": stage, "scope": scope, "params": params, "upstream": upstream,
                     "version": __version__})
        stem = f"{stage}{'-' + scope if scope else ''}"
        path = self.cache_dir / f"{stem}-{key[:20]}.pkl"
        t0 = time.perf_counter()
        cached = path.exists() and not self.force
        try:
            if cached:
                with open(path, "rb") as fh:
                    result = pickle.load(fh)
            else:
                result = compute()
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                with open(tmp, "wb") as fh:
                    pickle.dump(result, fh, protocol=pickle.HIGHEST_PROTOCOL)
                os.replace(tmp, path)
                for old in self.cache_dir.glob(f"{stem}-*.pkl"):
                    if old != path and old.name[len(stem) + 1:].count("-") == 0:
                        old.unlink()
            outputs = emit(result) if emit else []
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, scope, exc) from exc
        art = StageArtifact(stage, scope, key, [str(Path(p).relative_to(self.out_dir)) for p in outputs],
                            time.perf_counter() - t0, cached)
        self.artifacts.append(art)
        if self.echo:
            status = "cached" if cached else "ran"
            print(f"[{status:>6}] {stem:<28} {art.seconds:8.2f}s", file=sys.stderr)
        return result, key


def _write_csv(df, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def _json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, obj)
    return path


def _clean(obj):
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_pipeline(cfg: PipelineConfig, force: bool = False, until: str = "report",
                 echo: bool = True, outcomes: list[str] | None = None) -> dict:
    """Run the stages in order up to and including ``until``.

    Returns a dict with the in-memory results per outcome and the stage
    artifacts. Failures raise :class:`StageError`; the error is also written
    to ``error.json`` in the output directory and earlier outputs are kept.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; choose from {STAGES}")
    stop = STAGES.index(until)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    err_path = out / "error.json"
    runner = StageRunner(out, force, echo)
    try:
        results = _run(cfg, runner, stop, outcomes)
    except StageError as exc:
        _json(err_path, {"stage": exc.stage, "scope": exc.scope,
                         "error": type(exc.cause).__name__, "message": str(exc.cause),
                         "exit_code": exc.exit_code})
        _json(out / ".cache" / "run_log.json", [a.as_dict() for a in runner.artifacts])
        raise
    if err_path.exists():
        err_path.unlink()
    _json(out / ".cache" / "run_log.json", [a.as_dict() for a in runner.artifacts])
    results["artifacts"] = runner.artifacts
    return results


def _run(cfg: PipelineConfig, runner: StageRunner, stop: int, only_outcomes) -> dict:
    out = cfg.output_dir
    seed = int(cfg["seed"])
    data = cfg.section("data")

    # ---- ingest ------------------------------------------------------------
    if data.get("csv"):
        csv_path = cfg.path(data["csv"])
        ingest_params = {"csv": file_digest(csv_path), "schema": data.get("schema") or {}}
    else:
        ingest_params = {"synth": data["synth"], "synth_seed": data.get("synth_seed", 0)}

    def do_ingest():
        if data.get("csv"):
            d = load_csv(csv_path, CsvSchema.from_mapping(data.get("schema") or {}))
            truth = None
        else:
            d, gt = synth_medsat(data["synth"], int(data.get("synth_seed", 0)))
            truth = json.loads(gt.to_json())
        ds, scaling = standardize(d)
        return {"raw": d, "std": ds, "scaling": scaling, "truth": truth}

    def emit_ingest(r):
        d, ds = r["raw"], r["std"]
        paths = [_json(out / "ingest_report.json", {
            "n": d.n, "p": d.p, "m": d.m, "districts": len(d.districts),
            "dropped_rows": int(d.dropped_rows), "constant_features": list(ds.constant_features),
            "features": list(d.feature_names), "outcomes": list(d.outcome_names),
            "year": d.year})]
        if r["truth"] is not None:
            paths.append(_json(out / "synth_truth.json", r["truth"]))
        return paths

    ing, h_ing = runner.run("ingest", "", ingest_params, [], do_ingest, emit_ingest)
    results: dict[str, Any] = {"ingest": ing, "outcomes": {}}
    if stop == 0:
        return results
    d, ds = ing["raw"], ing["std"]
    outcomes = only_outcomes or cfg["outcomes"] or list(d.outcome_names)
    unknown = [o for o in outcomes if o not in d.outcome_names]
    if unknown:
        raise ConfigError(f"invalid config field outcomes: unknown outcome(s) {unknown}")
    force_include = list(cfg["force_include"])
    bad = [f for f in force_include if f not in d.feature_names]
    if bad:
        raise ConfigError(f"invalid config field force_include: unknown feature(s) {bad}")
    candidates = [f for f in d.feature_names if f not in ds.constant_features]
    groups = d.district_id

    for outcome in outcomes:
        res: dict[str, Any] = {}
        results["outcomes"][outcome] = res
        odir = out / outcome
        y = np.asarray(d.outcome(outcome), dtype=float)

        # ---- knockoff --------------------------------------------------------
        kcfg = cfg.section("knockoff")

        def do_knockoff():
            X = ds.feature_matrix(candidates)
            r = run_knockoffs(X, y, candidates, kcfg["q"], kcfg["statistic"], seed, kcfg["plus"],
                              kcfg["q_values"], groups if kcfg["q_values"] else None)
            chosen = list(r.selected_names)
            fallback = False
            if len(chosen) < kcfg["min_selected"]:
                fallback = True
                order = sorted(range(len(candidates)), key=lambda j: (-r.W[j], candidates[j]))
                for j in order:
                    if len(chosen) >= kcfg["min_selected"]:
                        break
                    if candidates[j] not in chosen:
                        chosen.append(candidates[j])
                logger.warning("%s: knockoffs kept %d features; topped up to %d by W",
                               outcome, len(r.selected), len(chosen))
            extra = [f for f in force_include if f not in chosen]
            modeled = [f for f in candidates if f in set(chosen) | set(extra)]
            return {"result": r, "modeled": modeled, "fallback": fallback, "forced": extra}

        def emit_knockoff(r):
            rep = r["result"].to_report()
            rep.update({"modeled": r["modeled"], "fallback": r["fallback"],
                        "force_included": r["forced"]})
            return [_json(odir / "knockoff_report.json", _clean(rep))]

        ko, h_ko = runner.run("knockoff", outcome, {"knockoff": kcfg, "force": force_include,
                                                   "seed": seed}, [h_ing], do_knockoff, emit_knockoff)
        res["knockoff"] = ko
        if stop == 1:
            continue
        modeled = ko["modeled"]
        d_sel = d.select_features(modeled)

        # ---- tune ------------------------------------------------------------
        tcfg = cfg.section("tune")

        def do_tune():
            return tune_hyperparams(d_sel, outcome, tcfg["budget"], seed,
                                    space={k: tuple(v) for k, v in tcfg["space"].items()},
                                    n_folds=tcfg["n_folds"], test_frac=tcfg["test_frac"])

        hp, h_tune = runner.run("tune", outcome, {"tune": tcfg, "seed": seed}, [h_ko], do_tune,
                                lambda hp: [_json(odir / "hyperparams.json", _clean(
                                    {**hp.as_dict(), "cv_r2": hp.cv_score}))])
        res["hyperparams"] = hp
        if stop == 2:
            continue

        # ---- rashomon --------------------------------------------------------
        rcfg = cfg.section("rashomon")

        def do_rashomon():
            return sample_rashomon(d_sel, outcome, hp, rcfg["k"], rcfg["epsilon"],
                                   rcfg["max_attempts"], split_seed=seed)

        def emit_rashomon(ens):
            return [_json(odir / "rashomon_summary.json", _clean({
                "k": len(ens.models), "complete": ens.complete, "epsilon": ens.epsilon,
                "acceptance_threshold": ens.acceptance_threshold,
                "rejected_count": ens.rejected_count, "attempts": ens.attempts,
                "seeds": [m.seed for m in ens.models],
                "val_r2": [m.val_r2 for m in ens.models]}))]

        ens, h_ras = runner.run("rashomon", outcome, {"rashomon": rcfg, "seed": seed}, [h_tune],
                                do_rashomon, emit_rashomon)
        res["ensemble"] = ens
        if stop == 3:
            continue

        # ---- importance ------------------------------------------------------
        icfg = cfg.section("importance")

        def do_importance():
            tables, agg = ensemble_importance(
                ens, d_sel.features, y, modeled, groups, loco_members=icfg["loco_members"],
                loco_folds=icfg["loco_folds"], repeats=icfg["repeats"],
                max_background=icfg["max_background"], max_explain=icfg["max_explain"],
                k=icfg["top_k"], seed=seed)
            return agg

        agg, h_imp = runner.run("importance", outcome, {"importance": icfg, "seed": seed}, [h_ras],
                                do_importance)
        res["ranks"] = agg
        if stop == 4:
            continue

        # ---- prune -----------------------------------------------------------
        pcfg = cfg.section("prune")
        kept, h_pr = runner.run(
            "prune", outcome, pcfg, [h_imp],
            lambda: prune_correlated(d_sel, list(agg.top_k), pcfg["threshold"]),
            lambda kept: [_write_csv(agg.to_frame(kept), odir / "importance_report.csv")])
        res["predictors"] = kept
        if stop == 5:
            continue

        # ---- aggregate -------------------------------------------------------
        aggs, h_agg = runner.run("aggregate", "", {}, [h_ing], lambda: aggregate_by_district(d))
        if stop == 6:
            continue

        # ---- global GAM ------------------------------------------------------
        gcfg = cfg.section("gam")

        def emit_global(gm):
            cols = {p: np.array([a.feature(p) for a in aggs]) for p in kept}
            return [_write_csv(global_shape_table(gm, cols), odir / "global_gam.csv")]

        gm, h_gam = runner.run("global-gam", outcome, gcfg, [h_pr, h_agg],
                               lambda: fit_global_gam(aggs, kept, outcome, gcfg), emit_global)
        res["global_gam"] = gm
        if stop == 7:
            continue

        # ---- MGWR ------------------------------------------------------------
        mcfg = cfg.section("mgwr")
        boundaries = load_boundaries(cfg.path(data["boundaries"])) if data.get("boundaries") else None

        def do_mgwr():
            m = fit_mgwr(aggs, kept, outcome, mcfg["kernel"], mcfg["criterion"], mcfg["tol"],
                         mcfg["max_iter"])
            regions = region_candidates(m, kept[0], min(mcfg["k_regions"], len(aggs)))
            return {"model": m, "regions": regions}

        def emit_mgwr(r):
            geo = r["model"].to_geojson(boundaries, r["regions"])
            p1 = odir / "mgwr.geojson"
            p1.parent.mkdir(parents=True, exist_ok=True)
            write_geojson(p1, _clean(geo))
            return [p1, _write_csv(r["model"].trace_frame(), odir / "mgwr_trace.csv")]

        mg, h_mg = runner.run("mgwr", outcome, {"mgwr": mcfg, "boundaries":
                                                file_digest(cfg.path(data["boundaries"]))
                                                if data.get("boundaries") else None},
                              [h_pr, h_agg], do_mgwr, emit_mgwr)
        res["mgwr"] = mg
        if stop == 8:
            continue

        # ---- local GAMs ------------------------------------------------------
        lcfg = cfg.section("local_gam")
        region_of = dict(zip(mg["model"].district_ids, (int(r) for r in mg["regions"])))

        def do_local():
            return fit_local_gams(d, kept, outcome, lcfg["theta"], lcfg["spatial_smoothing"],
                                  lcfg["lambdas"], lcfg["n_splines"], regions=region_of)

        def emit_local(ls):
            ldir = odir / "local_gam"
            ldir.mkdir(parents=True, exist_ok=True)
            for old in ldir.glob("*.csv"):
                old.unlink()
            grids = {p: shape_grid(d.feature(p)) for p in kept}
            paths, signs, sign_rows = [], {}, []
            for dist in ls.districts:
                m = ls.models[dist]
                if m is None:
                    continue
                frames = []
                for p in kept:
                    est, lo, hi = m.shape(p, grids[p])
                    frames.append({"term": p, "grid_value": grids[p], "estimate": est,
                                   "lower": lo, "upper": hi, "edf": m.term(p).edf})
                    s = sign_summary(m, p, grids[p])
                    signs.setdefault(dist, {})[p] = s
                    sign_rows.append({"district": dist, "term": p, **s})
                df = pd.concat([pd.DataFrame(f) for f in frames], ignore_index=True)
                paths.append(_write_csv(df, ldir / f"{dist}.csv"))
            paths.append(_write_csv(pd.DataFrame(sign_rows, columns=["district", "term", "positive",
                                                                     "negative", "signed"]),
                                    ldir / "sign_summary.csv"))
            paths.append(_json(odir / "gam_summary.json", _clean({
                "outcome": outcome, "predictors": list(kept), "global": gm.summary(),
                "local": ls.summary(), "theta": ls.theta,
                "spatial_smoothing": ls.spatial_smoothing, "sign_summary": signs})))
            return paths

        ls, h_loc = runner.run("local-gam", outcome, lcfg, [h_pr, h_gam, h_mg], do_local, emit_local)
        res["local_gams"] = ls
        if stop == 9:
            continue

        # ---- report ----------------------------------------------------------
        def emit_report(_):
            geo = json.loads((odir / "mgwr.geojson").read_text())
            return emit_maps(geo, odir / "maps", boundaries)

        runner.run("report", outcome, {"boundaries": data.get("boundaries")}, [h_mg],
                   lambda: None, emit_report)

    if stop == len(STAGES) - 1:
        files = validate_bundle(out)
        _json(out / "bundle.json", {"outcomes": list(outcomes), "files": files,
                                    "version": __version__, "seed": seed})
    return results
