"""Pipeline configuration: defaults, JSON-schema validation and overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .errors import ConfigError
from .gbt import SEARCH_SPACE
from .smooth import LAMBDA_GRID, N_SPLINES_GRID

DEFAULTS: dict[str, Any] = {
    "data": {"csv": None, "schema": {}, "boundaries": None, "synth": None, "synth_seed": 0},
    "outcomes": None,
    "seed": 0,
    "output_dir": "out",
    "force_include": [],
    "knockoff": {"q": 0.2, "statistic": "gbt-gain", "plus": True, "q_values": None,
                 "min_selected": 3},
    "tune": {"budget": 20, "n_folds": 5, "test_frac": 0.1,
             "space": {k: list(v) for k, v in SEARCH_SPACE.items()}},
    "rashomon": {"k": 50, "epsilon": 0.01, "max_attempts": None},
    "importance": {"top_k": 10, "repeats": 10, "loco_members": 10, "loco_folds": 5,
                   "max_background": 512, "max_explain": 512},
    "prune": {"threshold": 0.8},
    "gam": {"lambdas": list(LAMBDA_GRID), "tensor_lambdas": list(LAMBDA_GRID),
            "n_splines": list(N_SPLINES_GRID), "tensor_n_splines": 5},
    "mgwr": {"kernel": "bisquare", "criterion": "AICc", "tol": 1e-5, "max_iter": 200,
             "k_regions": 4},
    "local_gam": {"theta": None, "spatial_smoothing": True, "lambdas": list(LAMBDA_GRID),
                  "n_splines": list(N_SPLINES_GRID)},
    "maps": {"flip_threshold": 0.5},
}


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    return json.loads(resources.files("spatial_iml").joinpath("schemas", name).read_text())


def bundled_config_path(name: str = "mini_medsat.json") -> Path:
    return Path(str(resources.files("spatial_iml").joinpath("data", name)))


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("space", "schema",
                                                                                 "synth"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


@dataclass(frozen=True)
class PipelineConfig:
    """Validated settings; ``raw`` is the merged JSON document."""

    raw: dict
    base_dir: Path

    def __getitem__(self, key: str):
        return self.raw[key]

    @property
    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_mapping(cls, doc: Mapping, base_dir: Path | str = ".",
                     overrides: Mapping | None = None) -> "PipelineConfig":
        try:
            jsonschema.validate(dict(doc), load_schema("pipeline_config.schema.json"))
        except jsonschema.ValidationError as err:
            raise ConfigError(f"invalid config field {_field_path(err)}: {err.message}") from None
        merged = _merge(DEFAULTS, doc)
        if overrides:
            merged = _merge(merged, overrides)
            try:
                jsonschema.validate(_strip_none(merged), load_schema("pipeline_config.schema.json"))
            except jsonschema.ValidationError as err:
                raise ConfigError(f"invalid config field {_field_path(err)}: {err.message}") from None
        cfg = cls(merged, Path(base_dir).resolve())
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path, overrides: Mapping | None = None) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno} "
                              f"column {exc.colno}: {exc.msg}") from None
        return cls.from_mapping(doc, path.parent, overrides)

    def check(self) -> None:
        data = self.raw["data"]
        if not data.get("csv") and not data.get("synth"):
            raise ConfigError("invalid config field data: give either data.csv or data.synth")
        if data.get("csv") and data.get("synth"):
            raise ConfigError("invalid config field data: data.csv and data.synth are exclusive")
        for key in ("csv", "boundaries"):
            p = self.path(data.get(key))
            if p is not None and not p.exists():
                raise ConfigError(f"invalid config field data.{key}: {p} does not exist")
        if self.raw["outcomes"] is not None and len(set(self.raw["outcomes"])) != len(self.raw["outcomes"]):
            raise ConfigError("invalid config field outcomes: duplicate names")

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.raw[name])


def _strip_none(doc):
    if isinstance(doc, dict):
        return {k: _strip_none(v) for k, v in doc.items()
                if v is not None or k in ("boundaries", "q_values", "max_attempts", "theta",
                                          "loco_members", "max_explain")}
    return doc
