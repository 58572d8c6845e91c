"""Versioned JSON run configuration.

Schema (version 1); every key is optional except ``version``, and any key
not listed here is rejected::

    {
      "version": 1,
      "task": {TaskConfig fields},
      "count": int, "fractions": [train, td_pool, eval],
      "student_hidden": int, "teacher_hidden_multiplier": int,
      "teacher_noise_scale": float, "teacher_data_count": int,
      "init_scale": float, "merges": [["t", "h"], ...],
      "stages": {"teacher"|"sft"|"td"|"opd": {StageConfig fields except "stage";
                 the opd stage also takes "opd": {OpdConfig fields}}},
      "vuss_window": int,
      "export_formats": ["csv"]
    }
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .opd import OpdConfig
from .pipeline import RecipeConfig, StageConfig
from .synth_task import TaskConfig

CONFIG_VERSION = 1
STAGE_KEYS = ("teacher", "sft", "td", "opd")
EXPORT_FORMATS = ("csv",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    export_formats: tuple[str, ...] = ("csv",)

    def stage(self, name: str) -> StageConfig:
        if name not in STAGE_KEYS:
            raise ConfigError(f"unknown stage {name!r}; expected one of {STAGE_KEYS}")
        return getattr(self.recipe, name)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, recipe=self.recipe.with_seed(seed))

    def to_json(self) -> dict:
        return to_json(self)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_keys(obj, allowed, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    return obj


def _build(cls, obj: dict, where: str, **fixed):
    try:
        return cls(**obj, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _names(cls, exclude=()) -> list[str]:
    return [f.name for f in fields(cls) if f.name not in exclude]


def _stage_from_json(name: str, obj, default: StageConfig) -> StageConfig:
    where = f"stages.{name}"
    allowed = _names(StageConfig, exclude=("stage",) if name == "opd" else ("stage", "opd"))
    obj = dict(_check_keys(obj, allowed, where))
    if "opd" in obj:
        o = _check_keys(obj["opd"], _names(OpdConfig), f"{where}.opd")
        obj["opd"] = _build(OpdConfig, o, f"{where}.opd")
    base = {f.name: getattr(default, f.name) for f in fields(StageConfig) if f.name != "stage"}
    base.update(obj)
    return _build(StageConfig, base, where, stage=default.stage)


def from_json(obj: dict) -> RunConfig:
    top = ["version", "task", "count", "fractions", "student_hidden", "teacher_hidden_multiplier",
           "teacher_noise_scale", "teacher_data_count", "init_scale", "merges", "stages",
           "vuss_window", "export_formats"]
    _check_keys(obj, top, "config")
    if obj.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config: version must be {CONFIG_VERSION}, got {obj.get('version')!r}")
    d = RecipeConfig()
    kw = {}
    if "task" in obj:
        t = dict(_check_keys(obj["task"], _names(TaskConfig), "task"))
        if "words" in t:
            t["words"] = tuple(t["words"])
        kw["task"] = _build(TaskConfig, t, "task")
    for key in ("count", "student_hidden", "teacher_hidden_multiplier", "teacher_data_count", "vuss_window"):
        if key in obj:
            if not isinstance(obj[key], int) or isinstance(obj[key], bool) or obj[key] < 1:
                raise ConfigError(f"{key}: expected a positive integer, got {obj[key]!r}")
            kw[key] = obj[key]
    for key in ("teacher_noise_scale", "init_scale"):
        if key in obj:
            if not isinstance(obj[key], (int, float)) or obj[key] < 0:
                raise ConfigError(f"{key}: expected a nonnegative number, got {obj[key]!r}")
            kw[key] = float(obj[key])
    if "fractions" in obj:
        fr = obj["fractions"]
        if not isinstance(fr, list) or len(fr) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in fr) or sum(fr) > 1:
            raise ConfigError(f"fractions: expected three nonnegative numbers summing to <= 1, got {fr!r}")
        kw["fractions"] = tuple(float(x) for x in fr)
    if "merges" in obj:
        m = obj["merges"]
        if not isinstance(m, list) or any(not isinstance(p, list) or len(p) != 2 or not all(isinstance(s, str) for s in p) for p in m):
            raise ConfigError(f"merges: expected a list of [left, right] string pairs, got {m!r}")
        kw["merges"] = tuple(tuple(p) for p in m)
    stages = _check_keys(obj.get("stages", {}), STAGE_KEYS, "stages")
    for name in STAGE_KEYS:
        if name in stages:
            kw[name] = _stage_from_json(name, stages[name], getattr(d, name))
    formats = obj.get("export_formats", ["csv"])
    if not isinstance(formats, list) or any(f not in EXPORT_FORMATS for f in formats):
        raise ConfigError(f"export_formats: supported formats are {list(EXPORT_FORMATS)}, got {formats!r}")
    return RunConfig(replace(d, **kw), tuple(formats))


def _stage_json(s: StageConfig) -> dict:
    d = s.to_json()
    d.pop("stage")
    return d


def to_json(cfg: RunConfig) -> dict:
    r = cfg.recipe
    return {
        "version": CONFIG_VERSION,
        "task": r.task.to_json(),
        "count": r.count,
        "fractions": list(r.fractions),
        "student_hidden": r.student_hidden,
        "teacher_hidden_multiplier": r.teacher_hidden_multiplier,
        "teacher_noise_scale": r.teacher_noise_scale,
        "teacher_data_count": r.teacher_data_count,
        "init_scale": r.init_scale,
        "merges": [list(p) for p in r.merges],
        "stages": {name: _stage_json(getattr(r, name)) for name in STAGE_KEYS},
        "vuss_window": r.vuss_window,
        "export_formats": list(cfg.export_formats),
    }


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_json(obj)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_json(cfg), indent=2, sort_keys=True) + "\n")
