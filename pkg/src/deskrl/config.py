"""Run configuration: one JSON document, strictly validated.

Schema (every key optional unless marked; defaults shown)::

    {
      "seed": 0,                    master seed
      "total_steps": 3000,
      "output_dir": "runs/default",
      "checkpoint_every": 500,      0 disables periodic checkpoints
      "model": {"d": 16, "h": 32, "w": 4},
      "validation": {"every": 100, "prompts_per_family": 49, "n": 16,
                     "temperature": 0.6, "max_len": null},
      "mixture": [{"family": "arithmetic", "difficulty": {...}, "weight": 1.0}],
      "stages": [ {StageConfig fields; "mixture" defaults to the top-level one} ],
      "ablation": {"seeds": null, "beta": 0.001, "eps_low": 0.2, "eps_high": 0.4,
                   "reset": {"interval": 500}}
    }

Unknown keys anywhere raise :class:`ConfigError` naming the dotted path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, DeskRLError, InvalidDifficulty
from .tasks import FAMILIES, resolve_difficulty
from .trainer import MixtureEntry, ResetPolicy, StageConfig

_STAGE_DEFAULT = StageConfig()


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    h: int = 32
    w: int = 4


@dataclass(frozen=True)
class ValidationConfig:
    every: int = 100
    prompts_per_family: int = 49
    n: int = 16
    temperature: float = 0.6
    max_len: int | None = None


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple | None = None  # None: the run's own seed only
    beta: float = 1e-3
    eps_low: float = 0.2
    eps_high: float = 0.4
    reset: ResetPolicy = ResetPolicy(interval=500)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    total_steps: int = 3000
    output_dir: str = "runs/default"
    checkpoint_every: int = 500
    model: ModelConfig = ModelConfig()
    validation: ValidationConfig = ValidationConfig()
    mixture: tuple = _STAGE_DEFAULT.mixture
    stages: tuple = (StageConfig(name="main"),)
    ablation: AblationConfig | None = None

    def with_overrides(self, seed=None, output_dir=None):
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if output_dir is not None:
            kw["output_dir"] = str(output_dir)
        return replace(self, **kw)


# -- parsing ----------------------------------------------------------------------------


def _expect(value, types, path):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def _check_keys(obj, allowed, path):
    _expect(obj, (dict,), path or "<root>")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


_NUM = (int, float)


def _scalars(cls, obj, path, skip=()):
    """Type-check the scalar fields of dataclass ``cls`` present in ``obj``."""
    out = {}
    for f in fields(cls):
        if f.name in skip or f.name not in obj:
            continue
        value = obj[f.name]
        sub = f"{path}.{f.name}" if path else f.name
        ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        optional = "None" in ann
        if value is None and optional:
            out[f.name] = None
            continue
        base = ann.split("|")[0].strip()
        types = {"int": (int,), "float": _NUM, "str": (str,), "bool": (bool,)}.get(base)
        if types is None:
            raise ConfigError(sub, "unsupported field")
        _expect(value, types, sub)
        out[f.name] = float(value) if base == "float" else value
    return out


def _reset(obj, path):
    _check_keys(obj, {f.name for f in fields(ResetPolicy)}, path)
    try:
        return ResetPolicy(**_scalars(ResetPolicy, obj, path))
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _mixture(obj, path):
    _expect(obj, (list,), path)
    if not obj:
        raise ConfigError(path, "mixture must be nonempty")
    out = []
    for i, entry in enumerate(obj):
        sub = f"{path}[{i}]"
        _check_keys(entry, {"family", "difficulty", "weight"}, sub)
        if "family" not in entry:
            raise ConfigError(f"{sub}.family", "missing")
        fam = _expect(entry["family"], (str,), f"{sub}.family")
        if fam not in FAMILIES:
            raise ConfigError(f"{sub}.family", f"unknown family {fam!r}")
        diff = _expect(entry.get("difficulty", {}), (dict,), f"{sub}.difficulty")
        try:
            resolve_difficulty(fam, diff)
        except InvalidDifficulty as exc:
            raise ConfigError(f"{sub}.difficulty", str(exc)) from None
        weight = float(_expect(entry.get("weight", 1.0), _NUM, f"{sub}.weight"))
        out.append(MixtureEntry(fam, dict(diff), weight))
    return tuple(out)


def _stage(obj, path, mixture):
    allowed = {f.name for f in fields(StageConfig)}
    _check_keys(obj, allowed, path)
    kw = _scalars(StageConfig, obj, path, skip=("reset", "mixture"))
    if "reset" in obj:
        kw["reset"] = _reset(obj["reset"], f"{path}.reset")
    kw["mixture"] = _mixture(obj["mixture"], f"{path}.mixture") if "mixture" in obj else mixture
    try:
        return StageConfig(**kw)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _positive(value, path, allow_zero=False):
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(path, "must be positive" if not allow_zero else "must be >= 0")


def config_from_dict(obj):
    _check_keys(obj, {f.name for f in fields(RunConfig)}, "")
    kw = _scalars(RunConfig, obj, "", skip=("model", "validation", "mixture", "stages", "ablation"))
    for key in ("total_steps", "checkpoint_every"):
        if key in kw:
            _positive(kw[key], key, allow_zero=True)
    if "seed" in kw:
        _positive(kw["seed"], "seed", allow_zero=True)
    if "model" in obj:
        _check_keys(obj["model"], {f.name for f in fields(ModelConfig)}, "model")
        model = _scalars(ModelConfig, obj["model"], "model")
        for k, v in model.items():
            _positive(v, f"model.{k}")
        kw["model"] = ModelConfig(**model)
    if "validation" in obj:
        _check_keys(obj["validation"], {f.name for f in fields(ValidationConfig)}, "validation")
        val = _scalars(ValidationConfig, obj["validation"], "validation")
        for k in ("every", "prompts_per_family", "n", "temperature", "max_len"):
            if val.get(k) is not None:
                _positive(val[k], f"validation.{k}", allow_zero=(k == "every"))
        kw["validation"] = ValidationConfig(**val)
    mixture = _mixture(obj["mixture"], "mixture") if "mixture" in obj else RunConfig.mixture
    kw["mixture"] = mixture
    if "stages" in obj:
        stages = _expect(obj["stages"], (list,), "stages")
        if not stages:
            raise ConfigError("stages", "need at least one stage")
        kw["stages"] = tuple(_stage(s, f"stages[{i}]", mixture) for i, s in enumerate(stages))
    else:
        kw["stages"] = (StageConfig(name="main", mixture=mixture),)
    if obj.get("ablation") is not None:
        ab = obj["ablation"]
        _check_keys(ab, {f.name for f in fields(AblationConfig)}, "ablation")
        akw = _scalars(AblationConfig, ab, "ablation", skip=("seeds", "reset"))
        if ab.get("seeds") is not None:
            seeds = _expect(ab["seeds"], (list,), "ablation.seeds")
            if not seeds:
                raise ConfigError("ablation.seeds", "need at least one seed")
            akw["seeds"] = tuple(_expect(s, (int,), f"ablation.seeds[{i}]") for i, s in enumerate(seeds))
        if "reset" in ab:
            akw["reset"] = _reset(ab["reset"], "ablation.reset")
        cfg = AblationConfig(**akw)
        if not cfg.reset.enabled:
            raise ConfigError("ablation.reset", "the reset-on variant needs an interval or window")
        if cfg.beta <= 0:
            raise ConfigError("ablation.beta", "must be positive")
        kw["ablation"] = cfg
    return RunConfig(**kw)


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(k, "duplicate key")
        seen[k] = v
    return seen


def parse_config(text):
    try:
        obj = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} col {exc.colno}", exc.msg) from None
    return config_from_dict(obj)


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


# -- serialization ------------------------------------------------------------------------


def _reset_dict(r):
    return {"interval": r.interval, "window": r.window, "min_delta": r.min_delta, "at_start": r.at_start}


def _mixture_list(mix):
    return [{"family": m.family, "difficulty": dict(sorted(m.difficulty.items())), "weight": m.weight} for m in mix]


def _stage_dict(st):
    d = {f.name: getattr(st, f.name) for f in fields(StageConfig) if f.name not in ("reset", "mixture")}
    d["reset"] = _reset_dict(st.reset)
    d["mixture"] = _mixture_list(st.mixture)
    return d


def config_to_dict(cfg):
    d = {
        "seed": cfg.seed,
        "total_steps": cfg.total_steps,
        "output_dir": cfg.output_dir,
        "checkpoint_every": cfg.checkpoint_every,
        "model": {f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)},
        "validation": {f.name: getattr(cfg.validation, f.name) for f in fields(ValidationConfig)},
        "mixture": _mixture_list(cfg.mixture),
        "stages": [_stage_dict(s) for s in cfg.stages],
        "ablation": None,
    }
    if cfg.ablation is not None:
        ab = cfg.ablation
        d["ablation"] = {"seeds": None if ab.seeds is None else list(ab.seeds), "beta": ab.beta, "eps_low": ab.eps_low,
                         "eps_high": ab.eps_high, "reset": _reset_dict(ab.reset)}
    return d


def dump_config(cfg):
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def ablation_variants(cfg):
    """The 2x2x2 grid of (clip, beta, reset) variants as ``(name, RunConfig)`` pairs."""
    ab = cfg.ablation or AblationConfig()
    out = []
    for clip_name, eps_high in (("symclip", ab.eps_low), ("cliphigh", ab.eps_high)):
        for beta_name, beta in (("beta0", 0.0), ("betapos", ab.beta)):
            for reset_name, reset in (("noreset", ResetPolicy()), ("reset", ab.reset)):
                stages = tuple(
                    replace(s, eps_low=ab.eps_low, eps_high=eps_high, beta=beta,
                            reset=replace(reset, at_start=s.reset.at_start))
                    for s in cfg.stages
                )
                out.append((f"{clip_name}-{beta_name}-{reset_name}", replace(cfg, stages=stages)))
    return out


__all__ = [
    "AblationConfig", "ModelConfig", "RunConfig", "ValidationConfig", "ablation_variants",
    "config_from_dict", "config_to_dict", "dump_config", "load_config", "parse_config",
    "ConfigError", "DeskRLError",
]
