"""JSON run configuration: model, method(s), training, data source and output directory."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..backbone import ModelConfig
from ..methods import MethodError, MethodSpec
from .features import load_features
from .synthetic import Dataset, SyntheticTaskSpec, gen_synthetic
from .train import TrainSpec

TOP_LEVEL_KEYS = {"model", "method", "methods", "train", "task", "output_dir"}
DEFAULT_COUNT = 600


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class SyntheticSource:
    spec: SyntheticTaskSpec
    count: int = DEFAULT_COUNT
    seed: int = 0

    def load(self, cfg: ModelConfig) -> Dataset:
        return gen_synthetic(self.spec, self.count, self.seed)


@dataclass(frozen=True)
class FeatureSource:
    path: str
    labels: str
    eval_frac: float = 0.2
    seed: int = 0

    def load(self, cfg: ModelConfig) -> Dataset:
        data = load_features(self.path, self.labels, cfg.seq_len, n_classes=cfg.n_classes,
                             eval_frac=self.eval_frac, seed=self.seed)
        if data.x_train.shape[-1] != cfg.d_input:
            raise ConfigError(f"task.features: feature width {data.x_train.shape[-1]} != model.d_input {cfg.d_input}")
        return data


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    methods: tuple[MethodSpec, ...]
    train: TrainSpec
    task: SyntheticSource | FeatureSource
    output_dir: str = "out"

    @property
    def method(self) -> MethodSpec:
        return self.methods[0]

    def with_overrides(self, *, out=None, seed=None, deterministic=None, precision=None) -> "RunConfig":
        train = self.train
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        if deterministic:
            train = dataclasses.replace(train, deterministic=True)
        if precision is not None:
            train = dataclasses.replace(train, precision=precision)
        return dataclasses.replace(self, train=train, output_dir=out if out is not None else self.output_dir)

    def to_dict(self) -> dict:
        task = dataclasses.asdict(self.task)
        kind = "synthetic" if isinstance(self.task, SyntheticSource) else "features"
        return {
            "model": dataclasses.asdict(self.model),
            "methods": [m.label for m in self.methods],
            "train": dataclasses.asdict(self.train),
            "task": {kind: task},
            "output_dir": self.output_dir,
        }


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _section(raw, key: str, cls, extra: frozenset[str] = frozenset(), **defaults):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{key}: expected an object, got {type(raw).__name__}")
    allowed = _fields(cls) | extra
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"{key}.{k}: unknown key (allowed: {', '.join(sorted(allowed))})")
    args = {**defaults, **{k: v for k, v in raw.items() if k not in extra}}
    for k, v in args.items():
        if isinstance(v, list):
            args[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    try:
        return cls(**args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _methods(raw: dict, allow_many: bool) -> tuple[MethodSpec, ...]:
    if "method" in raw and "methods" in raw:
        raise ConfigError("method/methods: give one of 'method' or 'methods', not both")
    if "methods" in raw:
        items = raw["methods"]
        key = "methods"
        if not isinstance(items, list):
            raise ConfigError("methods: expected a list")
        if not items:
            raise ConfigError("methods: empty method list")
        if not allow_many and len(items) != 1:
            raise ConfigError("methods: 'run' takes exactly one method")
    elif "method" in raw:
        items, key = [raw["method"]], "method"
    else:
        raise ConfigError("method: missing (name the fine-tuning method, e.g. \"lst:8\")")
    out = []
    for i, item in enumerate(items):
        try:
            out.append(MethodSpec.parse(item))
        except MethodError as exc:
            where = key if key == "method" else f"{key}[{i}]"
            raise ConfigError(f"{where}: {exc}") from None
    return tuple(out)


def _task(raw, model: ModelConfig):
    if raw is None:
        raw = {"synthetic": {}}
    if not isinstance(raw, dict):
        raise ConfigError("task: expected an object")
    sources = [k for k in raw if k in ("synthetic", "features")]
    unknown = [k for k in raw if k not in ("synthetic", "features")]
    if unknown:
        raise ConfigError(f"task.{unknown[0]}: unknown data source (use 'synthetic' or 'features')")
    if len(sources) != 1:
        raise ConfigError("task: specify exactly one data source, 'synthetic' or 'features'")
    if sources[0] == "features":
        src = _section(raw["features"], "task.features", FeatureSource)
        for k in ("path", "labels"):
            if not isinstance(getattr(src, k), str):
                raise ConfigError(f"task.features.{k}: expected a file path string")
        return src
    syn = raw["synthetic"] or {}
    if not isinstance(syn, dict):
        raise ConfigError("task.synthetic: expected an object")
    spec = _section(syn, "task.synthetic", SyntheticTaskSpec, frozenset({"count", "seed"}),
                    n_classes=model.n_classes, seq_len=model.seq_len, d_input=model.d_input)
    for k in ("n_classes", "seq_len", "d_input"):
        if getattr(spec, k) != getattr(model, k):
            raise ConfigError(f"task.synthetic.{k}: {getattr(spec, k)} does not match model.{k}={getattr(model, k)}")
    count = syn.get("count", DEFAULT_COUNT)
    seed = syn.get("seed", 0)
    if not isinstance(count, int) or count < spec.n_classes:
        raise ConfigError(f"task.synthetic.count: need an integer >= n_classes, got {count!r}")
    if not isinstance(seed, int):
        raise ConfigError(f"task.synthetic.seed: expected an integer, got {seed!r}")
    return SyntheticSource(spec, count, seed)


def parse_config(raw, *, allow_many: bool = False) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    for k in raw:
        if k not in TOP_LEVEL_KEYS:
            raise ConfigError(f"{k}: unknown top-level key (allowed: {', '.join(sorted(TOP_LEVEL_KEYS))})")
    model = _section(raw.get("model"), "model", ModelConfig)
    methods = _methods(raw, allow_many)
    train = _section(raw.get("train"), "train", TrainSpec)
    if train.precision not in ("f32", "f64"):
        raise ConfigError(f"train.precision: expected 'f32' or 'f64', got {train.precision!r}")
    task = _task(raw.get("task"), model)
    out = raw.get("output_dir", "out")
    if not isinstance(out, str):
        raise ConfigError("output_dir: expected a string")
    return RunConfig(model, methods, train, task, out)


def load_config(path, *, allow_many: bool = False) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(raw, allow_many=allow_many)
