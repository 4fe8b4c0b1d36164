"""Flat ``key=value`` run configuration covering every pipeline knob.

Keys are ``section.field`` (``data``, ``backbone``, ``pretrain``,
``triplet``, ``eval``, ``attribution``) plus a top-level ``seed`` that
drives model init and both training phases.  Unknown keys are rejected
and every value is parsed against the field's declared type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .errors import StorageError, ValidationError
from .model import BackboneConfig
from .persist import format_kv, parse_kv
from .trainer import PretrainConfig, TripletConfig


@dataclass(frozen=True)
class DataConfig:
    n_train_ids: int = 64
    n_test_ids: int = 32
    per_id: int = 8
    n_cams: int = 4
    size_min: int = 64
    size_max: int = 112
    n_distractors: int = 0
    test_cams: int = 0  # 0 picks the per_id-based default
    seed: int = 0

    def generate_kwargs(self):
        return dict(n_train_ids=self.n_train_ids, n_test_ids=self.n_test_ids, per_id=self.per_id,
                    n_cams=self.n_cams, size_range=(self.size_min, self.size_max), seed=self.seed,
                    n_distractors=self.n_distractors, test_cams=self.test_cams or None)


@dataclass(frozen=True)
class EvalConfig:
    side: int = 64
    max_rank: int = 10
    n_query: int = 5
    n_gallery: int = 10
    include_self: bool = True


@dataclass(frozen=True)
class AttributionConfig:
    top_dims: int = 5
    attention_dims: int = 50
    attention_mode: str = "abs"


SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "triplet": TripletConfig,
    "eval": EvalConfig,
    "attribution": AttributionConfig,
}
# seeds of the training sections follow the top-level seed
_TIED = {("pretrain", "seed"), ("triplet", "seed")}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)

    def pretrain_cfg(self):
        return replace(self.pretrain, seed=self.seed)

    def triplet_cfg(self):
        return replace(self.triplet, seed=self.seed)

    def to_pairs(self):
        out = {"seed": str(self.seed)}
        for name, section in key_schema().items():
            sec, fld = name.split(".", 1)
            out[name] = _format(getattr(getattr(self, sec), fld), section)
        return out

    def to_text(self):
        return format_kv(self.to_pairs())

    def with_values(self, values: dict, source="<config>"):
        """New config with ``values`` (raw strings) applied."""
        schema = key_schema()
        top = {}
        per = {sec: {} for sec in SECTIONS}
        for key, raw in values.items():
            if key == "seed":
                top["seed"] = _parse(raw, int, key, source)
                continue
            if key not in schema:
                raise ValidationError(f"{source}: unknown config key {key!r}")
            sec, fld = key.split(".", 1)
            per[sec][fld] = _parse(raw, schema[key], key, source)
        updates = dict(top)
        for sec, vals in per.items():
            if vals:
                try:
                    updates[sec] = replace(getattr(self, sec), **vals)
                except (TypeError, ValueError) as exc:
                    raise ValidationError(f"{source}: invalid {sec} settings: {exc}") from exc
        return replace(self, **updates)


def key_schema():
    """``section.field`` -> declared field type (as a string annotation)."""
    schema = {}
    for sec, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (sec, f.name) not in _TIED:
                schema[f"{sec}.{f.name}"] = f.type if isinstance(f.type, str) else f.type.__name__
    return schema


def _format(value, kind):
    if kind == "tuple":
        return ",".join("x".join(str(v) for v in blk) for blk in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse(raw, kind, key, source):
    text = raw.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind == "bool":
            return _BOOLS[text.lower()]
        if kind == "tuple":
            return tuple(tuple(int(v) for v in blk.split("x")) for blk in text.split(","))
        if kind == "str":
            return text
    except (ValueError, KeyError):
        raise ValidationError(f"{source}: {key} expects {kind}, got {raw!r}") from None
    raise ValidationError(f"{source}: {key} has unsupported type {kind}")


def parse_config(text, source="<config>", base=None) -> RunConfig:
    return (base or RunConfig()).with_values(parse_kv(text, source), source)


def load_config(path, base=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), base)
