"""Run configuration: a strict JSON surface over the library dataclasses.

A config file is a single JSON object with five sections. Unknown sections
or keys are rejected, every key has a documented default, and parse followed
by serialize is canonical (fixed section and key order, so a round-trip is a
fixed point). Defaults:

  model   {"vocab_size": 256, "n_layers": 2, "d_model": 128, "n_heads": 4,
           "d_ff": 512, "max_seq_len": 128, "tie_embeddings": true}
  quant   {"w_bits": "fp", "e_bits": "fp", "a_bits": "fp", "scheme": "dynamic"}
  distill {"lambda": 0.1, "tau": 0.1, "momentum": 0.5, "negatives": 32,
           "strategy": "default", "anchor": "bank", "contrast_layer": "last",
           "d_proj": 0}
  train   {"lr_backbone": 5e-4, "lr_clip": 1e-3, "batch_size": 16,
           "epochs": 3, "seed": 0, "weight_decay": 0.01,
           "grad_clip_norm": null, "eval_batch_size": 64}
  data    {"corpus_path": "", "vocab": "byte", "val_frac": 0.1}

"anchor" selects the contrastive anchor construction: "bank" mixes the
memory-bank entry with the current projection, "immediate" uses the current
projection alone. bits values are integers >= 2 or the string "fp".
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .distill import DistillConfig
from .errors import ConfigError
from .model import BitTriple, ModelConfig
from .train import TrainConfig

# (kind, default) per key; section and key order here is the canonical order.
_SCHEMA = {
    "model": {
        "vocab_size": ("int", 256),
        "n_layers": ("int", 2),
        "d_model": ("int", 128),
        "n_heads": ("int", 4),
        "d_ff": ("int", 512),
        "max_seq_len": ("int", 128),
        "tie_embeddings": ("bool", True),
    },
    "quant": {
        "w_bits": ("bits", "fp"),
        "e_bits": ("bits", "fp"),
        "a_bits": ("bits", "fp"),
        "scheme": ("str", "dynamic"),
    },
    "distill": {
        "lambda": ("float", 0.1),
        "tau": ("float", 0.1),
        "momentum": ("float", 0.5),
        "negatives": ("int", 32),
        "strategy": ("str", "default"),
        "anchor": ("str", "bank"),
        "contrast_layer": ("str", "last"),
        "d_proj": ("int", 0),
    },
    "train": {
        "lr_backbone": ("float", 5e-4),
        "lr_clip": ("float", 1e-3),
        "batch_size": ("int", 16),
        "epochs": ("int", 3),
        "seed": ("int", 0),
        "weight_decay": ("float", 0.01),
        "grad_clip_norm": ("optfloat", None),
        "eval_batch_size": ("int", 64),
    },
    "data": {
        "corpus_path": ("str", ""),
        "vocab": ("str", "byte"),
        "val_frac": ("float", 0.1),
    },
}

_ANCHOR_MODES = {"bank": "smoothed", "immediate": "immediate"}
_VOCAB_MODES = ("byte", "word")


def _check_value(path: str, kind: str, v):
    """Type-check one leaf; returns the canonical value."""
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        return v
    if kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        return float(v)
    if kind == "optfloat":
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number or null, got {v!r}")
        return float(v)
    if kind == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected true/false, got {v!r}")
        return v
    if kind == "str":
        if not isinstance(v, str):
            raise ConfigError(f"{path}: expected a string, got {v!r}")
        return v
    if kind == "bits":
        if v == "fp":
            return "fp"
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: expected an integer >= 2 or 'fp', got {v!r}")
        return v
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run configuration (one dict per section)."""

    model: dict
    quant: dict
    distill: dict
    train: dict
    data: dict

    # -- views onto the library dataclasses --------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def bit_triple(self) -> BitTriple:
        q = self.quant
        return BitTriple(q["w_bits"], q["e_bits"], q["a_bits"])

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(
            tau=d["tau"], momentum=d["momentum"], lam=d["lambda"],
            negatives=d["negatives"], strategy=d["strategy"],
            anchor_mode=_ANCHOR_MODES[d["anchor"]],
            contrast_layer=d["contrast_layer"], d_proj=d["d_proj"],
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr_backbone=t["lr_backbone"], lr_clip=t["lr_clip"],
            batch_size=t["batch_size"], epochs=t["epochs"], seed=t["seed"],
            weight_decay=t["weight_decay"], grad_clip_norm=t["grad_clip_norm"],
            eval_batch_size=t["eval_batch_size"], val_frac=self.data["val_frac"],
        )

    def sections(self) -> dict:
        return {"model": dict(self.model), "quant": dict(self.quant),
                "distill": dict(self.distill), "train": dict(self.train),
                "data": dict(self.data)}


def _validate(sections: dict) -> RunConfig:
    """Full semantic validation; raises ConfigError naming the bad field."""
    rc = RunConfig(**{k: dict(v) for k, v in sections.items()})
    from .quantizers import WEIGHT_SCHEMES

    try:
        rc.model_config()
    except ConfigError as e:
        raise ConfigError(f"model: {e}") from e
    try:
        rc.bit_triple()
    except ConfigError as e:
        raise ConfigError(f"quant: {e}") from e
    if rc.quant["scheme"] not in WEIGHT_SCHEMES:
        raise ConfigError(
            f"quant.scheme: unknown scheme {rc.quant['scheme']!r}; "
            f"valid options: {', '.join(WEIGHT_SCHEMES)}")
    if rc.distill["anchor"] not in _ANCHOR_MODES:
        raise ConfigError(
            f"distill.anchor: must be one of {sorted(_ANCHOR_MODES)}, "
            f"got {rc.distill['anchor']!r}")
    try:
        rc.distill_config()
    except ConfigError as e:
        raise ConfigError(f"distill: {e}") from e
    try:
        rc.train_config()
    except ConfigError as e:
        raise ConfigError(f"train/data: {e}") from e
    if rc.data["vocab"] not in _VOCAB_MODES:
        raise ConfigError(
            f"data.vocab: must be one of {list(_VOCAB_MODES)}, got {rc.data['vocab']!r}")
    return rc


def parse_config(obj: Union[str, dict]) -> RunConfig:
    """Parse and validate a config from JSON text or an already-loaded dict.

    Missing sections and keys take their documented defaults; unknown
    sections or keys are rejected with their dotted path.
    """
    if isinstance(obj, str):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"config is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}"
            ) from e
    if not isinstance(obj, dict):
        raise ConfigError(f"config must be a JSON object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(_SCHEMA))
    if unknown:
        raise ConfigError(
            f"unknown config section(s) {unknown}; valid sections: {list(_SCHEMA)}")
    sections = {}
    for sec, fields in _SCHEMA.items():
        given = obj.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected an object, got {given!r}")
        bad = sorted(set(given) - set(fields))
        if bad:
            raise ConfigError(
                f"unknown key(s) {[f'{sec}.{k}' for k in bad]}; "
                f"valid keys: {[f'{sec}.{k}' for k in fields]}")
        sections[sec] = {
            key: _check_value(f"{sec}.{key}", kind, given.get(key, default))
            for key, (kind, default) in fields.items()
        }
    return _validate(sections)


def default_config() -> RunConfig:
    return parse_config({})


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def serialize_config(rc: RunConfig) -> str:
    """Canonical JSON text: schema section/key order, two-space indent."""
    out = {sec: {k: getattr(rc, sec)[k] for k in fields}
           for sec, fields in _SCHEMA.items()}
    return json.dumps(out, indent=2) + "\n"


def apply_overrides(rc: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted-path ``section.key=value`` overrides and re-validate.

    Values parse as JSON ("0.5", "true", "null", '"word"'); anything that is
    not valid JSON is taken as a bare string, so strategy=fp+quan works
    unquoted.
    """
    sections = copy.deepcopy(rc.sections())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path {dotted!r} must be section.key")
        sec, key = parts
        if sec not in _SCHEMA or key not in _SCHEMA[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        sections[sec][key] = _check_value(f"{sec}.{key}", _SCHEMA[sec][key][0], value)
    return _validate(sections)


# ---------------------------------------------------------------------------
# digests


def model_digest(model_section: Union[dict, ModelConfig]) -> bytes:
    """32-byte digest of the model section; the checkpoint header field."""
    if isinstance(model_section, ModelConfig):
        model_section = {k: getattr(model_section, k) for k in _SCHEMA["model"]}
    canon = {k: model_section[k] for k in _SCHEMA["model"]}
    return hashlib.sha256(json.dumps(canon).encode()).digest()


def config_digest(rc: RunConfig) -> str:
    """Short hex digest identifying a run setup, independent of the seed.

    Used to name output directories as <digest>-s<seed>: arms of a sweep
    share a digest across seeds, and reruns of the same config land in the
    same directory.
    """
    sections = copy.deepcopy(rc.sections())
    sections["train"]["seed"] = 0
    text = serialize_config(RunConfig(**sections))
    return hashlib.sha256(text.encode()).hexdigest()[:12]
