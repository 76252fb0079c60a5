"""Versioned JSON run configuration shared by every CLI command."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from lsnet.errors import ConfigError
from lsnet.loss import LossConfig
from lsnet.model import ModelConfig
from lsnet.synthdata import AugmentConfig, SceneParams
from lsnet.training import TrainConfig

CONFIG_VERSION = 1
SECTIONS = ("scene", "augment", "model", "loss", "train", "eval")

EVAL_DEFAULTS = {"wl": 2, "binarize": "otsu", "sigma_s": 1.0, "conf_threshold": 0.5, "seeds": [0, 1, 2]}


def load_schema(name: str = "run_config") -> dict:
    text = resources.files("lsnet").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"invalid config at {where}: {err.message}"


def validate_document(doc: dict, schema_name: str = "run_config"):
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_format_error(e) for e in errors))


def parse_binarize(spec):
    """``"otsu"`` -> ``"otsu"``; ``"fixed:0.5"`` -> ``0.5``."""
    if isinstance(spec, (int, float)):
        return float(spec)
    if spec == "otsu":
        return "otsu"
    if isinstance(spec, str) and spec.startswith("fixed:"):
        try:
            t = float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"cannot parse binarization threshold in {spec!r}") from None
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"fixed binarization threshold must lie in [0, 1], got {t}")
        return t
    raise ConfigError(f"binarize must be 'otsu' or 'fixed:<t>', got {spec!r}")


@dataclass
class RunConfig:
    scene: SceneParams = field(default_factory=SceneParams)
    image_size: int = 256
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    val_fraction: float = 0.1
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    document: dict = field(default_factory=lambda: {"version": CONFIG_VERSION})

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def resolved(self) -> dict:
        """Fully expanded document (every field explicit), suitable for a run snapshot."""
        train = self.train.to_dict()
        train.pop("augment")
        train.pop("loss")
        train["val_fraction"] = self.val_fraction
        scene = self.scene.to_dict()
        scene["image_size"] = self.image_size
        return _jsonable({
            "version": CONFIG_VERSION,
            "scene": scene,
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "loss": self.loss.__dict__.copy(),
            "train": train,
            "eval": dict(self.eval),
        })


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def build_run_config(doc: Optional[dict] = None) -> RunConfig:
    """Validate ``doc`` against the schema and construct typed configs.

    Missing sections fall back to the desk presets.
    """
    doc = copy.deepcopy(doc) if doc is not None else {"version": CONFIG_VERSION}
    validate_document(doc)
    try:
        scene = dict(doc.get("scene", {}))
        image_size = int(scene.pop("image_size", 256))
        scene_params = SceneParams(**scene)
        augment = AugmentConfig(**doc.get("augment", {}))

        model_doc = dict(doc.get("model", {}))
        if model_doc.pop("preset", "desk") == "desk":
            model = ModelConfig.desk(**model_doc)
        else:
            model = ModelConfig(**model_doc)

        loss = LossConfig(**doc.get("loss", {}))
        train_doc = dict(doc.get("train", {}))
        val_fraction = float(train_doc.pop("val_fraction", 0.1))
        preset = train_doc.pop("preset", "desk")
        train_doc.update(augment=augment, loss=loss)
        train = TrainConfig.desk(**train_doc) if preset == "desk" else TrainConfig(**train_doc)

        ev = {**EVAL_DEFAULTS, **doc.get("eval", {})}
        parse_binarize(ev["binarize"])
    except TypeError as exc:  # defensive: schema and dataclasses out of sync
        raise ConfigError(str(exc)) from None
    if image_size != model.input_size:
        raise ConfigError(f"scene.image_size {image_size} differs from model.input_size {model.input_size}")
    return RunConfig(scene=scene_params, image_size=image_size, augment=augment, model=model,
                     train=train, val_fraction=val_fraction, eval=ev, document=doc)


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return build_run_config(None)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return build_run_config(doc)


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[name] = value
    return doc
