"""Model persistence: versioned JSON files around VectorFieldModel dicts."""

from __future__ import annotations

import json
from pathlib import Path

from cvfields.learner import VectorFieldModel

SCHEMA = "cvfields-model/1"


class ModelSchemaError(ValueError):
    """Model file missing, unreadable, or from an incompatible schema."""


def save_model(path, model: VectorFieldModel, extra: dict | None = None) -> None:
    doc = {"schema": SCHEMA, "model": model.to_dict()}
    if extra:
        doc["meta"] = extra
    # sorted keys keep the file byte-stable for identical models
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_model(path) -> VectorFieldModel:
    p = Path(path)
    if not p.is_file():
        raise ModelSchemaError(f"model file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelSchemaError(f"{p}: not valid JSON ({exc})") from exc
    schema = doc.get("schema")
    if schema != SCHEMA:
        raise ModelSchemaError(f"{p}: schema {schema!r} is not {SCHEMA!r}")
    try:
        return VectorFieldModel.from_dict(doc["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelSchemaError(f"{p}: malformed model payload ({exc})") from exc
