"""JSON file formats for models, anchors, fingerprint records and reports.

Floats are written with Python's shortest round-trip repr, so reading then
writing a file reproduces it byte for byte.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .diffusion import DenoiserModel, GMMDenoiser, MLPDenoiser, build_schedule
from .fingerprint import FingerprintRecord
from .watermark import Anchor

FORMAT_VERSION = 1


class FileFormatError(ValueError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(obj))
    os.replace(tmp, path)


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: not valid JSON ({e})") from None


def model_to_dict(model: DenoiserModel) -> dict:
    d = {
        "format": FORMAT_VERSION,
        "kind": model.kind,
        "D": model.D,
        "schedule": {"T": model.schedule.T, "kind": "cosine", "s": 0.008, "floor": 1e-5},
        "provenance": model.provenance,
        "model_id": model.model_id,
    }
    if isinstance(model, GMMDenoiser):
        d["params"] = {"weights": model.weights.tolist(), "means": model.means.tolist(), "sigma2": model.sigma2}
    elif isinstance(model, MLPDenoiser):
        d["params"] = {"weights": [W.tolist() for W in model.weights], "biases": [b.tolist() for b in model.biases],
                       "data_var": model.data_var, "data_mean": model.data_mean.tolist(), "activation": "tanh",
                       "time_embedding": "t/T,sin(2pi t/T),cos(2pi t/T)"}
    else:
        raise FileFormatError(f"unknown model kind {model.kind!r}")
    return d


def model_from_dict(d: dict) -> DenoiserModel:
    try:
        schedule = build_schedule(int(d["schedule"]["T"]))
        p = d["params"]
        if d["kind"] == "gmm":
            model = GMMDenoiser(p["weights"], p["means"], float(p["sigma2"]), schedule, dict(d.get("provenance", {})))
        elif d["kind"] == "mlp":
            model = MLPDenoiser(tuple(np.array(W, dtype=np.float64) for W in p["weights"]),
                                tuple(np.array(b, dtype=np.float64) for b in p["biases"]),
                                schedule, dict(d.get("provenance", {})), float(p["data_var"]),
                                np.array(p["data_mean"], dtype=np.float64))
        else:
            raise FileFormatError(f"unknown model kind {d['kind']!r}")
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"malformed model document: missing or bad field {e}") from None
    if "model_id" in d and d["model_id"] != model.model_id:
        raise FileFormatError(f"model_id {d['model_id']} does not match parameters ({model.model_id})")
    return model


def save_model(path, model: DenoiserModel) -> None:
    write_json(path, model_to_dict(model))


def load_model(path) -> DenoiserModel:
    return model_from_dict(read_json(path))


def save_anchor(path, anchor: Anchor) -> None:
    write_json(path, anchor.to_dict())


def load_anchor(path) -> Anchor:
    try:
        return Anchor.from_dict(read_json(path))
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"malformed anchor document: {e}") from None


def save_record(path, record: FingerprintRecord) -> None:
    write_json(path, record.to_dict())


def load_record(path) -> FingerprintRecord:
    try:
        return FingerprintRecord.from_dict(read_json(path))
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"malformed fingerprint record: {e}") from None
