"""Checkpoint serialization.

Checkpoints are JSON documents so they are diffable and portable, with
float64 payloads hex-encoded little-endian so round-trips are
bit-exact. Layout:

    {
      "format": "metagrad-checkpoint-v1",
      "model": {
        "spec": {...},
        "layers": [
          {"name": "a", "shape": [1, 1], "weight_hex": "...",
           "bias_shape": [1, 1], "bias_hex": "...",   # only if a bias exists
           "frozen": false},
          ...
        ]
      },
      "xi": {"spec": {...}, "tensors": {key: {name: {"shape": [...], "hex": "..."}}}},
      "meta": {...}        # free-form provenance (seed, iteration, config)
    }

The "xi" section is omitted for the identity optimizer.
"""

import json

import numpy as np

from .errors import ConfigurationError
from .models import Layer, Model, ModelSpec
from .optimizers import OptimizerSpec, XiParams

FORMAT = "metagrad-checkpoint-v1"


def _encode(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes().hex()


def _decode(hexstr, shape):
    arr = np.frombuffer(bytes.fromhex(hexstr), dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def checkpoint_dict(model, xi=None, meta=None):
    layers = []
    for layer in model.layers:
        rec = {
            "name": layer.name,
            "shape": list(layer.weight.shape),
            "weight_hex": _encode(layer.weight),
            "frozen": bool(layer.frozen),
        }
        if layer.bias is not None:
            rec["bias_shape"] = list(layer.bias.shape)
            rec["bias_hex"] = _encode(layer.bias)
        layers.append(rec)
    doc = {
        "format": FORMAT,
        "model": {"spec": model.spec.to_dict(), "layers": layers},
        "meta": dict(meta or {}),
    }
    if xi is not None and xi.spec.kind != "identity":
        tensors = {}
        for key, entry in xi.tensors.items():
            tensors[key] = {
                name: {"shape": list(np.shape(v)), "hex": _encode(v)}
                for name, v in entry.items()
            }
        doc["xi"] = {"spec": xi.spec.to_dict(), "tensors": tensors}
    return doc


def save_checkpoint(path, model, xi=None, meta=None):
    doc = checkpoint_dict(model, xi=xi, meta=meta)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, xi_or_None, meta)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ConfigurationError(
            f"not a {FORMAT} file (format={doc.get('format')!r})"
        )
    spec = ModelSpec.from_dict(doc["model"]["spec"])
    layers = []
    for rec in doc["model"]["layers"]:
        weight = _decode(rec["weight_hex"], rec["shape"])
        bias = None
        if "bias_hex" in rec:
            bias = _decode(rec["bias_hex"], rec["bias_shape"])
        layers.append(Layer(rec["name"], weight, bias=bias, frozen=rec.get("frozen", False)))
    model = Model(spec, layers)
    xi = None
    if "xi" in doc:
        xspec = OptimizerSpec.from_dict(doc["xi"]["spec"])
        tensors = {}
        for key, entry in doc["xi"]["tensors"].items():
            tensors[key] = {
                name: _decode(v["hex"], v["shape"]) for name, v in entry.items()
            }
        xi = XiParams(xspec, tensors)
    return model, xi, doc.get("meta", {})
