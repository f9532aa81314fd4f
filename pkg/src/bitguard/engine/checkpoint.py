"""Bit-exact JSON checkpoints for QuantizedModel.

Integer codes serialize as JSON integers and floats round-trip through
repr, so loading a checkpoint reproduces the model exactly.  Files written
from the same model are byte-identical (sorted keys, fixed separators).
"""

from __future__ import annotations

import json
from typing import List

import numpy as np

from ..bitcodec import TcuCodeword
from ..errors import FormatError
from .layers import AffineNorm, Conv2d, Dense, MaxPool2, QuantizedModel, ReLU
from .quantized import QuantizedTensor

FORMAT_VERSION = 1


def _layer_to_json(layer) -> dict:
    if layer.kind == "conv2d":
        return {
            "kind": "conv2d",
            "name": layer.name,
            "stride": layer.stride,
            "pad": layer.pad,
            "shape": list(layer.weight.codes.shape),
            "bits": layer.weight.bits,
            "scale": layer.weight.scale,
            "codes": layer.weight.codes.reshape(-1).tolist(),
        }
    if layer.kind == "dense":
        return {
            "kind": "dense",
            "name": layer.name,
            "shape": list(layer.weight.codes.shape),
            "bits": layer.weight.bits,
            "scale": layer.weight.scale,
            "codes": layer.weight.codes.reshape(-1).tolist(),
        }
    if layer.kind == "affine_norm":
        return {
            "kind": "affine_norm",
            "name": layer.name,
            "scale": layer.scale.tolist(),
            "shift": layer.shift.tolist(),
        }
    return {"kind": layer.kind, "name": layer.name}


def model_to_json(model: QuantizedModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "head": model.head,
        "input_bits": model.input_bits,
        "layers": [_layer_to_json(l) for l in model.layers],
        "protected": {
            str(pidx): {str(i): w.to_json() for i, w in sorted(words.items())}
            for pidx, words in sorted(model.protected.items())
            if words
        },
    }


def model_from_json(obj: dict) -> QuantizedModel:
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {obj.get('format_version')!r}")
    layers: List = []
    for spec in obj["layers"]:
        kind = spec["kind"]
        if kind in ("conv2d", "dense"):
            codes = np.array(spec["codes"], dtype=np.int64).reshape(spec["shape"])
            weight = QuantizedTensor(codes, float(spec["scale"]), int(spec["bits"]))
            if kind == "conv2d":
                layers.append(Conv2d(weight, int(spec["stride"]), int(spec["pad"]), spec["name"]))
            else:
                layers.append(Dense(weight, spec["name"]))
        elif kind == "affine_norm":
            layers.append(AffineNorm(np.array(spec["scale"]), np.array(spec["shift"]), spec["name"]))
        elif kind == "relu":
            layers.append(ReLU(spec["name"]))
        elif kind == "maxpool2":
            layers.append(MaxPool2(spec["name"]))
        else:
            raise FormatError(f"unknown layer kind {kind!r} in checkpoint")
    model = QuantizedModel(layers, head=obj["head"], input_bits=int(obj["input_bits"]))
    for pidx_s, words in obj.get("protected", {}).items():
        model.protected[int(pidx_s)] = {
            int(i): TcuCodeword.from_json(w) for i, w in words.items()
        }
    return model


def save_model(model: QuantizedModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh, sort_keys=True, separators=(",", ":"))


def load_model(path: str) -> QuantizedModel:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or "layers" not in obj:
        raise FormatError("checkpoint JSON lacks a layer list")
    return model_from_json(obj)
