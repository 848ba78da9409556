"""Quantized networks and their on-disk form.

A checkpoint is a ``QDZ1`` container holding one record per weight matrix
and bias vector, plus a small JSON file describing layer shapes and
activations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sizing
from .nn import Dense, Network
from .quantcore import QuantizedVector, dequantize


@dataclass
class QuantizedModel:
    """A network whose weight matrices are held as quantized vectors.

    Biases stay in full precision, as do weight matrices given as plain
    arrays (layers excluded from quantization).
    """

    base: Network
    weights: list[QuantizedVector | np.ndarray]

    def network(self) -> Network:
        return self.base.with_weights([weight_values(q) for q in self.weights])

    def records(self, encoding: int = sizing.ENC_PACKED) -> list[sizing.LayerRecord]:
        recs = []
        for i, (layer, qv) in enumerate(zip(self.base.layers, self.weights)):
            if isinstance(qv, QuantizedVector):
                recs.append(sizing.LayerRecord(f"fc{i}.weight", quantized=qv, encoding=encoding))
            else:
                recs.append(sizing.LayerRecord(f"fc{i}.weight", raw=np.asarray(qv)))
            recs.append(sizing.LayerRecord(f"fc{i}.bias", raw=layer.bias))
        return recs

    def size_report(self, f: int = 32) -> sizing.SizeReport:
        return sizing.model_size_report(self.weights, f)


def weight_values(q: QuantizedVector | np.ndarray) -> np.ndarray:
    """Flat weight values of a quantized or full-precision layer."""
    return dequantize(q) if isinstance(q, QuantizedVector) else np.asarray(q, dtype=np.float64).ravel()


def architecture(net: Network) -> dict:
    return {"layers": [{"in": l.weight.shape[0], "out": l.weight.shape[1], "activation": l.activation}
                       for l in net.layers]}


def _network_records(net: Network) -> list[sizing.LayerRecord]:
    recs = []
    for i, layer in enumerate(net.layers):
        recs.append(sizing.LayerRecord(f"fc{i}.weight", raw=layer.weight))
        recs.append(sizing.LayerRecord(f"fc{i}.bias", raw=layer.bias))
    return recs


def save(path, model: Network | QuantizedModel, encoding: int = sizing.ENC_PACKED) -> Path:
    """Write ``path`` (container) and ``path.json`` (architecture)."""
    path = Path(path)
    if isinstance(model, QuantizedModel):
        recs = model.records(encoding)
        arch = architecture(model.base)
    else:
        recs = _network_records(model)
        arch = architecture(model)
    path.write_bytes(sizing.write_container(recs))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> Network | QuantizedModel:
    """Read a checkpoint; quantized containers come back as QuantizedModel."""
    path = Path(path)
    arch = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    recs = {r.name: r for r in sizing.read_container(path.read_bytes())}
    layers, qvs = [], []
    for i, layer in enumerate(arch["layers"]):
        shape = (layer["in"], layer["out"])
        w, b = recs[f"fc{i}.weight"], recs[f"fc{i}.bias"]
        if w.quantized is not None:
            qvs.append(w.quantized)
            weight = dequantize(w.quantized).reshape(shape)
        else:
            weight = np.asarray(w.raw).reshape(shape).copy()
            qvs.append(weight.ravel().copy())
        layers.append(Dense(weight, np.asarray(b.raw).copy(), layer["activation"]))
    net = Network(layers)
    if any(isinstance(q, QuantizedVector) for q in qvs):
        return QuantizedModel(net, qvs)
    return net
