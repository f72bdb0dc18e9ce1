"""Small feed-forward networks with hand-written reverse-mode gradients.

Tensors are plain float64 numpy arrays. A network is described by an
:class:`MlpSpec` and a parameter mapping ``{"W0": ..., "b0": ..., ...}`` where
``W{k}`` has shape ``(out, in)`` so that ``y = x @ W.T + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, ConfigurationError, DivergenceError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "softmax")

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for k in range(self.n_layers):
            fan_in, fan_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            shapes[f"W{k}"] = (fan_out, fan_in)
            shapes[f"b{k}"] = (fan_out,)
        return shapes

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MlpSpec":
        return cls(
            tuple(doc["layer_sizes"]),
            doc.get("hidden_activation", "relu"),
            doc.get("output_activation", "identity"),
        )


@dataclass
class GradBundle:
    param_grads: ParamSet
    input_grad: np.ndarray


def init_params(spec: MlpSpec, rng: np.random.Generator, scale: float = 1.0) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("W"):
            limit = scale * math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def check_params(spec: MlpSpec, params: ParamSet) -> None:
    shapes = spec.param_shapes()
    if set(shapes) != set(params):
        raise ConfigurationError(
            f"parameter names {sorted(params)} do not match spec {sorted(shapes)}"
        )
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ConfigurationError(
                f"parameter {name} has shape {params[name].shape}, expected {shape}"
            )


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.input_size:
        raise ConfigurationError(
            f"input shape {x.shape} does not match layer size {spec.input_size}"
        )
    return x


def _hidden(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _hidden_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _forward_trace(spec: MlpSpec, params: ParamSet, x: np.ndarray):
    acts = [x]
    pre = []
    a = x
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        z = a @ params[f"W{k}"].T + params[f"b{k}"]
        pre.append(z)
        if k < last:
            a = _hidden(spec.hidden_activation, z)
        elif spec.output_activation == "softmax":
            a = softmax(z)
        else:
            a = z
        acts.append(a)
    return acts, pre


def forward(spec: MlpSpec, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a ``(batch, in)`` matrix."""
    x = _check_input(spec, x)
    acts, _ = _forward_trace(spec, params, x)
    return acts[-1]


def backward(spec: MlpSpec, params: ParamSet, x: np.ndarray, upstream: np.ndarray) -> GradBundle:
    """Gradients of a scalar loss given ``upstream = dL/d(output)``.

    Batched inputs accumulate parameter gradients over the batch; the input
    gradient keeps the batch axis.
    """
    x = _check_input(spec, x)
    acts, pre = _forward_trace(spec, params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ConfigurationError(
            f"upstream gradient shape {g.shape} does not match output {acts[-1].shape}"
        )
    if spec.output_activation == "softmax":
        p = acts[-1]
        g = p * (g - (g * p).sum(axis=-1, keepdims=True))

    grads: ParamSet = {}
    for k in reversed(range(spec.n_layers)):
        a_in = acts[k]
        if x.ndim == 1:
            grads[f"W{k}"] = np.outer(g, a_in)
            grads[f"b{k}"] = g.copy()
        else:
            grads[f"W{k}"] = g.T @ a_in
            grads[f"b{k}"] = g.sum(axis=0)
        g = g @ params[f"W{k}"]
        if k > 0:
            g = g * _hidden_grad(spec.hidden_activation, pre[k - 1], acts[k])
    return GradBundle(grads, g)


def sgd_step(params: ParamSet, grads: GradBundle | ParamSet, lr: float) -> ParamSet:
    """Return new parameters ``p - lr * g``; the inputs are left untouched."""
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    pg = grads.param_grads if isinstance(grads, GradBundle) else grads
    out = {}
    for name, p in params.items():
        g = pg[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        new = p - lr * g
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"parameter {name} became non-finite")
        out[name] = new
    return out


def global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: ParamSet, max_norm: float | None) -> ParamSet:
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# -- checkpoints -----------------------------------------------------------

def to_document(spec: MlpSpec, params: ParamSet) -> dict[str, Any]:
    check_params(spec, params)
    return {
        "spec": spec.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}
            for name, arr in params.items()
        },
    }


def from_document(doc: Any) -> tuple[MlpSpec, ParamSet]:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    for key in ("spec", "params"):
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing field {key!r}")
    try:
        spec = MlpSpec.from_dict(doc["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid field 'spec': {exc}") from exc

    expected = spec.param_shapes()
    raw = doc["params"]
    if not isinstance(raw, dict):
        raise CheckpointError("field 'params' must be an object")
    missing = set(expected) - set(raw)
    extra = set(raw) - set(expected)
    if missing or extra:
        name = sorted(missing or extra)[0]
        raise CheckpointError(f"invalid field 'params.{name}': names do not match the spec")

    params: ParamSet = {}
    for name, shape in expected.items():
        entry = raw[name]
        try:
            declared = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid field 'params.{name}': {exc}") from exc
        if declared != shape:
            raise CheckpointError(
                f"invalid field 'params.{name}.shape': declared {declared}, spec needs {shape}"
            )
        if values.ndim != 1 or values.size != math.prod(declared):
            raise CheckpointError(
                f"invalid field 'params.{name}.values': expected {math.prod(declared)} values"
            )
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"invalid field 'params.{name}.values': non-finite entry")
        params[name] = values.reshape(declared)
    return spec, params


def save_checkpoint(spec: MlpSpec, params: ParamSet, path: str | Path, meta: dict | None = None) -> None:
    doc = to_document(spec, params)
    if meta is not None:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc))


def read_checkpoint_document(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg} at char {exc.pos})") from exc


def load_checkpoint(path: str | Path) -> tuple[MlpSpec, ParamSet]:
    return from_document(read_checkpoint_document(path))
