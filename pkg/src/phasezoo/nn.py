"""Multilayer perceptron with exact gradients and Hessian-vector products.

Parameters live in one flat float64 vector. Layer ``l`` owns a weight
matrix of shape ``(fan_in, fan_out)`` followed by a bias of length
``fan_out``, so a forward step is ``a @ W + b``.

Gradients are plain reverse mode. Hessian-vector products are
forward-over-reverse: the tangent ``v`` is pushed through the forward pass
and then through the backward pass (the R-operator), which gives ``H @ v``
at the cost of roughly two gradient evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

ACTIVATIONS = ("relu", "tanh")
INIT_SCHEMES = ("kaiming_uniform",)
_MAX_PARAMS = 2**40


class SpecError(ValueError):
    """Invalid model specification."""


class ShapeError(ValueError):
    """Array shapes or parameter layouts do not line up."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_width: int
    num_hidden_layers: int
    output_dim: int
    activation: str = "relu"
    init_scheme: str = "kaiming_uniform"
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_width", "num_hidden_layers", "output_dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
                raise SpecError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise SpecError(f"unknown init_scheme {self.init_scheme!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError(f"seed must fit in 64 unsigned bits, got {self.seed!r}")
        if self.num_params() > _MAX_PARAMS:
            raise SpecError(f"parameter count {self.num_params()} overflows the supported size")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.num_hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_layers(self) -> int:
        return self.num_hidden_layers + 1

    def num_params(self) -> int:
        w, d, h, c = self.hidden_width, self.input_dim, self.num_hidden_layers, self.output_dim
        return d * w + w + (h - 1) * (w * w + w) + w * c + c

    def to_dict(self) -> dict:
        return {
            "input_dim": int(self.input_dim),
            "hidden_width": int(self.hidden_width),
            "num_hidden_layers": int(self.num_hidden_layers),
            "output_dim": int(self.output_dim),
            "activation": self.activation,
            "init_scheme": self.init_scheme,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class LayoutEntry(NamedTuple):
    layer: int
    kind: str  # "weight" or "bias"
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout_for(spec: ModelSpec) -> tuple[LayoutEntry, ...]:
    entries = []
    offset = 0
    for layer, (fan_in, fan_out) in enumerate(spec.layer_dims):
        entries.append(LayoutEntry(layer, "weight", (fan_in, fan_out), offset))
        offset += fan_in * fan_out
        entries.append(LayoutEntry(layer, "bias", (fan_out,), offset))
        offset += fan_out
    return tuple(entries)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat parameter values plus the layout that maps them back onto layers."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError("parameter values must be one-dimensional")
        object.__setattr__(self, "values", values)
        layout = tuple(LayoutEntry(int(e[0]), str(e[1]), tuple(int(s) for s in e[2]), int(e[3])) for e in self.layout)
        object.__setattr__(self, "layout", layout)
        check_layout(layout, values.size)

    def __len__(self) -> int:
        return self.values.size

    def tensors(self) -> list[np.ndarray]:
        """Views of each layout entry, reshaped (weights before biases per layer)."""
        return [self.values[e.offset:e.offset + e.size].reshape(e.shape) for e in self.layout]

    def weights_and_biases(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        t = self.tensors()
        for i in range(0, len(t), 2):
            yield t[i], t[i + 1]

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.values.shape} values, got {values.shape}")
        return ParameterVector(values, self.layout)

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for e in self.layout:
            if e.kind == "weight":
                mask[e.offset:e.offset + e.size] = True
        return mask

    def layout_json(self) -> list[dict]:
        return [{"layer": e.layer, "kind": e.kind, "shape": list(e.shape), "offset": e.offset} for e in self.layout]


def check_layout(layout: tuple[LayoutEntry, ...], length: int) -> None:
    expected = 0
    for e in layout:
        if e.offset != expected:
            raise ShapeError(f"layout entry for layer {e.layer} {e.kind} starts at {e.offset}, expected {expected}")
        expected += e.size
    if expected != length:
        raise ShapeError(f"layout covers {expected} values but vector has {length}")


def flatten(tensors: list[np.ndarray], layout: tuple[LayoutEntry, ...]) -> ParameterVector:
    if len(tensors) != len(layout):
        raise ShapeError(f"expected {len(layout)} tensors, got {len(tensors)}")
    for t, e in zip(tensors, layout):
        if tuple(np.shape(t)) != e.shape:
            raise ShapeError(f"layer {e.layer} {e.kind}: shape {np.shape(t)} != {e.shape}")
    values = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in tensors]) if tensors else np.zeros(0)
    return ParameterVector(values, layout)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    # ReLU gain sqrt(2): bound = sqrt(6 / fan_in); biases use the default 1/sqrt(fan_in) bound
    w_bound = np.sqrt(6.0 / fan_in)
    b_bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-w_bound, w_bound, size=(fan_in, fan_out))
    b = rng.uniform(-b_bound, b_bound, size=fan_out)
    return w, b


def build_model(spec: ModelSpec) -> ParameterVector:
    rng = np.random.default_rng(int(spec.seed))
    tensors = []
    for fan_in, fan_out in spec.layer_dims:
        w, b = kaiming_uniform(rng, fan_in, fan_out)
        tensors += [w, b]
    return flatten(tensors, layout_for(spec))


def zeros_like(params: ParameterVector) -> ParameterVector:
    return params.with_values(np.zeros_like(params.values))


# ---------------------------------------------------------------------------
# forward / backward


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0).astype(np.float64)  # subgradient 0 at z == 0
    return 1.0 - a * a


def _check_finite(x: np.ndarray, layer: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what} in layer {layer}", layer=layer)


def _check_inputs(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input_dim={spec.input_dim}")
    if params.layout != layout_for(spec):
        raise ShapeError("parameter layout does not match the model spec")
    return x


def _forward_cache(params: ParameterVector, spec: ModelSpec, x: np.ndarray):
    zs, acts = [], [x]
    a = x
    layers = list(params.weights_and_biases())
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (w, b) in enumerate(layers):
            z = a @ w + b
            _check_finite(z, l, "pre-activation")
            zs.append(z)
            if l < len(layers) - 1:
                a = _activate(z, spec.activation)
                acts.append(a)
    return layers, zs, acts


def forward(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape ``(batch, output_dim)``."""
    x = _check_inputs(params, spec, inputs)
    _, zs, _ = _forward_cache(params, spec, x)
    return zs[-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes})")
    return y.astype(np.int64)


def loss(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = forward(params, spec, inputs)
    y = _check_labels(labels, logits.shape[0], spec.output_dim)
    return _cross_entropy(logits, y)


def loss_and_grad(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray, labels) -> tuple[float, ParameterVector]:
    value, grad, _ = loss_grad_logits(params, spec, inputs, labels)
    return value, grad


def loss_grad_logits(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray, labels):
    """Like ``loss_and_grad`` but also hands back the logits of the batch."""
    x = _check_inputs(params, spec, inputs)
    y = _check_labels(labels, x.shape[0], spec.output_dim)
    layers, zs, acts = _forward_cache(params, spec, x)
    logits = zs[-1]
    value = _cross_entropy(logits, y)
    n = x.shape[0]

    delta = _softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = []
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        a_prev = acts[l]
        gw = a_prev.T @ delta
        gb = delta.sum(axis=0)
        _check_finite(gw, l, "gradient")
        grads += [gb, gw]
        if l > 0:
            delta = (delta @ w.T) * _act_deriv(zs[l - 1], acts[l], spec.activation)
    grads.reverse()
    return value, flatten(grads, params.layout), logits


def hvp(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray, labels, v: ParameterVector) -> ParameterVector:
    """Exact Hessian-vector product of the mean cross-entropy loss."""
    if v.layout != params.layout:
        raise ShapeError("tangent layout does not match parameters")
    x = _check_inputs(params, spec, inputs)
    y = _check_labels(labels, x.shape[0], spec.output_dim)
    layers, zs, acts = _forward_cache(params, spec, x)
    tangents = list(v.weights_and_biases())
    n = x.shape[0]
    act = spec.activation

    # forward tangent pass: R{z_l}, R{a_l}
    r_acts = [np.zeros_like(x)]
    r_zs = []
    for l, ((w, _), (vw, vb)) in enumerate(zip(layers, tangents)):
        r_z = r_acts[l] @ w + acts[l] @ vw + vb
        r_zs.append(r_z)
        if l < len(layers) - 1:
            r_acts.append(_act_deriv(zs[l], acts[l + 1], act) * r_z)

    p = _softmax(zs[-1])
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    r_logits = r_zs[-1]
    r_delta = p * (r_logits - np.sum(p * r_logits, axis=1, keepdims=True)) / n

    out: list[np.ndarray] = []
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        vw, _ = tangents[l]
        a_prev, r_a_prev = acts[l], r_acts[l]
        hw = r_a_prev.T @ delta + a_prev.T @ r_delta
        hb = r_delta.sum(axis=0)
        _check_finite(hw, l, "Hessian-vector product")
        out += [hb, hw]
        if l > 0:
            z, a = zs[l - 1], acts[l]
            d = _act_deriv(z, a, act)
            up = delta @ w.T
            r_up = r_delta @ w.T + delta @ vw.T
            r_next = d * r_up
            if act == "tanh":
                # d/dz (1 - tanh^2) = -2 tanh (1 - tanh^2)
                r_next = r_next + (-2.0 * a * d) * r_zs[l - 1] * up
            delta = d * up
            r_delta = r_next
    out.reverse()
    return flatten(out, params.layout)


def hvp_finite_difference(params: ParameterVector, spec: ModelSpec, inputs, labels, v: ParameterVector,
                          eps: float | None = None) -> ParameterVector:
    """Central difference of gradients along ``v``; a test oracle, not the production path."""
    vn = np.linalg.norm(v.values)
    if vn == 0:
        return zeros_like(params)
    if eps is None:
        eps = 1e-4 * max(np.linalg.norm(params.values), 1.0) / vn
    _, gp = loss_and_grad(params.with_values(params.values + eps * v.values), spec, inputs, labels)
    _, gm = loss_and_grad(params.with_values(params.values - eps * v.values), spec, inputs, labels)
    return params.with_values((gp.values - gm.values) / (2 * eps))


def predict(params: ParameterVector, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, spec, inputs), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64))
