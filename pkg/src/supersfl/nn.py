"""Dense neural-network substrate with exact analytic gradients.

All computation is float64. A network is an ordered list of
:class:`DenseLayer`; each layer computes ``act(x @ W.T + b)`` where ``W``
has shape ``[out_dim, in_dim]`` and ``act`` is ReLU or the identity.
The forward pass caches per-layer inputs and pre-activations so the
backward pass can reproduce the exact chain rule:

    dZ = dY * act'(Z)
    dW = dZ.T @ X        db = dZ.sum(axis=0)        dX = dZ @ W

Gradients for a run of consecutive layers travel together in a
:class:`GradientSet`, which also records which slice of a larger model
the gradients belong to so consumers can check alignment. Every
analytic gradient in this module is cross-checked against
:func:`finite_diff_oracle` in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

# Relative slack when comparing a gradient norm against the clip
# threshold; guarantees clip_l2 is bitwise idempotent despite rounding.
_CLIP_SLACK = 1e-12


class StructureError(ValueError):
    """Shape or wiring mismatch between tensors, layers, or caches."""


@dataclass
class DenseLayer:
    """Fully connected layer: ``y = act(x @ weights.T + bias)``.

    Attributes:
        weights: float64 array of shape ``[out_dim, in_dim]``.
        bias: float64 array of shape ``[out_dim]``.
        activation: ``"relu"`` or ``"identity"``.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise StructureError(f"weights must be 2-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise StructureError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[0]}"
            )
        if min(self.weights.shape) < 1:
            raise StructureError(f"layer dims must be >= 1, got shape {self.weights.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, activation: str) -> DenseLayer:
    """Create a layer with uniform weights in [-a, a], a = sqrt(6/(in+out)).

    Biases start at zero. Deterministic given the generator state.
    """
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return DenseLayer(weights, np.zeros(out_dim), activation)


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations captured by :func:`forward`."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


@dataclass
class GradientSet:
    """Parameter gradients for a contiguous run of layers.

    ``start`` is the index of the first covered layer within the larger
    model the gradients align to (0 for a client prefix). ``per_layer``
    holds one ``(d_weights, d_bias)`` pair per covered layer.
    """

    per_layer: list[tuple[np.ndarray, np.ndarray]]
    start: int = 0

    def __len__(self) -> int:
        return len(self.per_layer)

    def global_norm(self) -> float:
        total = 0.0
        for dw, db in self.per_layer:
            total += float(np.sum(dw * dw)) + float(np.sum(db * db))
        return math.sqrt(total)


def add_gradients(a: GradientSet, b: GradientSet) -> GradientSet:
    """Elementwise sum of two structurally aligned gradient sets."""
    _check_aligned(a, b)
    return GradientSet(
        [(dw_a + dw_b, db_a + db_b) for (dw_a, db_a), (dw_b, db_b) in zip(a.per_layer, b.per_layer)],
        start=a.start,
    )


def _check_aligned(a: GradientSet, b: GradientSet) -> None:
    if a.start != b.start or len(a) != len(b):
        raise StructureError(
            f"gradient sets cover different ranges: start {a.start} len {len(a)} vs start {b.start} len {len(b)}"
        )
    for i, ((dw_a, db_a), (dw_b, db_b)) in enumerate(zip(a.per_layer, b.per_layer)):
        if dw_a.shape != dw_b.shape or db_a.shape != db_b.shape:
            raise StructureError(f"layer {a.start + i}: gradient shapes differ")


def forward(layers: list[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run ``x`` through ``layers``, returning the output and a backprop cache.

    Raises:
        StructureError: when a layer's input width does not match, naming
            the offending layer index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise StructureError(f"input must be 2-d [batch, features], got shape {x.shape}")
    if not layers:
        raise StructureError("empty layer list")
    inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    h = x
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.in_dim:
            raise StructureError(
                f"layer {i}: input has {h.shape[1]} features, layer expects {layer.in_dim}"
            )
        z = h @ layer.weights.T + layer.bias
        inputs.append(h)
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
    return h, ForwardCache(inputs, preacts)


def backward(
    layers: list[DenseLayer], cache: ForwardCache, d_output: np.ndarray
) -> tuple[GradientSet, np.ndarray]:
    """Backpropagate ``d_output`` through ``layers`` using ``cache``.

    Returns the gradients for every layer plus the gradient with respect
    to the block input, which is how a loss computed downstream of these
    layers propagates further back.

    Raises:
        StructureError: when the cache does not match the layer list or
            the upstream gradient has the wrong shape.
    """
    d_output = np.asarray(d_output, dtype=np.float64)
    if len(cache.inputs) != len(layers) or len(cache.preacts) != len(layers):
        raise StructureError(
            f"cache covers {len(cache.inputs)} layers, expected {len(layers)}"
        )
    batch = cache.batch_size
    for i, layer in enumerate(layers):
        if cache.inputs[i].shape != (batch, layer.in_dim):
            raise StructureError(f"layer {i}: cached input shape {cache.inputs[i].shape} is stale")
        if cache.preacts[i].shape != (batch, layer.out_dim):
            raise StructureError(f"layer {i}: cached pre-activation shape is stale")
    if d_output.shape != (batch, layers[-1].out_dim):
        raise StructureError(
            f"upstream gradient shape {d_output.shape} does not match output "
            f"({batch}, {layers[-1].out_dim})"
        )

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    g = d_output
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        z = cache.preacts[i]
        dz = g * (z > 0.0) if layer.activation == RELU else g
        grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
        g = dz @ layer.weights
    return GradientSet(grads), g


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over a batch and its gradient w.r.t. logits.

    Stabilized by max-subtraction so saturated logits cannot overflow.
    The returned gradient is ``(softmax - onehot) / batch``; its rows sum
    to zero.

    Raises:
        ValueError: when a label falls outside ``[0, num_classes)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise StructureError(f"logits must be 2-d, got shape {logits.shape}")
    batch, num_classes = logits.shape
    if batch < 1:
        raise ValueError("batch must contain at least one example")
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = exp / total
    grad[rows, labels] -= 1.0
    grad /= batch
    return loss, grad


def finite_diff_oracle(loss_fn, layers: list[DenseLayer], h: float = 1e-6) -> GradientSet:
    """Central-difference gradient estimate ``(f(p+h) - f(p-h)) / 2h``.

    ``loss_fn`` maps the layer list to a scalar. Each parameter entry is
    perturbed in place and restored, so ``loss_fn`` must read parameters
    through the list it receives. Kept intentionally independent of
    :func:`backward` so the two can check each other.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    per_layer: list[tuple[np.ndarray, np.ndarray]] = []
    for layer in layers:
        dw = np.zeros_like(layer.weights)
        db = np.zeros_like(layer.bias)
        for arr, out in ((layer.weights, dw), (layer.bias, db)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                saved = arr[idx]
                arr[idx] = saved + h
                f_plus = loss_fn(layers)
                arr[idx] = saved - h
                f_minus = loss_fn(layers)
                arr[idx] = saved
                out[idx] = (f_plus - f_minus) / (2.0 * h)
        per_layer.append((dw, db))
    return GradientSet(per_layer)


def clip_l2(grads: GradientSet, tau: float = 0.5) -> GradientSet:
    """Scale ``grads`` so the global L2 norm over all entries is at most ``tau``.

    The norm is taken over the whole gradient set, not per layer. Inputs
    already at or below the threshold are returned unchanged (same
    object), which makes clipping bitwise idempotent.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    norm = grads.global_norm()
    if norm <= tau * (1.0 + _CLIP_SLACK):
        return grads
    scale = tau / norm
    return GradientSet([(dw * scale, db * scale) for dw, db in grads.per_layer], start=grads.start)


def sgd_step(layers: list[DenseLayer], grads: GradientSet, eta: float) -> list[DenseLayer]:
    """Return new layers with ``p - eta * g`` applied elementwise."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if len(layers) != len(grads):
        raise StructureError(f"{len(grads)} gradient pairs for {len(layers)} layers")
    updated = []
    for i, (layer, (dw, db)) in enumerate(zip(layers, grads.per_layer)):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise StructureError(
                f"layer {i}: gradient shapes {dw.shape}/{db.shape} do not match "
                f"parameters {layer.weights.shape}/{layer.bias.shape}"
            )
        updated.append(
            DenseLayer(layer.weights - eta * dw, layer.bias - eta * db, layer.activation)
        )
    return updated
