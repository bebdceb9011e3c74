"""Weight-sharing super-network and client subnetwork extraction.

The super-network is the single global model: an ordered encoder stack
plus a server-side classifier head. Every client trains a *contiguous
prefix* of the encoder (layers ``1..d``) together with its own small
classifier head; the server can always continue a client's forward pass
because prefixes start at layer 1 and chain dimensionally.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import IDENTITY, RELU, DenseLayer, StructureError, init_dense

CHECKPOINT_VERSION = 1


@dataclass
class SuperNet:
    """Global backbone: encoder layers plus the server classifier."""

    encoder_layers: list[DenseLayer]
    server_classifier: DenseLayer

    def __post_init__(self) -> None:
        if len(self.encoder_layers) < 2:
            raise StructureError("super-network needs at least 2 encoder layers")
        for i in range(1, len(self.encoder_layers)):
            prev, cur = self.encoder_layers[i - 1], self.encoder_layers[i]
            if prev.out_dim != cur.in_dim:
                raise StructureError(
                    f"layer {i}: in_dim {cur.in_dim} does not chain from out_dim {prev.out_dim}"
                )
        if self.server_classifier.in_dim != self.encoder_layers[-1].out_dim:
            raise StructureError(
                f"classifier in_dim {self.server_classifier.in_dim} does not match "
                f"final encoder out_dim {self.encoder_layers[-1].out_dim}"
            )
        if self.server_classifier.activation != IDENTITY:
            raise StructureError("server classifier must use the identity activation")

    @property
    def num_layers(self) -> int:
        return len(self.encoder_layers)

    @property
    def num_classes(self) -> int:
        return self.server_classifier.out_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder_layers[0].in_dim


def build_supernet(layer_dims: list[int], num_classes: int, seed: int) -> SuperNet:
    """Construct a super-network from ``layer_dims = [input, h1, ..., hL]``.

    Produces ``len(layer_dims) - 1`` ReLU encoder layers and an identity
    classifier mapping the last hidden width to ``num_classes``.
    Deterministic given ``seed``.
    """
    if len(layer_dims) < 3:
        raise ValueError(
            f"layer_dims needs the input width plus at least 2 encoder widths, got {layer_dims}"
        )
    if any(int(d) < 1 for d in layer_dims):
        raise ValueError(f"layer widths must be >= 1, got {layer_dims}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    encoder = [
        init_dense(rng, int(layer_dims[i]), int(layer_dims[i + 1]), RELU)
        for i in range(len(layer_dims) - 1)
    ]
    classifier = init_dense(rng, int(layer_dims[-1]), num_classes, IDENTITY)
    return SuperNet(encoder, classifier)


def slice_prefix(net: SuperNet, depth: int) -> list[DenseLayer]:
    """Deep-copy encoder layers ``1..depth``; the server keeps the rest.

    ``depth`` must leave at least one encoder layer on the server side,
    so valid depths are ``1 <= depth <= num_layers - 1``.
    """
    if not 1 <= depth <= net.num_layers - 1:
        raise ValueError(
            f"depth must lie in [1, {net.num_layers - 1}], got {depth}"
        )
    return [layer.copy() for layer in net.encoder_layers[:depth]]


def make_client_head(net: SuperNet, depth: int, num_classes: int, seed: int) -> DenseLayer:
    """Build the lightweight client classifier for a split at ``depth``.

    A single identity-activation dense layer from the smashed width at
    ``depth`` to ``num_classes``; deterministic given ``seed``.
    """
    if not 1 <= depth <= net.num_layers - 1:
        raise ValueError(f"depth must lie in [1, {net.num_layers - 1}], got {depth}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    return init_dense(rng, net.encoder_layers[depth - 1].out_dim, num_classes, IDENTITY)


def check_alignment(net: SuperNet, client_prefix: list[DenseLayer], depth: int) -> bool:
    """True iff ``client_prefix`` is shape-aligned with global layers ``1..depth``."""
    if not 1 <= depth <= net.num_layers - 1:
        return False
    if len(client_prefix) != depth:
        return False
    for local, reference in zip(client_prefix, net.encoder_layers[:depth]):
        if local.weights.shape != reference.weights.shape:
            return False
        if local.bias.shape != reference.bias.shape:
            return False
        if local.activation != reference.activation:
            return False
    return True


def save_checkpoint(net: SuperNet, path: str | Path) -> None:
    """Dump all layer shapes and parameters; round-trips bit-exactly."""
    arrays: dict[str, np.ndarray] = {
        "version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "encoder_count": np.array(net.num_layers, dtype=np.int64),
        "classifier_weights": net.server_classifier.weights,
        "classifier_bias": net.server_classifier.bias,
        "classifier_activation": np.array(net.server_classifier.activation),
    }
    for i, layer in enumerate(net.encoder_layers):
        arrays[f"encoder_{i}_weights"] = layer.weights
        arrays[f"encoder_{i}_bias"] = layer.bias
        arrays[f"encoder_{i}_activation"] = np.array(layer.activation)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> SuperNet:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        count = int(data["encoder_count"])
        encoder = [
            DenseLayer(
                data[f"encoder_{i}_weights"],
                data[f"encoder_{i}_bias"],
                str(data[f"encoder_{i}_activation"][()]),
            )
            for i in range(count)
        ]
        classifier = DenseLayer(
            data["classifier_weights"],
            data["classifier_bias"],
            str(data["classifier_activation"][()]),
        )
    return SuperNet(encoder, classifier)
