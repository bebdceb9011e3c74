"""End-of-round collaborative aggregation of client encoder prefixes.

Each participating client gets one composite weight

    w_i = (depth_i / sum_j depth_j) * ((loss_i + eps)^-1 / sum_j (loss_j + eps)^-1)

where ``loss_i`` is the client loss, blended with the server loss via
the same fusion rule used during training whenever server supervision
was available that round. Weights are computed once per round over the
whole cohort and used raw (unnormalized) per layer.

Averaging is layer-aligned: for encoder layer ``l`` only the clients
deep enough to hold it contribute, and every layer is pulled toward the
server's copy by a consistency weight ``lam``:

    merged = (sum_i w_i * theta_i + lam * theta_s) / (sum_i w_i + lam)

which is the unique minimizer of
``sum_i w_i ||theta_i - m||^2 + lam ||theta_s - m||^2``. A plain
gradient-descent minimizer of that objective is kept alongside as an
independent oracle. Classifier heads (client and server) never
participate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DenseLayer, StructureError
from .supernet import SuperNet, check_alignment
from .tpgf import fusion_weight


@dataclass(frozen=True)
class AggregationConfig:
    lam: float = 0.01
    epsilon: float = 1e-8
    renormalize_weights: bool = False

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class AggWeight:
    client_id: int
    w: float


@dataclass
class ClientReport:
    """What one client submits at the end of a round."""

    client_id: int
    depth: int
    encoder: list[DenseLayer]
    client_loss: float
    server_loss: float | None = None


@dataclass
class RoundAggregation:
    """Weights actually used, fused losses, and any rejected client ids."""

    weights: list[AggWeight] = field(default_factory=list)
    fused_losses: dict[int, float] = field(default_factory=dict)
    rejected: list[int] = field(default_factory=list)


def fused_loss(report: ClientReport, total_layers: int, epsilon: float = 1e-8,
               fusion_variant: str = "full") -> float:
    """Blend client and server losses with the training-time fusion rule.

    Clients that ran the whole round in fallback carry no server loss and
    contribute their client loss directly.
    """
    if report.server_loss is None:
        return report.client_loss
    weights = fusion_weight(
        report.client_loss,
        report.server_loss,
        report.depth,
        total_layers - report.depth,
        epsilon=epsilon,
        variant=fusion_variant,
    )
    return weights.w_client * report.client_loss + weights.w_server * report.server_loss


def client_weights(
    reports: list[ClientReport],
    total_layers: int,
    cfg: AggregationConfig,
    fusion_variant: str = "full",
) -> list[AggWeight]:
    """Composite per-client weights over the full cohort.

    The result is independent of report order: reports are processed in
    ascending client id.
    """
    if not reports:
        raise ValueError("reports must be non-empty")
    ordered = sorted(reports, key=lambda r: r.client_id)
    losses = [fused_loss(r, total_layers, cfg.epsilon, fusion_variant) for r in ordered]
    depth_total = float(sum(r.depth for r in ordered))
    inv = [1.0 / (loss + cfg.epsilon) for loss in losses]
    inv_total = float(sum(inv))
    return [
        AggWeight(r.client_id, (r.depth / depth_total) * (inv_i / inv_total))
        for r, inv_i in zip(ordered, inv)
    ]


def aggregate_layer(
    contributions: list[tuple[np.ndarray, float]],
    server_params: np.ndarray,
    cfg: AggregationConfig,
) -> np.ndarray:
    """Closed-form weighted average of one layer's parameters.

    With no contributors the server's copy is returned verbatim, and a
    unanimous cohort equal to the server's copy is a bitwise fixed point.
    """
    if not contributions:
        return server_params.copy()
    for params, _ in contributions:
        if params.shape != server_params.shape:
            raise StructureError(
                f"contribution shape {params.shape} does not match server "
                f"shape {server_params.shape}"
            )
    if all(np.array_equal(params, server_params) for params, _ in contributions):
        return server_params.copy()
    weight_sum = float(sum(w for _, w in contributions))
    merged = cfg.lam * server_params
    for params, w in contributions:
        merged = merged + w * params
    return merged / (weight_sum + cfg.lam)


def aggregate_round(
    reports: list[ClientReport],
    net: SuperNet,
    cfg: AggregationConfig,
    fusion_variant: str = "full",
) -> RoundAggregation:
    """Merge client prefixes into the global encoder, layer by layer.

    Misaligned reports are rejected (recorded by client id) and the round
    proceeds without them. Layers nobody holds keep the server's values
    bitwise. Heads are untouched. With ``renormalize_weights`` each
    layer's contributor weights are rescaled to sum to one before the
    server term is applied.
    """
    result = RoundAggregation()
    accepted = []
    for report in sorted(reports, key=lambda r: r.client_id):
        if check_alignment(net, report.encoder, report.depth):
            accepted.append(report)
        else:
            result.rejected.append(report.client_id)
    if not accepted:
        return result

    result.weights = client_weights(accepted, net.num_layers, cfg, fusion_variant)
    result.fused_losses = {
        r.client_id: fused_loss(r, net.num_layers, cfg.epsilon, fusion_variant)
        for r in accepted
    }
    by_id = {w.client_id: w.w for w in result.weights}

    for layer_index in range(net.num_layers):
        holders = [r for r in accepted if r.depth >= layer_index + 1]
        if not holders:
            continue
        raw = [by_id[r.client_id] for r in holders]
        if cfg.renormalize_weights:
            scale = float(sum(raw))
            raw = [w / scale for w in raw]
        reference = net.encoder_layers[layer_index]
        new_weights = aggregate_layer(
            [(r.encoder[layer_index].weights, w) for r, w in zip(holders, raw)],
            reference.weights,
            cfg,
        )
        new_bias = aggregate_layer(
            [(r.encoder[layer_index].bias, w) for r, w in zip(holders, raw)],
            reference.bias,
            cfg,
        )
        net.encoder_layers[layer_index] = DenseLayer(new_weights, new_bias, reference.activation)
    return result


def numeric_minimizer_oracle(
    contributions: list[tuple[np.ndarray, float]],
    server_params: np.ndarray,
    lam: float,
    tolerance: float = 1e-10,
    max_iterations: int = 200_000,
) -> np.ndarray:
    """Minimize the consistency-regularized averaging objective by plain GD.

    Independent of :func:`aggregate_layer`: starts from zero and descends
    ``sum_i w_i ||theta_i - m||^2 + lam ||theta_s - m||^2`` until the
    gradient is below ``tolerance`` per entry.
    """
    if not contributions and lam == 0:
        raise ValueError("objective has no minimizer without contributions or lam > 0")
    weight_sum = sum(w for _, w in contributions) + lam
    step = 0.2 / weight_sum
    merged = np.zeros_like(server_params)
    for _ in range(max_iterations):
        grad = 2.0 * lam * (merged - server_params)
        for params, w in contributions:
            grad = grad + 2.0 * w * (merged - params)
        if np.max(np.abs(grad)) < tolerance:
            break
        merged = merged - step * grad
    return merged
