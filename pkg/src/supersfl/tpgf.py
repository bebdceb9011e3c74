"""Three-phase gradient fusion training steps and the fallback path.

One step consumes one mini-batch. When the server is reachable:

  Phase 1 (client): forward the encoder prefix, score the smashed
      representation with the local head, update the head, and keep the
      L2-clipped encoder gradient of the local loss.
  Phase 2 (server): continue the forward pass through the remaining
      encoder layers and the server classifier, update those parameters,
      and send back the gradient with respect to the smashed data. The
      client backpropagates it through its prefix to get the
      server-originated encoder gradient (left unclipped).
  Phase 3 (client): blend the two encoder gradients with a weight that
      is the product of a depth share and an inverse-loss reliability
      share, then apply one SGD step to the prefix.

When the server misses the timeout the client falls back to a purely
local update: the Phase-1 computation plus an encoder step with the
clipped local gradient. Server state is never touched on that path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .allocation import ClientProfile
from .metering import account_bytes, forward_flops
from .nn import (
    DenseLayer,
    ForwardCache,
    GradientSet,
    StructureError,
    backward,
    clip_l2,
    forward,
    sgd_step,
    softmax_cross_entropy,
)
from .supernet import SuperNet

FUSION_VARIANTS = ("full", "depth_only", "loss_only", "equal")

MODE_FULL = "full"
MODE_FALLBACK = "fallback"
MODE_STALLED = "stalled"


@dataclass(frozen=True)
class FusionWeights:
    """Convex weights for blending the client and server encoder gradients."""

    w_client: float
    w_server: float


@dataclass(frozen=True)
class StepOutcome:
    """Record of one training step, feeding metrics and round reports."""

    mode: str
    client_loss: float
    server_loss: float | None
    fused_grad_norm: float
    bytes_up: int
    bytes_down: int
    flops: float


@dataclass(frozen=True)
class ConnectivityOracle:
    """Deterministic availability schedule for client-server exchanges."""

    fn: Callable[[int, int, int], bool]

    def available(self, client_id: int, round_index: int, step_index: int) -> bool:
        return bool(self.fn(client_id, round_index, step_index))

    @classmethod
    def always(cls) -> "ConnectivityOracle":
        return cls(lambda client, rnd, step: True)

    @classmethod
    def never(cls) -> "ConnectivityOracle":
        return cls(lambda client, rnd, step: False)

    @classmethod
    def from_table(cls, table: np.ndarray) -> "ConnectivityOracle":
        """Per-(client, round) schedule; the step index is ignored."""
        frozen = np.asarray(table, dtype=bool).copy()
        return cls(lambda client, rnd, step: bool(frozen[client, rnd]))


@dataclass
class ClientState:
    """Everything one client owns: prefix, head, profile, and last losses."""

    client_id: int
    depth: int
    encoder: list[DenseLayer]
    head: DenseLayer
    profile: ClientProfile | None = None
    last_client_loss: float | None = None
    last_server_loss: float | None = None
    last_mode: str | None = None


@dataclass
class Phase1Result:
    client_loss: float
    encoder_grads: GradientSet
    smashed: np.ndarray
    encoder_cache: ForwardCache


@dataclass
class Phase2Result:
    server_loss: float
    smashed_grad: np.ndarray


def phase1_local(
    client: ClientState, x: np.ndarray, y: np.ndarray, *, tau: float = 0.5, eta: float = 0.05
) -> Phase1Result:
    """Local supervision: update the head, return the clipped encoder gradient.

    The encoder gradient and the head gradient come from one backward
    pass through head-then-prefix; the head is updated afterwards so both
    gradients see the same parameters.
    """
    smashed, encoder_cache = forward(client.encoder, x)
    logits, head_cache = forward([client.head], smashed)
    client_loss, d_logits = softmax_cross_entropy(logits, y)
    head_grads, d_smashed = backward([client.head], head_cache, d_logits)
    encoder_grads, _ = backward(client.encoder, encoder_cache, d_smashed)
    client.head = sgd_step([client.head], head_grads, eta)[0]
    return Phase1Result(client_loss, clip_l2(encoder_grads, tau), smashed, encoder_cache)


def phase2_server(
    net: SuperNet, smashed: np.ndarray, labels: np.ndarray, depth: int, *, eta: float = 0.05
) -> Phase2Result:
    """Server supervision: train the suffix and classifier, return the smashed gradient.

    One backward pass serves both the parameter update and the gradient
    returned to the client, so the smashed gradient reflects the
    pre-update parameters.
    """
    if not 1 <= depth <= net.num_layers - 1:
        raise ValueError(f"depth must lie in [1, {net.num_layers - 1}], got {depth}")
    suffix = net.encoder_layers[depth:] + [net.server_classifier]
    if smashed.shape[1] != suffix[0].in_dim:
        raise StructureError(
            f"smashed width {smashed.shape[1]} does not match layer {depth} "
            f"input width {suffix[0].in_dim}"
        )
    logits, cache = forward(suffix, smashed)
    server_loss, d_logits = softmax_cross_entropy(logits, labels)
    grads, smashed_grad = backward(suffix, cache, d_logits)
    updated = sgd_step(suffix, grads, eta)
    net.encoder_layers[depth:] = updated[:-1]
    net.server_classifier = updated[-1]
    return Phase2Result(server_loss, smashed_grad)


def fusion_weight(
    client_loss: float,
    server_loss: float,
    client_depth: int,
    server_depth: int,
    *,
    epsilon: float = 1e-8,
    variant: str = "full",
) -> FusionWeights:
    """Client-side blend weight: depth share times inverse-loss reliability.

    The ``variant`` switch turns either factor off for ablations:
    ``depth_only`` keeps only the depth share, ``loss_only`` only the
    reliability share, and ``equal`` fixes the weight at one half.
    """
    if variant not in FUSION_VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}")
    if client_loss < 0 or server_loss < 0:
        raise ValueError("losses must be non-negative")
    if client_depth < 1 or server_depth < 1:
        raise ValueError("depths must be >= 1")
    depth_share = client_depth / (client_depth + server_depth)
    inv_client = 1.0 / (client_loss + epsilon)
    inv_server = 1.0 / (server_loss + epsilon)
    reliability = inv_client / (inv_client + inv_server)
    if variant == "full":
        w_client = depth_share * reliability
    elif variant == "depth_only":
        w_client = depth_share
    elif variant == "loss_only":
        w_client = reliability
    else:
        w_client = 0.5
    return FusionWeights(w_client, 1.0 - w_client)


def fuse(g_client: GradientSet, g_server: GradientSet, weights: FusionWeights) -> GradientSet:
    """Elementwise ``w_client * g_client + w_server * g_server``."""
    if g_client.start != g_server.start or len(g_client) != len(g_server):
        raise StructureError(
            f"gradient sets cover different layer ranges: "
            f"start {g_client.start} len {len(g_client)} vs "
            f"start {g_server.start} len {len(g_server)}"
        )
    fused = []
    for i, ((cw, cb), (sw, sb)) in enumerate(zip(g_client.per_layer, g_server.per_layer)):
        if cw.shape != sw.shape or cb.shape != sb.shape:
            raise StructureError(f"layer {g_client.start + i}: gradient shapes differ")
        fused.append(
            (
                weights.w_client * cw + weights.w_server * sw,
                weights.w_client * cb + weights.w_server * sb,
            )
        )
    return GradientSet(fused, start=g_client.start)


def _step_flops(client: ClientState, batch: int, mode: str) -> float:
    # Client-side cost only: forward + ~2x forward for each backward pass.
    encoder_fwd = forward_flops(client.encoder, batch)
    head_fwd = forward_flops([client.head], batch)
    if mode == MODE_FULL:
        return 3.0 * (encoder_fwd + head_fwd) + 2.0 * encoder_fwd
    return 3.0 * (encoder_fwd + head_fwd)


def tpgf_step(
    client: ClientState,
    net: SuperNet,
    x: np.ndarray,
    y: np.ndarray,
    oracle: ConnectivityOracle,
    round_index: int,
    step_index: int,
    *,
    tau: float = 0.5,
    eta: float = 0.05,
    epsilon: float = 1e-8,
    variant: str = "full",
    w_client_override: float | None = None,
) -> StepOutcome:
    """One mini-batch step: full three-phase fusion, or fallback on timeout.

    Fusion touches only the encoder prefix; the head was already updated
    in Phase 1. ``w_client_override`` pins the blend weight directly,
    bypassing the loss/depth computation (used for equivalence checks).
    """
    if not oracle.available(client.client_id, round_index, step_index):
        return fallback_step(client, x, y, tau=tau, eta=eta)

    p1 = phase1_local(client, x, y, tau=tau, eta=eta)
    bytes_up = account_bytes(p1.smashed) + account_bytes(np.asarray(y))
    p2 = phase2_server(net, p1.smashed, y, client.depth, eta=eta)
    bytes_down = account_bytes(p2.smashed_grad)
    g_server, _ = backward(client.encoder, p1.encoder_cache, p2.smashed_grad)

    if w_client_override is not None:
        weights = FusionWeights(w_client_override, 1.0 - w_client_override)
    else:
        weights = fusion_weight(
            p1.client_loss,
            p2.server_loss,
            client.depth,
            net.num_layers - client.depth,
            epsilon=epsilon,
            variant=variant,
        )
    fused = fuse(p1.encoder_grads, g_server, weights)
    client.encoder = sgd_step(client.encoder, fused, eta)

    client.last_client_loss = p1.client_loss
    client.last_server_loss = p2.server_loss
    client.last_mode = MODE_FULL
    return StepOutcome(
        mode=MODE_FULL,
        client_loss=p1.client_loss,
        server_loss=p2.server_loss,
        fused_grad_norm=fused.global_norm(),
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        flops=_step_flops(client, x.shape[0], MODE_FULL),
    )


def fallback_step(
    client: ClientState, x: np.ndarray, y: np.ndarray, *, tau: float = 0.5, eta: float = 0.05
) -> StepOutcome:
    """Local-only step: Phase-1 computation plus an encoder step on the clipped gradient.

    Touches no server state and moves no bytes.
    """
    p1 = phase1_local(client, x, y, tau=tau, eta=eta)
    client.encoder = sgd_step(client.encoder, p1.encoder_grads, eta)
    client.last_client_loss = p1.client_loss
    client.last_mode = MODE_FALLBACK
    return StepOutcome(
        mode=MODE_FALLBACK,
        client_loss=p1.client_loss,
        server_loss=None,
        fused_grad_norm=p1.encoder_grads.global_norm(),
        bytes_up=0,
        bytes_down=0,
        flops=_step_flops(client, x.shape[0], MODE_FALLBACK),
    )


def baseline_sfl_step(
    client: ClientState,
    net: SuperNet,
    x: np.ndarray,
    y: np.ndarray,
    oracle: ConnectivityOracle,
    round_index: int,
    step_index: int,
    *,
    eta: float = 0.05,
) -> StepOutcome:
    """Fixed-split baseline: server-gradient-only encoder updates.

    No local head, no clipping, no fusion. When the server is
    unreachable the step is skipped entirely (the caller charges the
    timeout to the clock), so at zero availability parameters freeze.
    """
    if not oracle.available(client.client_id, round_index, step_index):
        client.last_mode = MODE_STALLED
        return StepOutcome(
            mode=MODE_STALLED,
            client_loss=float("nan"),
            server_loss=None,
            fused_grad_norm=0.0,
            bytes_up=0,
            bytes_down=0,
            flops=0.0,
        )
    smashed, cache = forward(client.encoder, x)
    bytes_up = account_bytes(smashed) + account_bytes(np.asarray(y))
    p2 = phase2_server(net, smashed, y, client.depth, eta=eta)
    bytes_down = account_bytes(p2.smashed_grad)
    g_server, _ = backward(client.encoder, cache, p2.smashed_grad)
    client.encoder = sgd_step(client.encoder, g_server, eta)
    client.last_server_loss = p2.server_loss
    client.last_mode = MODE_FULL
    return StepOutcome(
        mode=MODE_FULL,
        client_loss=float("nan"),
        server_loss=p2.server_loss,
        fused_grad_norm=g_server.global_norm(),
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        flops=3.0 * forward_flops(client.encoder, x.shape[0]),
    )
