"""Deterministic experiment engine.

Generates a synthetic clustered classification task, partitions it
non-IID across clients with a Dirichlet split, and drives rounds of
local steps + aggregation under three modes:

  ssfl   adaptive depths, three-phase fusion, fallback on timeouts
  sfl    fixed uniform split, server-gradient-only updates, stalls on
         timeouts
  local  serverless: every step is a fallback step; rounds still end
         with aggregation and prefix re-sync, but no broadcast traffic
         is charged because no server distributes anything

Everything is derived from the config seed through named substreams, so
a (config, seed) pair fixes every metric to the bit. Test accuracy is
always the accuracy of the federation's deployed predictor: the
mean-probability ensemble over every model the federation maintains.
Under ssfl/local that is each client's prefix-plus-head model plus the
coordinator's end-to-end model (aggregated encoder + server
classifier); under sfl every member is the identical full global
model, so the ensemble coincides exactly with global-model accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import AggregationConfig, ClientReport, aggregate_round
from .allocation import AllocationConfig, ClientProfile, allocate_all, measure_profiles
from .config import ExperimentConfig
from .metering import CommLedger, SimClock, account_bytes, forward_flops, param_count
from .nn import forward
from .supernet import SuperNet, build_supernet, make_client_head, slice_prefix
from .tpgf import (
    MODE_FALLBACK,
    MODE_FULL,
    MODE_STALLED,
    ClientState,
    ConnectivityOracle,
    baseline_sfl_step,
    fallback_step,
    tpgf_step,
)

# Named substreams of the master seed.
_STREAM_DATASET = 0
_STREAM_PARTITION = 1
_STREAM_PROFILES = 2
_STREAM_NET = 3
_STREAM_HEADS = 4
_STREAM_CONNECTIVITY = 5
_STREAM_BATCHES = 6

METRICS_FIELDS = (
    "round",
    "mode",
    "test_accuracy",
    "cumulative_bytes_up",
    "cumulative_bytes_down",
    "cumulative_broadcast_bytes",
    "simulated_time_s",
    "fallback_step_count",
    "mean_client_loss",
    "mean_server_loss",
)


@dataclass
class Dataset:
    features: np.ndarray  # [N, D] float64
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    num_classes: int


@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    mode: str
    test_accuracy: float
    cumulative_bytes_up: int
    cumulative_bytes_down: int
    cumulative_broadcast_bytes: int
    simulated_time_s: float
    fallback_step_count: int
    mean_client_loss: float
    mean_server_loss: float


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    audit: list[dict]
    net: SuperNet
    clients: list[ClientState]
    ledger: CommLedger


def _substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *extra]))


def _substream_seed(seed: int, stream: int, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, stream, *extra]).generate_state(1)[0])


def generate_dataset(
    num_classes: int, feature_dim: int, num_samples: int, cluster_spread: float, seed: int
) -> Dataset:
    """Gaussian class clusters with seed-fixed means and balanced labels."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    if num_samples < 10 * num_classes:
        raise ValueError(f"need at least {10 * num_classes} samples for {num_classes} classes")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes, feature_dim)) * 2.0
    # Balanced label counts (first classes absorb the remainder), shuffled.
    base = num_samples // num_classes
    counts = [base + (1 if k < num_samples % num_classes else 0) for k in range(num_classes)]
    labels = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)])
    rng.shuffle(labels)
    noise = rng.normal(0.0, 1.0, size=(num_samples, feature_dim))
    features = means[labels] + cluster_spread * noise
    return Dataset(features, labels, num_classes)


def dirichlet_partition(
    ds: Dataset,
    num_clients: int,
    concentration: float,
    seed: int,
    min_per_client: int = 0,
) -> list[Shard]:
    """Split sample indices across clients, class by class.

    For every class, client proportions are drawn from a symmetric
    Dirichlet; smaller concentrations give more skewed shards. The
    shards are always disjoint and covering. ``min_per_client`` moves
    indices from the largest shards until every shard meets the minimum.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for k in range(ds.num_classes):
        class_idx = np.flatnonzero(ds.labels == k)
        rng.shuffle(class_idx)
        proportions = rng.dirichlet(np.full(num_clients, concentration))
        cuts = (np.cumsum(proportions) * len(class_idx)).astype(np.int64)[:-1]
        for client_id, piece in enumerate(np.split(class_idx, cuts)):
            assigned[client_id].append(piece)
    shards = [np.concatenate(parts) if parts else np.empty(0, dtype=np.int64) for parts in assigned]
    if min_per_client > 0:
        _redistribute(shards, min_per_client)
    return [Shard(i, np.sort(s)) for i, s in enumerate(shards)]


def _redistribute(shards: list[np.ndarray], minimum: int) -> None:
    while True:
        sizes = [len(s) for s in shards]
        smallest = min(range(len(shards)), key=lambda i: (sizes[i], i))
        if sizes[smallest] >= minimum:
            return
        largest = max(range(len(shards)), key=lambda i: (sizes[i], -i))
        if sizes[largest] <= minimum:
            raise ValueError(f"cannot guarantee {minimum} samples per client")
        shards[smallest] = np.append(shards[smallest], shards[largest][-1])
        shards[largest] = shards[largest][:-1]


def sample_connectivity(
    num_clients: int, rounds: int, availability_p: float, seed: int
) -> ConnectivityOracle:
    """Bernoulli availability per (client, round), constant within a round."""
    if not 0.0 <= availability_p <= 1.0:
        raise ValueError("availability_p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    table = rng.random((num_clients, rounds)) < availability_p
    return ConnectivityOracle.from_table(table)


def _world_seed(config: ExperimentConfig) -> int:
    # The "world" (task data, partition, client hardware) can be pinned
    # independently of training randomness for fixed-benchmark studies.
    return config.seed if config.data_seed is None else config.data_seed


def initial_supernet(config: ExperimentConfig) -> SuperNet:
    """The exact global model a run starts from (same substream as the run)."""
    return build_supernet(
        config.layer_dims,
        config.dataset.num_classes,
        _substream_seed(config.seed, _STREAM_NET),
    )


def _resolve_profiles(config: ExperimentConfig) -> list[ClientProfile]:
    if config.profiles is not None:
        return [ClientProfile(m, l) for m, l in config.profiles]
    return measure_profiles(
        config.num_clients, _substream_seed(_world_seed(config), _STREAM_PROFILES)
    )


def _build_clients(config: ExperimentConfig, net: SuperNet) -> list[ClientState]:
    profiles = _resolve_profiles(config)
    total_layers = net.num_layers
    if config.mode == "sfl":
        depth = config.sfl_split_depth or max(1, total_layers // 2)
        heads_seed = _substream_seed(config.seed, _STREAM_HEADS)
        clients = []
        for i, profile in enumerate(profiles):
            head_seed = int(np.random.SeedSequence([heads_seed, i]).generate_state(1)[0])
            clients.append(
                ClientState(
                    client_id=i,
                    depth=depth,
                    encoder=slice_prefix(net, depth),
                    head=make_client_head(net, depth, net.num_classes, head_seed),
                    profile=profile,
                )
            )
        return clients
    alloc_cfg = AllocationConfig(
        total_layers=total_layers,
        alpha=config.allocation.alpha,
        beta=config.allocation.beta,
        epsilon=config.allocation.epsilon,
    )
    allocations = allocate_all(profiles, alloc_cfg, net, _substream_seed(config.seed, _STREAM_HEADS))
    return [
        ClientState(
            client_id=i,
            depth=a.depth,
            encoder=a.encoder,
            head=a.head,
            profile=profile,
        )
        for i, (a, profile) in enumerate(zip(allocations, profiles))
    ]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _evaluate(
    net: SuperNet, clients: list[ClientState], test_x: np.ndarray, test_y: np.ndarray, mode: str
) -> float:
    global_logits, _ = forward(net.encoder_layers + [net.server_classifier], test_x)
    if mode == "sfl":
        # Every baseline client deploys the identical full model, so the
        # ensemble reduces to the global model itself.
        return float(np.mean(np.argmax(global_logits, axis=1) == test_y))
    probs = _softmax(global_logits)
    for client in clients:
        logits, _ = forward(client.encoder + [client.head], test_x)
        probs += _softmax(logits)
    return float(np.mean(np.argmax(probs, axis=1) == test_y))


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Execute one configured run and return per-round metrics plus final state."""
    config.validate()

    data_cfg = config.dataset
    full = generate_dataset(
        data_cfg.num_classes,
        data_cfg.feature_dim,
        data_cfg.num_train + data_cfg.num_test,
        data_cfg.cluster_spread,
        _substream_seed(_world_seed(config), _STREAM_DATASET),
    )
    train = Dataset(full.features[: data_cfg.num_train], full.labels[: data_cfg.num_train], full.num_classes)
    test_x = full.features[data_cfg.num_train :]
    test_y = full.labels[data_cfg.num_train :]

    shards = dirichlet_partition(
        train,
        config.num_clients,
        config.dirichlet_concentration,
        _substream_seed(_world_seed(config), _STREAM_PARTITION),
        min_per_client=config.min_samples_per_client,
    )
    net = initial_supernet(config)
    clients = _build_clients(config, net)
    oracle = sample_connectivity(
        config.num_clients,
        config.rounds,
        config.availability_p,
        _substream_seed(config.seed, _STREAM_CONNECTIVITY),
    )
    batch_rngs = [
        _substream(config.seed, _STREAM_BATCHES, i) for i in range(config.num_clients)
    ]
    agg_cfg = AggregationConfig(
        lam=config.aggregation.lam,
        epsilon=config.aggregation.epsilon,
        renormalize_weights=config.aggregation.renormalize_weights,
    )

    ledger = CommLedger()
    clock = SimClock()
    c0 = config.compute_s_per_flop
    encoder_params = param_count(net.encoder_layers)
    metrics: list[RoundMetrics] = []
    audit: list[dict] = []

    for round_index in range(config.rounds):
        reports: list[ClientReport] = []
        durations = [0.0]
        fallback_count = 0
        round_client_losses: list[float] = []
        round_server_losses: list[float] = []

        active = [c for c in clients if len(shards[c.client_id].indices) > 0]
        per_client: dict[int, dict[str, list[float]]] = {
            c.client_id: {"duration": [], "client_losses": [], "server_losses": []}
            for c in active
        }
        # Clients run their local steps concurrently; the server applies
        # phase-2 requests for step k in ascending client-id order before
        # any client starts step k+1.
        for step_index in range(config.steps_per_round):
            for client in active:
                indices = shards[client.client_id].indices
                batch_idx = batch_rngs[client.client_id].choice(
                    indices, size=config.batch_size, replace=True
                )
                x, y = train.features[batch_idx], train.labels[batch_idx]
                if config.mode == "local":
                    outcome = fallback_step(
                        client, x, y, tau=config.tpgf.tau, eta=config.tpgf.eta
                    )
                elif config.mode == "ssfl":
                    if (
                        config.aggregation.resync_on_reconnect
                        and client.last_mode == MODE_FALLBACK
                        and oracle.available(client.client_id, round_index, step_index)
                    ):
                        client.encoder = slice_prefix(net, client.depth)
                        ledger.log(round_index, "broadcast", account_bytes(client.encoder))
                    outcome = tpgf_step(
                        client,
                        net,
                        x,
                        y,
                        oracle,
                        round_index,
                        step_index,
                        tau=config.tpgf.tau,
                        eta=config.tpgf.eta,
                        epsilon=config.tpgf.epsilon,
                        variant=config.tpgf.variant,
                    )
                else:
                    outcome = baseline_sfl_step(
                        client, net, x, y, oracle, round_index, step_index, eta=config.tpgf.eta
                    )
                if outcome.bytes_up:
                    ledger.log(round_index, "up", outcome.bytes_up)
                if outcome.bytes_down:
                    ledger.log(round_index, "down", outcome.bytes_down)
                duration = c0 * outcome.flops
                if outcome.mode == MODE_FULL and client.profile is not None:
                    duration += 2.0 * client.profile.latency_ms / 1000.0
                elif outcome.mode == MODE_STALLED:
                    duration += config.tpgf.timeout_s
                record = per_client[client.client_id]
                record["duration"].append(duration)
                if outcome.mode == MODE_FALLBACK:
                    fallback_count += 1
                if not math.isnan(outcome.client_loss):
                    record["client_losses"].append(outcome.client_loss)
                if outcome.server_loss is not None:
                    record["server_losses"].append(outcome.server_loss)

        for client in active:
            record = per_client[client.client_id]
            durations.append(float(sum(record["duration"])))
            client_losses = record["client_losses"]
            server_losses = record["server_losses"]
            round_client_losses.extend(client_losses)
            round_server_losses.extend(server_losses)
            if config.mode == "sfl":
                if server_losses:
                    reports.append(
                        ClientReport(
                            client.client_id,
                            client.depth,
                            client.encoder,
                            client_loss=float(np.mean(server_losses)),
                            server_loss=None,
                        )
                    )
            else:
                reports.append(
                    ClientReport(
                        client.client_id,
                        client.depth,
                        client.encoder,
                        client_loss=float(np.mean(client_losses)),
                        server_loss=float(np.mean(server_losses)) if server_losses else None,
                    )
                )

        agg = aggregate_round(reports, net, agg_cfg, fusion_variant=config.tpgf.variant)
        if config.write_audit:
            weight_by_id = {w.client_id: w.w for w in agg.weights}
            for report in reports:
                if report.client_id in weight_by_id:
                    audit.append(
                        {
                            "round": round_index,
                            "client_id": report.client_id,
                            "depth": report.depth,
                            "client_loss": report.client_loss,
                            "server_loss": report.server_loss,
                            "fused_loss": agg.fused_losses[report.client_id],
                            "weight": weight_by_id[report.client_id],
                        }
                    )
        for client in clients:
            client.encoder = slice_prefix(net, client.depth)
            if config.mode != "local":
                ledger.log(round_index, "broadcast", account_bytes(client.encoder))

        clock.advance(max(durations) + c0 * encoder_params)
        accuracy = _evaluate(net, clients, test_x, test_y, config.mode)
        metrics.append(
            RoundMetrics(
                round=round_index,
                mode=config.mode,
                test_accuracy=accuracy,
                cumulative_bytes_up=ledger.cumulative("up"),
                cumulative_bytes_down=ledger.cumulative("down"),
                cumulative_broadcast_bytes=ledger.cumulative("broadcast"),
                simulated_time_s=clock.simulated_time_s,
                fallback_step_count=fallback_count,
                mean_client_loss=float(np.mean(round_client_losses))
                if round_client_losses
                else float("nan"),
                mean_server_loss=float(np.mean(round_server_losses))
                if round_server_losses
                else float("nan"),
            )
        )

    if not ledger.balanced():
        raise RuntimeError("communication ledger out of balance")
    return RunResult(metrics, audit, net, clients, ledger)


def _metric_value(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_metrics_csv(metrics: list[RoundMetrics], path: str | Path) -> None:
    """Fixed column order, repr-formatted floats; stable across runs."""
    lines = [",".join(METRICS_FIELDS)]
    for m in metrics:
        row = []
        for name in METRICS_FIELDS:
            value = getattr(m, name)
            row.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics_jsonl(metrics: list[RoundMetrics], path: str | Path) -> None:
    """One JSON object per round; NaN losses are serialized as null."""
    lines = [
        json.dumps({name: _metric_value(getattr(m, name)) for name in METRICS_FIELDS})
        for m in metrics
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def write_audit_jsonl(audit: list[dict], path: str | Path) -> None:
    Path(path).write_text("\n".join(json.dumps(row) for row in audit) + "\n")


def client_step_flops(client: ClientState, batch: int, mode: str) -> float:
    """Client compute cost per step; exposed for clock-model checks."""
    encoder_fwd = forward_flops(client.encoder, batch)
    head_fwd = forward_flops([client.head], batch)
    if mode == MODE_FULL:
        return 3.0 * (encoder_fwd + head_fwd) + 2.0 * encoder_fwd
    return 3.0 * (encoder_fwd + head_fwd)
