"""Resource-aware subnetwork depth assignment.

Each client reports a one-time resource profile (memory in GB, link
latency in ms). Depth is a composite of a memory term and a normalized
latency term, floored separately and clamped to ``[1, L-1]``:

    depth = clamp( floor(alpha * memory)
                 + floor(beta * (lat_max - lat) / (lat_max - lat_min + eps)),
                 1, L - 1 )

``lat_min``/``lat_max`` are observed over the cohort once at
initialization and frozen for the run; profiles are never re-measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import DenseLayer
from .supernet import SuperNet, make_client_head, slice_prefix


@dataclass(frozen=True)
class ClientProfile:
    memory_gb: float
    latency_ms: float

    def __post_init__(self) -> None:
        for name in ("memory_gb", "latency_ms"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and positive, got {value}")


@dataclass(frozen=True)
class AllocationConfig:
    total_layers: int
    alpha: float = 0.5
    beta: float = 4.0
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.total_layers < 2:
            raise ValueError("total_layers must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ClientAllocation:
    """One client's assigned depth, encoder prefix copy, and classifier head."""

    depth: int
    encoder: list[DenseLayer]
    head: DenseLayer


def measure_profiles(
    num_clients: int,
    seed: int,
    memory_range: tuple[float, float] = (2.0, 16.0),
    latency_range: tuple[float, float] = (20.0, 200.0),
) -> list[ClientProfile]:
    """Sample simulated client profiles, uniform over the given ranges."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = np.random.default_rng(seed)
    memories = rng.uniform(*memory_range, size=num_clients)
    latencies = rng.uniform(*latency_range, size=num_clients)
    return [ClientProfile(float(m), float(l)) for m, l in zip(memories, latencies)]


def compute_depth(
    profile: ClientProfile, lat_min: float, lat_max: float, cfg: AllocationConfig
) -> int:
    """Apply the composite depth rule for one client."""
    if not lat_min <= profile.latency_ms <= lat_max:
        raise ValueError(
            f"latency {profile.latency_ms} outside observed range [{lat_min}, {lat_max}]"
        )
    memory_score = math.floor(cfg.alpha * profile.memory_gb)
    latency_score = math.floor(
        cfg.beta * (lat_max - profile.latency_ms) / (lat_max - lat_min + cfg.epsilon)
    )
    depth = min(memory_score + latency_score, cfg.total_layers - 1)
    return max(1, depth)


def assign_depths(profiles: list[ClientProfile], cfg: AllocationConfig) -> list[int]:
    """Depths for a whole cohort; latency bounds come from the cohort itself."""
    if not profiles:
        raise ValueError("profiles must be non-empty")
    lat_min = min(p.latency_ms for p in profiles)
    lat_max = max(p.latency_ms for p in profiles)
    return [compute_depth(p, lat_min, lat_max, cfg) for p in profiles]


def allocate_all(
    profiles: list[ClientProfile], cfg: AllocationConfig, net: SuperNet, seed: int
) -> list[ClientAllocation]:
    """Assign every client a depth, a prefix copy, and a matching head."""
    depths = assign_depths(profiles, cfg)
    allocations = []
    for i, depth in enumerate(depths):
        head_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        allocations.append(
            ClientAllocation(
                depth=depth,
                encoder=slice_prefix(net, depth),
                head=make_client_head(net, depth, net.num_classes, head_seed),
            )
        )
    return allocations
