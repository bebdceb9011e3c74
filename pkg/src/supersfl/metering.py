"""Communication and simulated-time accounting.

Bytes are counted as if payloads traveled as 32-bit values (4 bytes per
element) plus a fixed 16-byte frame header per message, regardless of
the float64 math used internally. Simulated time advances only through
recorded durations; no wall clock is ever consulted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import DenseLayer, GradientSet

BYTES_PER_ELEMENT = 4
MESSAGE_HEADER_BYTES = 16

CHANNELS = ("up", "down", "broadcast")


def account_bytes(payload) -> int:
    """Wire size of one message carrying ``payload``.

    Accepts an ndarray, a list of layers, or a gradient set; the element
    count is the total number of scalar entries.
    """
    if isinstance(payload, np.ndarray):
        count = payload.size
    elif isinstance(payload, GradientSet):
        count = sum(dw.size + db.size for dw, db in payload.per_layer)
    elif isinstance(payload, (list, tuple)):
        count = sum(layer.weights.size + layer.bias.size for layer in payload)
    else:
        raise TypeError(f"cannot account bytes for {type(payload).__name__}")
    return count * BYTES_PER_ELEMENT + MESSAGE_HEADER_BYTES


def forward_flops(layers: list[DenseLayer], batch: int) -> float:
    """Multiply-add count for one forward pass, 2*B*in*out per layer."""
    return float(sum(2.0 * batch * layer.in_dim * layer.out_dim for layer in layers))


def param_count(layers: list[DenseLayer]) -> int:
    return sum(layer.weights.size + layer.bias.size for layer in layers)


@dataclass
class SimClock:
    """Monotone simulated clock; advances only via recorded events."""

    simulated_time_s: float = 0.0

    def advance(self, duration_s: float) -> None:
        if not math.isfinite(duration_s) or duration_s < 0:
            raise ValueError(f"event duration must be finite and >= 0, got {duration_s}")
        self.simulated_time_s += duration_s


@dataclass(frozen=True)
class CommEvent:
    round_index: int
    channel: str
    nbytes: int


@dataclass
class CommLedger:
    """Double-entry byte ledger: running counters plus a full event log.

    ``balanced()`` recomputes totals from the event log and compares them
    against the independently maintained counters.
    """

    events: list[CommEvent] = field(default_factory=list)
    totals: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHANNELS})

    def log(self, round_index: int, channel: str, nbytes: int) -> None:
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        if nbytes < 0:
            raise ValueError("nbytes must be >= 0")
        self.events.append(CommEvent(round_index, channel, int(nbytes)))
        self.totals[channel] += int(nbytes)

    def cumulative(self, channel: str) -> int:
        return self.totals[channel]

    def round_total(self, round_index: int, channel: str) -> int:
        return sum(
            e.nbytes for e in self.events if e.round_index == round_index and e.channel == channel
        )

    def balanced(self) -> bool:
        recomputed = {c: 0 for c in CHANNELS}
        for event in self.events:
            recomputed[event.channel] += event.nbytes
        return recomputed == self.totals
