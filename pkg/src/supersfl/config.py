"""Experiment configuration: defaults, YAML parsing, validation, overrides.

Defaults follow the framework's standard operating point: depth
coefficients alpha=0.5 layers/GB and beta=4, fusion clip threshold 0.5,
aggregation consistency weight 0.01, 5 s timeout, Dirichlet
concentration 0.5. Learning rate and batch size have no canonical
values and are plain tunables.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

MODES = ("ssfl", "sfl", "local")
FUSION_VARIANTS = ("full", "depth_only", "loss_only", "equal")


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


@dataclass
class DatasetConfig:
    num_classes: int = 4
    feature_dim: int = 8
    num_train: int = 4000
    num_test: int = 1000
    cluster_spread: float = 0.5


@dataclass
class AllocationParams:
    alpha: float = 0.5
    beta: float = 4.0
    epsilon: float = 1e-8


@dataclass
class TpgfParams:
    tau: float = 0.5
    eta: float = 0.05
    epsilon: float = 1e-8
    timeout_s: float = 5.0
    variant: str = "full"


@dataclass
class AggregationParams:
    lam: float = 0.01
    epsilon: float = 1e-8
    renormalize_weights: bool = False
    resync_on_reconnect: bool = False


# YAML section key -> (dataclass, {yaml key -> attribute}).
_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "allocation": AllocationParams,
    "tpgf": TpgfParams,
    "aggregation": AggregationParams,
}
_KEY_ALIASES = {"aggregation": {"lambda": "lam"}}


@dataclass
class ExperimentConfig:
    mode: str = "ssfl"
    num_clients: int = 10
    rounds: int = 30
    steps_per_round: int = 10
    batch_size: int = 32
    layer_dims: list[int] = field(default_factory=lambda: [8, 16, 16, 16, 16, 16, 16])
    seed: int = 0
    data_seed: int | None = None  # fixes the task (dataset/partition/profiles); None -> seed
    availability_p: float = 1.0
    dirichlet_concentration: float = 0.5
    min_samples_per_client: int = 0
    sfl_split_depth: int | None = None
    target_accuracy: float | None = None
    compute_s_per_flop: float = 1e-9
    write_audit: bool = False
    profiles: list[list[float]] | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    allocation: AllocationParams = field(default_factory=AllocationParams)
    tpgf: TpgfParams = field(default_factory=TpgfParams)
    aggregation: AggregationParams = field(default_factory=AggregationParams)

    @property
    def total_layers(self) -> int:
        return len(self.layer_dims) - 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        _require(self.num_clients >= 1, "num_clients: must be >= 1")
        _require(self.rounds >= 1, "rounds: must be >= 1")
        _require(self.steps_per_round >= 1, "steps_per_round: must be >= 1")
        _require(self.batch_size >= 1, "batch_size: must be >= 1")
        _require(
            len(self.layer_dims) >= 3,
            "layer_dims: needs the input width plus at least 2 encoder widths",
        )
        _require(all(int(d) >= 1 for d in self.layer_dims), "layer_dims: widths must be >= 1")
        _require(
            self.layer_dims[0] == self.dataset.feature_dim,
            f"layer_dims: first entry {self.layer_dims[0]} must equal "
            f"dataset.feature_dim {self.dataset.feature_dim}",
        )
        _require(0.0 <= self.availability_p <= 1.0, "availability_p: must lie in [0, 1]")
        _require(self.dirichlet_concentration > 0, "dirichlet_concentration: must be > 0")
        _require(self.min_samples_per_client >= 0, "min_samples_per_client: must be >= 0")
        _require(self.compute_s_per_flop >= 0, "compute_s_per_flop: must be >= 0")
        if self.sfl_split_depth is not None:
            _require(
                1 <= self.sfl_split_depth <= self.total_layers - 1,
                f"sfl_split_depth: must lie in [1, {self.total_layers - 1}]",
            )
        if self.target_accuracy is not None:
            _require(0.0 < self.target_accuracy <= 1.0, "target_accuracy: must lie in (0, 1]")
        ds = self.dataset
        _require(ds.num_classes >= 2, "dataset.num_classes: must be >= 2")
        _require(ds.feature_dim >= 2, "dataset.feature_dim: must be >= 2")
        _require(
            ds.num_train >= 10 * ds.num_classes,
            "dataset.num_train: must be >= 10 * num_classes",
        )
        _require(ds.num_test >= 1, "dataset.num_test: must be >= 1")
        _require(ds.cluster_spread >= 0, "dataset.cluster_spread: must be >= 0")
        _require(self.allocation.alpha >= 0, "allocation.alpha: must be >= 0")
        _require(self.allocation.beta >= 0, "allocation.beta: must be >= 0")
        _require(self.allocation.epsilon > 0, "allocation.epsilon: must be > 0")
        _require(self.tpgf.tau > 0, "tpgf.tau: must be > 0")
        _require(self.tpgf.eta > 0, "tpgf.eta: must be > 0")
        _require(self.tpgf.epsilon > 0, "tpgf.epsilon: must be > 0")
        _require(self.tpgf.timeout_s >= 0, "tpgf.timeout_s: must be >= 0")
        if self.tpgf.variant not in FUSION_VARIANTS:
            raise ConfigError(
                f"tpgf.variant: must be one of {FUSION_VARIANTS}, got {self.tpgf.variant!r}"
            )
        _require(self.aggregation.lam >= 0, "aggregation.lambda: must be >= 0")
        _require(self.aggregation.epsilon > 0, "aggregation.epsilon: must be > 0")
        if self.profiles is not None:
            _require(
                len(self.profiles) == self.num_clients,
                f"profiles: expected {self.num_clients} entries, got {len(self.profiles)}",
            )
            for i, entry in enumerate(self.profiles):
                _require(
                    len(entry) == 2 and all(v > 0 for v in entry),
                    f"profiles[{i}]: must be a positive [memory_gb, latency_ms] pair",
                )


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _coerce(value, reference, key: str):
    if isinstance(reference, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(reference, int) and not isinstance(reference, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(reference, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(reference, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _apply_section(target, data: dict, section: str) -> None:
    aliases = _KEY_ALIASES.get(section, {})
    known = {f.name for f in fields(target)}
    for raw_key, value in data.items():
        key = aliases.get(raw_key, raw_key)
        if key not in known:
            raise ConfigError(f"unknown key {raw_key!r} in section {section!r}")
        setattr(target, key, _coerce(value, getattr(target, key), f"{section}.{raw_key}"))


def _profiles_from(value, key: str) -> list[list[float]]:
    if not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list of profiles")
    out = []
    for i, entry in enumerate(value):
        if isinstance(entry, dict):
            extra = set(entry) - {"memory_gb", "latency_ms"}
            if extra or set(entry) != {"memory_gb", "latency_ms"}:
                raise ConfigError(
                    f"{key}[{i}]: expected keys memory_gb and latency_ms, got {sorted(entry)}"
                )
            out.append([float(entry["memory_gb"]), float(entry["latency_ms"])])
        elif isinstance(entry, (list, tuple)) and len(entry) == 2:
            out.append([float(entry[0]), float(entry[1])])
        else:
            raise ConfigError(f"{key}[{i}]: expected [memory_gb, latency_ms]")
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a validated config from a (possibly partial) nested mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    cfg = ExperimentConfig()
    top_fields = {f.name for f in fields(cfg)}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _apply_section(getattr(cfg, key), value, key)
        elif key == "layer_dims":
            if not isinstance(value, list) or not value:
                raise ConfigError("layer_dims: expected a non-empty list of widths")
            cfg.layer_dims = [int(v) for v in value]
        elif key == "profiles":
            cfg.profiles = None if value is None else _profiles_from(value, "profiles")
        elif key in ("sfl_split_depth", "target_accuracy", "data_seed"):
            if value is None:
                setattr(cfg, key, None)
            elif key == "target_accuracy":
                cfg.target_accuracy = _coerce(value, 0.0, key)
            else:
                setattr(cfg, key, _coerce(value, 0, key))
        elif key in top_fields:
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key))
        else:
            raise ConfigError(f"unknown key {key!r}")
    cfg.validate()
    return cfg


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: unparseable value {raw!r}") from exc
    return key.strip(), value


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a raw config mapping."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = _parse_override(item)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part!r} is not a section")
        node[parts[-1]] = value
    return data


def parse_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    """Load a YAML config file (or defaults) and apply CLI overrides.

    An empty or missing-keys file yields the defaults; unknown keys,
    malformed values, and out-of-range settings are rejected with the
    offending key named.
    """
    if path is None:
        data: dict = {}
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        data = {} if loaded is None else loaded
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Nested plain mapping that parses back to an identical config."""
    data = asdict(cfg)
    agg = data["aggregation"]
    agg["lambda"] = agg.pop("lam")
    return data


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(serialize_config(cfg), sort_keys=False)
