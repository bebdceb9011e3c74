"""Named experiment presets and their comparison reports.

Four studies ship with the package:

  table1-scaled      ssfl vs sfl at 10 and 50 clients; the target
                     accuracy for the round/byte comparison is whatever
                     the sfl baseline reaches by its round 40
  ablation-tpgf      the four fusion-rule variants (full, depth_only,
                     loss_only, equal) over a fixed seed set
  availability-sweep final accuracy across six server-availability
                     levels, from always-on to serverless
  allocation-demo    no training; prints the depth assignment table for
                     a sampled cohort

Every preset is a plain list of labelled ExperimentConfigs, so each run
is reproducible on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .allocation import AllocationConfig, assign_depths, measure_profiles
from .config import ExperimentConfig, config_from_dict, serialize_config
from .sim import RoundMetrics, RunResult, run_experiment, write_audit_jsonl, write_metrics_csv, write_metrics_jsonl

NOT_REACHED = "not reached"

AVAILABILITY_LEVELS = (1.0, 0.7, 0.5, 0.2, 0.1, 0.0)
ABLATION_VARIANTS = ("full", "depth_only", "loss_only", "equal")
ABLATION_SEEDS = (0, 1, 2, 3, 4)
SWEEP_SEEDS = (0, 1, 2)
TABLE1_BASELINE_ROUND = 40


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    kind: str  # "experiment" or "allocation-table"
    runs: tuple[tuple[str, ExperimentConfig], ...]


def _config(**over) -> ExperimentConfig:
    cfg = config_from_dict(over)
    cfg.validate()
    return cfg


def _table1_runs() -> tuple[tuple[str, ExperimentConfig], ...]:
    runs = []
    for clients in (10, 50):
        for mode in ("ssfl", "sfl"):
            runs.append(
                (
                    f"{mode}-{clients}c",
                    _config(
                        mode=mode,
                        num_clients=clients,
                        rounds=45,
                        seed=100 + clients,
                        min_samples_per_client=64,
                    ),
                )
            )
    return tuple(runs)


def _ablation_runs() -> tuple[tuple[str, ExperimentConfig], ...]:
    runs = []
    for variant in ABLATION_VARIANTS:
        for seed in ABLATION_SEEDS:
            runs.append(
                (
                    f"{variant}-s{seed}",
                    _config(
                        mode="ssfl",
                        num_clients=10,
                        rounds=12,
                        seed=seed,
                        min_samples_per_client=64,
                        dataset={"cluster_spread": 1.0},
                        tpgf={"variant": variant, "eta": 0.1},
                    ),
                )
            )
    return tuple(runs)


def _sweep_runs() -> tuple[tuple[str, ExperimentConfig], ...]:
    runs = []
    for p in AVAILABILITY_LEVELS:
        for seed in SWEEP_SEEDS:
            runs.append(
                (
                    f"p{int(round(p * 100)):03d}-s{seed}",
                    _config(
                        mode="ssfl",
                        num_clients=10,
                        rounds=12,
                        seed=seed,
                        availability_p=p,
                        min_samples_per_client=64,
                        dataset={"cluster_spread": 1.2},
                    ),
                )
            )
    return tuple(runs)


def preset_catalog() -> dict[str, Preset]:
    return {
        "table1-scaled": Preset(
            "table1-scaled",
            "ssfl vs sfl rounds/bytes/time to a shared target, 10 and 50 clients",
            "experiment",
            _table1_runs(),
        ),
        "ablation-tpgf": Preset(
            "ablation-tpgf",
            "fusion-rule ablation: full vs depth-only vs loss-only vs equal",
            "experiment",
            _ablation_runs(),
        ),
        "availability-sweep": Preset(
            "availability-sweep",
            "final accuracy under decreasing server availability (100%..0%)",
            "experiment",
            _sweep_runs(),
        ),
        "allocation-demo": Preset(
            "allocation-demo",
            "depth assignment table for a sampled heterogeneous cohort",
            "allocation-table",
            (("cohort", _config(num_clients=12, seed=7)),),
        ),
    }


def rounds_to_target(metrics: list[RoundMetrics], target: float) -> int | None:
    """First 1-based round whose accuracy reaches ``target``, else None."""
    for m in metrics:
        if m.test_accuracy >= target:
            return m.round + 1
    return None


def total_bytes(m: RoundMetrics) -> int:
    return m.cumulative_bytes_up + m.cumulative_bytes_down + m.cumulative_broadcast_bytes


def megabytes(nbytes: int) -> float:
    return nbytes / 1_000_000.0


def summarize_run(
    label: str, metrics: list[RoundMetrics], target: float | None
) -> dict:
    final = metrics[-1]
    crossing = rounds_to_target(metrics, target) if target is not None else None
    at = metrics[crossing - 1] if crossing is not None else final
    return {
        "label": label,
        "final_accuracy": final.test_accuracy,
        "rounds_to_target": crossing if crossing is not None else NOT_REACHED,
        "comm_mb": megabytes(total_bytes(at)),
        "sim_time_s": at.simulated_time_s,
    }


def format_summary_table(rows: list[dict]) -> str:
    header = f"{'run':<22} {'final_acc':>9} {'rounds_to_target':>16} {'comm_MB':>10} {'sim_time_s':>11}"
    lines = ["(MB = 1,000,000 bytes)", header, "-" * len(header)]
    for row in rows:
        rtt = row["rounds_to_target"]
        lines.append(
            f"{row['label']:<22} {row['final_accuracy']:>9.4f} {str(rtt):>16} "
            f"{row['comm_mb']:>10.3f} {row['sim_time_s']:>11.3f}"
        )
    return "\n".join(lines)


def allocation_table(cfg: ExperimentConfig) -> str:
    profiles = measure_profiles(cfg.num_clients, cfg.seed)
    alloc_cfg = AllocationConfig(
        total_layers=cfg.total_layers,
        alpha=cfg.allocation.alpha,
        beta=cfg.allocation.beta,
        epsilon=cfg.allocation.epsilon,
    )
    depths = assign_depths(profiles, alloc_cfg)
    header = f"{'client':>6} {'memory_gb':>10} {'latency_ms':>11} {'depth':>6}"
    lines = [header, "-" * len(header)]
    for i, (profile, depth) in enumerate(zip(profiles, depths)):
        lines.append(
            f"{i:>6} {profile.memory_gb:>10.2f} {profile.latency_ms:>11.1f} {depth:>6}"
        )
    lines.append(f"total encoder layers: {cfg.total_layers} (client depth capped at {cfg.total_layers - 1})")
    return "\n".join(lines)


def _table1_report(results: dict[str, RunResult]) -> str:
    rows = []
    for clients in (10, 50):
        sfl = results[f"sfl-{clients}c"].metrics
        ssfl = results[f"ssfl-{clients}c"].metrics
        baseline_idx = min(TABLE1_BASELINE_ROUND, len(sfl)) - 1
        target = sfl[baseline_idx].test_accuracy
        for label, metrics in ((f"ssfl-{clients}c", ssfl), (f"sfl-{clients}c", sfl)):
            row = summarize_run(label, metrics, target)
            row["label"] = f"{label} (target {target:.4f})"
            rows.append(row)
    return format_summary_table(rows)


def _group_stats(results: dict[str, RunResult], prefix: str) -> tuple[float, float]:
    finals = [
        r.metrics[-1].test_accuracy for label, r in results.items() if label.startswith(prefix)
    ]
    return float(np.mean(finals)), float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0


def _ablation_report(results: dict[str, RunResult]) -> str:
    header = f"{'variant':<12} {'mean_final_acc':>14} {'std':>8}"
    lines = [header, "-" * len(header)]
    for variant in ABLATION_VARIANTS:
        mean, std = _group_stats(results, f"{variant}-")
        lines.append(f"{variant:<12} {mean:>14.4f} {std:>8.4f}")
    return "\n".join(lines)


def _sweep_report(results: dict[str, RunResult]) -> str:
    header = f"{'availability':<13} {'mean_final_acc':>14} {'std':>8}"
    lines = [header, "-" * len(header)]
    for p in AVAILABILITY_LEVELS:
        mean, std = _group_stats(results, f"p{int(round(p * 100)):03d}-")
        lines.append(f"{p:<13.2f} {mean:>14.4f} {std:>8.4f}")
    return "\n".join(lines)


def run_preset(preset: Preset, outdir: str | Path) -> tuple[dict[str, RunResult], str]:
    """Execute every run in a preset, write metrics files, return the report."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if preset.kind == "allocation-table":
        report = allocation_table(preset.runs[0][1])
        (outdir / "allocation.txt").write_text(report + "\n")
        return {}, report

    results: dict[str, RunResult] = {}
    for label, cfg in preset.runs:
        result = run_experiment(cfg)
        results[label] = result
        write_metrics_csv(result.metrics, outdir / f"{label}.csv")
        write_metrics_jsonl(result.metrics, outdir / f"{label}.jsonl")
        if cfg.write_audit:
            write_audit_jsonl(result.audit, outdir / f"{label}_audit.jsonl")

    if preset.name == "table1-scaled":
        report = _table1_report(results)
    elif preset.name == "ablation-tpgf":
        report = _ablation_report(results)
    elif preset.name == "availability-sweep":
        report = _sweep_report(results)
    else:
        report = format_summary_table(
            [summarize_run(label, r.metrics, None) for label, r in results.items()]
        )
    (outdir / "summary.txt").write_text(report + "\n")
    return results, report
