"""Resource-aware split federated learning with gradient fusion, at desk scale.

A deterministic, numpy-only implementation of split federated training
over a weight-sharing super-network: heterogeneous clients train
contiguous encoder prefixes sized to their resources, blend local and
server gradients per step, keep training through server outages via
local classifier heads, and merge layer-aligned updates each round.
"""

from .aggregation import (
    AggregationConfig,
    AggWeight,
    ClientReport,
    aggregate_layer,
    aggregate_round,
    client_weights,
    fused_loss,
    numeric_minimizer_oracle,
)
from .allocation import (
    AllocationConfig,
    ClientAllocation,
    ClientProfile,
    allocate_all,
    assign_depths,
    compute_depth,
    measure_profiles,
)
from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config, serialize_config
from .metering import CommLedger, SimClock, account_bytes
from .nn import (
    DenseLayer,
    GradientSet,
    StructureError,
    backward,
    clip_l2,
    finite_diff_oracle,
    forward,
    sgd_step,
    softmax_cross_entropy,
)
from .sim import (
    Dataset,
    RoundMetrics,
    RunResult,
    Shard,
    dirichlet_partition,
    generate_dataset,
    run_experiment,
    sample_connectivity,
)
from .supernet import (
    SuperNet,
    build_supernet,
    check_alignment,
    load_checkpoint,
    make_client_head,
    save_checkpoint,
    slice_prefix,
)
from .tpgf import (
    ClientState,
    ConnectivityOracle,
    FusionWeights,
    StepOutcome,
    baseline_sfl_step,
    fallback_step,
    fuse,
    fusion_weight,
    phase1_local,
    phase2_server,
    tpgf_step,
)

__version__ = "0.1.0"
