"""Deterministic federated-learning simulator with update-based selection.

The package simulates synchronous federated averaging over label-skewed
client partitions and compares client-selection strategies, including an
entropy-guided strategy that reads nothing but each client's output-layer
bias displacement. See the README for the CLI surface.
"""

from ._version import __version__
from .cluster import (
    HALF_PI,
    ClusterAssignment,
    ClusterConfig,
    annotate_means,
    cluster_clients,
    distance_matrix,
    pair_distance,
    ward_cluster,
)
from .config import (
    DEFAULT_TEMPERATURE,
    build_data,
    load_config,
    normalize_config,
    to_experiment_config,
)
from .data import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    ClientDataset,
    LabelDistribution,
    Partition,
    PartitionSpec,
    dirichlet_partition,
    entropy_nats,
    generate_blobs,
    label_distribution,
    load_idx,
)
from .engine import (
    CS_FULL_VECTOR_LIMIT,
    METRICS_COLUMNS,
    TAG_DATASET,
    TAG_LOCAL,
    TAG_MODEL_INIT,
    TAG_PARTITION,
    TAG_SELECTOR,
    ExperimentConfig,
    RoundMetrics,
    Simulation,
    build_manifest,
    evaluate,
    run_experiment,
    savitzky_golay,
    substream,
    substream_int,
    system_heterogeneity,
    worker_count,
    write_metrics_csv,
)
from .errors import ConfigError, DomainError, FedsimError, IdxParseError, InvariantError
from .estimator import (
    BiasUpdateRecord,
    ConfusionAverages,
    EnvelopeParams,
    EstimatorConfig,
    confusion_averages,
    entropy_gap_lower_bound,
    envelope_coverage,
    envelope_value,
    estimate_entropy,
    expected_bias_update,
    fit_envelope,
    gradient_gap_points,
)
from .harness import DriftProbeRow, EntropyProbeRow, drift_probe, entropy_probe
from .nn import (
    OPTIMIZERS,
    PROB_FLOOR,
    LocalUpdate,
    MlpModel,
    TrainConfig,
    batch_gradient,
    bias_grad_closed_form,
    ce_loss,
    forward,
    layer_param_count,
    local_update,
    softmax,
)
from .report import (
    MetricsFile,
    aggregate_by_selector,
    format_summary_table,
    load_metrics_csv,
    rounds_to_target,
    summarize_metrics,
)
from .selector import (
    DRAW_CAP_FACTOR,
    SELECTOR_KINDS,
    CostCounter,
    SelectionPolicy,
    annealing_coefficient,
    build_policy,
    check_selection,
    draw_once,
    select_coverage_greedy,
    select_entropy_guided,
    select_one_per_cluster,
    select_top_loss,
    select_weighted_random,
    warmup_select,
)

__all__ = [name for name in dir() if not name.startswith("_")]
