"""Trace-driven MoE inference simulator with predictive expert replication."""

from .errors import (
    AggregationError,
    ConfigurationError,
    InfeasibleCapacityError,
    MetricError,
    MoesimError,
    NumericError,
    PlacementError,
    TraceParseError,
    TrainingError,
    ValidationError,
)
from .estimator import SruExpertPredictor
from .pipeline import PipelineConfig, PipelineResult, mode_equivalence_check, run_pipeline
from .placement import DeviceState, TransferEvent, TransferLog, apply_batch, apply_layer
from .planner import ReplicaPlan, cap_replicas, demand_counts, plan_all_layers
from .predictor import (
    HashTable,
    SruParams,
    SruState,
    TrainingResult,
    evaluate_accuracy,
    init_params,
    predict_batch,
    sparsemax,
    sru_cell,
    sru_forward,
    train_predictor,
)
from .report import SummaryRow, format_table, summarize
from .router_oracle import (
    Placement,
    ToyMoeParams,
    expert_forward,
    moe_forward,
    oracle_route_batch,
    route_top1,
)
from .simulator import (
    CostModel,
    Metrics,
    StrategyResult,
    simulate_layer,
    simulate_strategy,
    utilization,
)
from .workload import (
    Batch,
    ModelShape,
    RoutingTrace,
    generate_hot_trace,
    generate_trace,
    oracle_params_for_trace,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
