"""Attention-condenser networks for binary ultrasound frame triage.

Pure-numpy building blocks: a tape-based autodiff core over 4-D tensors,
a declarative graph builder, complexity/latency analysis, leakage-free
video-grouped data handling, a small SGD trainer, a constrained
architecture search loop, and occlusion-based explanation maps.
"""

from .analyzer import (
    ComplexityReport,
    LatencyStats,
    analyze,
    benchmark_latency,
    count_flops,
    count_macs,
    count_params,
    format_table,
    netscore,
    report_json,
)
from .condenser import AttentionCondenserParams, ac_forward, ac_init, ac_param_count
from .data import (
    DatasetManifest,
    NormalizationStats,
    SynthConfig,
    VideoRecord,
    compute_norm_stats,
    grouped_split,
    load_frames,
    load_manifest,
    load_mask,
    load_norm_stats,
    save_manifest,
    save_norm_stats,
    summarize,
    summary_table,
    synth_generate,
)
from .errors import (
    ConfigError,
    DataError,
    GraphBuildError,
    IntegrityError,
    ManifestError,
    MetricError,
    NumericError,
    ShapeError,
    StateError,
    TrainingDiverged,
    UsageError,
)
from .graph import (
    Activation,
    AttnCondenser,
    Conv,
    Dense,
    Depthwise,
    GlobalAvgPool,
    MaxPool,
    ModelGraph,
    Pointwise,
    PrototypeConfig,
    ResidualBegin,
    ResidualEnd,
    build_graph,
    deserialize_graph,
    graph_digest,
    load_weights,
    resnet50_descriptor,
    save_weights,
    seed_prototype,
    serialize_graph,
)
from .explain import (
    CriticalFactorMap,
    critical_regions,
    localization_score,
    occlusion_map,
    overlay_image,
)
from .search import (
    CandidateRecord,
    SearchBudget,
    SearchConstraints,
    SearchResult,
    indicator_1r,
    mutate,
    save_search_log,
    search,
)
from .tensor import OpRecord, Tape, Tensor, backward_pass, cross_entropy, grad_check
from .train import (
    EvalReport,
    TrainConfig,
    TrainHistory,
    evaluate,
    predict_scores,
    roc_auc,
    threshold_metrics,
    train,
)

__version__ = "0.1.0"
