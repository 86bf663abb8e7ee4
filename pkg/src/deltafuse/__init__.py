"""Delta-parameter extraction, sparsification and checkpoint merging.

The package is organized around a small set of layers:

- param_core: ParamSet containers, checkpoint files, seeded randomness
- delta_ops: deltas between checkpoints, low-rank adapters, sparsity report
- sparsify: random-drop-and-rescale, top-k trimming, threshold pruning
- merge_engine: linear / task arithmetic / sign-election / drop-then-elect /
  spherical interpolation merges driven by recipes
- toy_models: small dense networks with supervised and preference losses
  and analytic gradients
- pipeline: parallel vs sequential fine-tuning experiments on a synthetic
  benchmark
- cli: command line front end
"""

from .errors import (
    DeltafuseError,
    DivergenceDetected,
    EmptyBatch,
    EmptyParamSet,
    EmptySuite,
    FormatError,
    InvalidDensity,
    InvalidProbability,
    InvalidThreshold,
    MissingParameter,
    NonFiniteResult,
    ShapeMismatch,
    UnknownParameter,
    UnsupportedMethod,
    ZeroWeightSum,
)
from .param_core import (
    ParamSet,
    SeededRng,
    flatten_concat,
    keyed_uniforms,
    load_checkpoint,
    matmul,
    read_header,
    save_checkpoint,
    unflatten,
    zeros_like,
)
from .delta_ops import (
    DeltaSet,
    LoraAdapter,
    SparsityReport,
    apply_delta,
    compose_lora,
    extract_delta,
    format_sparsity_report,
    sparsity,
)
from .sparsify import SparsifySpec, dare, sparsify_delta, threshold_prune, trim_topk
from .toy_models import (
    LossValue,
    PreferenceBatch,
    PreferencePair,
    SupervisedBatch,
    ToyNet,
    accuracy,
    check_gradients,
    dpo_loss,
    forward,
    init_lora,
    init_params,
    load_dataset,
    lora_sft_loss,
    orpo_loss,
    pack_lora,
    preference_rate,
    save_dataset,
    sft_loss,
    unpack_lora,
)
from .merge_engine import (
    MergeRecipe,
    RecipeInput,
    apply_recipe,
    load_recipe,
    merge,
    merge_dare_ties,
    merge_linear,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
    run_recipe,
)
from .pipeline import (
    Benchmark,
    BenchmarkConfig,
    EvalResult,
    ExperimentConfig,
    ExperimentReport,
    ReportRow,
    TrainConfig,
    evaluate,
    format_report_table,
    load_experiment_config,
    make_benchmark,
    paired_recipe,
    run_experiment,
    run_parallel,
    run_sequential,
    train_adapter,
)

__version__ = "0.1.0"

__all__ = [
    "DeltafuseError",
    "DivergenceDetected",
    "EmptyBatch",
    "EmptyParamSet",
    "EmptySuite",
    "FormatError",
    "InvalidDensity",
    "InvalidProbability",
    "InvalidThreshold",
    "MissingParameter",
    "NonFiniteResult",
    "ShapeMismatch",
    "UnknownParameter",
    "UnsupportedMethod",
    "ZeroWeightSum",
    "ParamSet",
    "SeededRng",
    "flatten_concat",
    "keyed_uniforms",
    "load_checkpoint",
    "matmul",
    "read_header",
    "save_checkpoint",
    "unflatten",
    "zeros_like",
    "DeltaSet",
    "LoraAdapter",
    "SparsityReport",
    "apply_delta",
    "compose_lora",
    "extract_delta",
    "format_sparsity_report",
    "sparsity",
    "SparsifySpec",
    "dare",
    "sparsify_delta",
    "threshold_prune",
    "trim_topk",
    "LossValue",
    "PreferenceBatch",
    "PreferencePair",
    "SupervisedBatch",
    "ToyNet",
    "accuracy",
    "check_gradients",
    "dpo_loss",
    "forward",
    "init_lora",
    "init_params",
    "load_dataset",
    "lora_sft_loss",
    "orpo_loss",
    "pack_lora",
    "preference_rate",
    "save_dataset",
    "sft_loss",
    "unpack_lora",
    "MergeRecipe",
    "RecipeInput",
    "apply_recipe",
    "load_recipe",
    "merge",
    "merge_dare_ties",
    "merge_linear",
    "merge_slerp",
    "merge_task_arithmetic",
    "merge_ties",
    "run_recipe",
    "Benchmark",
    "BenchmarkConfig",
    "EvalResult",
    "ExperimentConfig",
    "ExperimentReport",
    "ReportRow",
    "TrainConfig",
    "evaluate",
    "format_report_table",
    "load_experiment_config",
    "make_benchmark",
    "paired_recipe",
    "run_experiment",
    "run_parallel",
    "run_sequential",
    "train_adapter",
    "__version__",
]
