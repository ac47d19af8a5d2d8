"""Compact permutation-invariant vision transformer with a few-shot
experiment harness: from-scratch tensors with reverse-mode gradients,
the model and its ablation variants, dataset containers, the training
protocol, evaluation metrics, and Friedman/Nemenyi rank statistics.
"""

from .data import (
    DatasetSplit,
    FewShotSample,
    FormatError,
    SamplingError,
    few_shot_sample,
    load_container,
    make_synthetic,
    resize_bilinear,
    save_container,
    to_model_input,
)
from .metrics import (
    MetricError,
    PredictionSet,
    ScoreTable,
    UndefinedMetricError,
    accuracy,
    cd_grouping,
    friedman_test,
    macro_f1,
    nemenyi_cd,
    rank_models,
    regime_advantage,
    roc_auc,
    threshold_accuracy,
)
from .model import (
    ConfigError,
    ModelConfig,
    ModelParams,
    ParamsError,
    adaptive_residual,
    attention_block,
    baseline_config,
    count_params,
    embed,
    forward,
    forward_patches,
    init_params,
    load_params,
    param_breakdown,
    patchify,
    pool,
    save_params,
)
from .rng import Rng
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
)
from .train import (
    DEFAULT_SEEDS,
    AdamState,
    RunRecord,
    TrainProtocol,
    adam_step,
    config_id,
    cross_entropy,
    evaluate,
    generalization_gap,
    run_protocol,
)

__version__ = "0.1.0"
