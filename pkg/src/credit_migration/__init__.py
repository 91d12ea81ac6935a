"""Early prediction of corporate credit rating migrations.

A small, self-contained stack: a float64 autodiff tensor engine, a
multi-task transformer autoencoder, the training objective and Adam, a
panel-data pipeline with a synthetic generator, an expanding-window
backtest, and the evaluation metrics plus CLI on top.
"""

from .backtest import (
    BacktestResult,
    BacktestWindow,
    PredictionRecord,
    build_schedule,
    gap_study,
    pseudo_no_gap_mode,
    run_backtest,
)
from .data import (
    CompanySample,
    InputError,
    PanelRow,
    ingest_csv,
    preprocess,
    stats_report,
)
from .metrics import MetricsReport, accuracy, breakdown, build_report, compare_modes, f1_for_class
from .model import (
    ForwardOutput,
    ModelConfig,
    ModelParams,
    desk_config,
    forward,
    init_params,
    load_checkpoint,
    migration_from_rating,
    positional_encoding,
    save_checkpoint,
)
from .synthetic import generate_synthetic
from .tensor import Tensor
from .training import (
    Adam,
    LossWeights,
    TrainConfig,
    TrainResult,
    loss_envision,
    loss_migration,
    loss_rating,
    objective,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BacktestResult",
    "BacktestWindow",
    "CompanySample",
    "ForwardOutput",
    "InputError",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "PanelRow",
    "PredictionRecord",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "accuracy",
    "breakdown",
    "build_report",
    "build_schedule",
    "compare_modes",
    "desk_config",
    "f1_for_class",
    "forward",
    "gap_study",
    "generate_synthetic",
    "ingest_csv",
    "init_params",
    "load_checkpoint",
    "loss_envision",
    "loss_migration",
    "loss_rating",
    "migration_from_rating",
    "objective",
    "positional_encoding",
    "preprocess",
    "pseudo_no_gap_mode",
    "run_backtest",
    "save_checkpoint",
    "stats_report",
    "train",
]
