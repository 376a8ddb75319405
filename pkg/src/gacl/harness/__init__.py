from .config import ConfigError, GridWarning, ModelConfig, load_config
from .metrics import MetricsReport, mae, nmae, reports_to_csv, rmse
from .model import GACLModel
from .training import (
    BaselineWarning,
    ConfigMismatchError,
    LeakageAudit,
    NoEligibleTargets,
    TrainResult,
    ablation_table,
    baseline_global_mean,
    compare_to_baseline,
    eligible_targets,
    evaluate,
    predict_targets,
    run_ablation_suite,
    train,
)

__all__ = [
    "BaselineWarning",
    "ConfigError",
    "ConfigMismatchError",
    "GACLModel",
    "GridWarning",
    "LeakageAudit",
    "MetricsReport",
    "ModelConfig",
    "NoEligibleTargets",
    "TrainResult",
    "ablation_table",
    "baseline_global_mean",
    "compare_to_baseline",
    "eligible_targets",
    "evaluate",
    "load_config",
    "mae",
    "nmae",
    "predict_targets",
    "reports_to_csv",
    "rmse",
    "run_ablation_suite",
    "train",
]
