"""Desk-scale vision-language-action policy with a shared telepathy factor."""

from .action import ActionBundle, ActionWorkspace, fuse_and_drive
from .adapter import GateConfig, GateDiagnostics, adapt, compute_risk, gate_scale
from .config import ModelConfig, tiny_config
from .errors import (
    ComparabilityError,
    ConfigurationError,
    ContractError,
    DimensionError,
    IntegrityError,
    LoadError,
    SigmaError,
    TrainingDivergedError,
)
from .language import LanguageWorkspace, TelepathyState
from .policy import SigmaPolicy, build_policy, collate, load_policy, save_weights
from .replay import EvalConfig, EvalReport, WeightStats, batch_metrics, compare, run_eval, weight_stats
from .shards import PreprocessConfig, ShardWriter, WindowSample, iterate_shards, load_samples, preprocess
from .training import (
    CurriculumSchedule,
    TrafConfig,
    TrainConfig,
    TsacConfig,
    curriculum_weights,
    intent_loss,
    lora_apply,
    sem_loss,
    tau_reg,
    total_loss,
    traf_loss,
    train_loop,
)
from .vision import VisionWorkspace

__version__ = "0.1.0"
