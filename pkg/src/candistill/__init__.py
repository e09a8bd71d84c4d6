from .main import main, inspect_main
from .canio import CanFrame, EncodedDataset, Label, TokenSequence, FeatureVector, parse_hcrl_csv, tokenize
from .config import RunConfig, SimulationConfig, load_run_config
from .distill import DistillConfig, combined_loss, kd_loss, soften_logits, train_student_with_kd
from .evaluation import ConfusionMatrix, MetricsReport, compare_reports, confusion, detect, metrics
from .records import ExperimentRecord, load_model
from .student import BiLstm, DnnModel, StudentConfig, train_student_plain
from .teacher import TeacherConfig, TeacherModel, train_teacher
from .trafficgen import AttackSpec, BenignProfile, GeneratedLog, generate_benign, inject

__version__ = "0.1.0"
__all__ = [
    "main",
    "inspect_main",
    "CanFrame",
    "EncodedDataset",
    "Label",
    "TokenSequence",
    "FeatureVector",
    "parse_hcrl_csv",
    "tokenize",
    "RunConfig",
    "SimulationConfig",
    "load_run_config",
    "DistillConfig",
    "combined_loss",
    "kd_loss",
    "soften_logits",
    "train_student_with_kd",
    "ConfusionMatrix",
    "MetricsReport",
    "compare_reports",
    "confusion",
    "detect",
    "metrics",
    "ExperimentRecord",
    "load_model",
    "BiLstm",
    "DnnModel",
    "StudentConfig",
    "train_student_plain",
    "TeacherConfig",
    "TeacherModel",
    "train_teacher",
    "AttackSpec",
    "BenignProfile",
    "GeneratedLog",
    "generate_benign",
    "inject",
]
