"""Few-shot anomalous sound detection with episodic prototypes and Reptile meta-learning."""
from .anomaly import ScoredClip, anomaly_score, outlier_exposure_loss, synthesize_outliers
from .autodiff import ParameterVector, Tensor
from .benchgen import BenchmarkSpec, Dataset, default_spec, generate, load
from .config import RunConfig
from .encoder import Encoder
from .episodic import Episode, PrototypeSet, TaskSpec, episode_loss, sample_episode
from .evaluation import EvalReport, auroc, evaluate, pauroc
from .frontend import featurize, stft_logmel
from .meta import MetaSchedule, reptile_meta_update, train

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSpec", "Dataset", "Encoder", "Episode", "EvalReport", "MetaSchedule", "ParameterVector",
    "PrototypeSet", "RunConfig", "ScoredClip", "TaskSpec", "Tensor", "anomaly_score", "auroc",
    "default_spec", "episode_loss", "evaluate", "featurize", "generate", "load", "outlier_exposure_loss",
    "pauroc", "reptile_meta_update", "sample_episode", "stft_logmel", "synthesize_outliers", "train",
]
