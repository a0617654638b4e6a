"""QoS prediction with multi-level clustering, sparsity filling and a
semi-offline two-stage neural regressor."""

from ._kernels import BACKEND
from .clustering import ClusterForest, build_forest
from .dataset import DatasetBundle, GeoContext, QosKind, SplitSpec, augment, load_wsdream, mask_cold_start, split
from .engine import DriftReport, FesEngine, PipelineConfig, PredictionResult, Query, build_artifacts, drift_check
from .errors import (
    ColdStartError,
    ConfigError,
    DataError,
    FesError,
    InsufficientClusterError,
    StaleModelError,
    TrainingDivergedError,
)
from .imputation import MfParams, PreprocessedStore, cf_fill, mf_fill, preprocess_all
from .metrics import ThresholdSet, cosine_sim, haversine
from .neuralreg import FusedModel, MlpSpec, TrainedMlp, nregs1_predict, train_mlp, train_s2

__version__ = "0.1.0"
