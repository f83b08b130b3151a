"""Automatic sleep staging from EEG.

Scattering-transform spectral features, diffusion-map embeddings (single
channel or fused across two channels), and a one-versus-all RBF kernel SVM
evaluated by leave-one-subject-out cross-validation.
"""

from .config import PipelineConfig, load_config
from .diffusion import affinity_matrix, concat_embeddings, diffusion_map, multiview_dm
from .edf import parse_edf, read_edf, write_edf
from .evaluation import class_balanced_sample, losocv
from .metrics import confusion_matrix, overall_metrics, per_class_metrics
from .pipeline import Pipeline, run_stage
from .scattering import ScatteringExtractor, build_filter_bank, scatter
from .stages import SleepStage
from .stats import bonferroni, f_test_variance, wilcoxon_signed_rank
from .svm import predict, train_binary, train_ova

__version__ = "0.1.0"
