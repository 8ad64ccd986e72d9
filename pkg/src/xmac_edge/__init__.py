"""Dual-branch (RGB + vegetation index) leaf-disease classifier runtime on numpy."""

from .autodiff import Rng, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, LabeledSample, SynthConfig, load_dataset, make_synthetic_dataset
from .explain import FeatureSpec, exact_shapley, gradcam_pp, kernel_shap
from .metrics import classification_report, confusion_matrix, paired_t_test, roc_curve
from .model import ModelConfig, build_model, forward, parameter_count
from .training import TrainConfig, evaluate, run_kfold, train
from .vegindex import MultibandImage, build_index_stack

__version__ = "0.1.0"
