"""Dermatoscopic skin-lesion pipeline: hair removal, Chan-Vese segmentation,
ROI extraction and from-scratch CNN classification with a k-fold harness."""
from .architectures import ArchitectureId, build_model, trace_shapes
from .dataset import Dataset, SkinClass, load_ham10000, roi_cache, stratified_kfold
from .evalharness import TrainConfig, accuracy, confusion_matrix, cross_validate, evaluate, train
from .segmentation import PipelineConfig, segment_pipeline

__version__ = "0.1.0"
