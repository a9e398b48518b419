"""Occlusion-robust facial landmark alignment with an ensemble of constrained
local models.

Modules:
    shape_model: similarity transforms, subset Procrustes, point distribution
        models, dense contour models, exemplars.
    appearance: census descriptors, boosted detectors, response maps and
        quadratic candidate extraction.
    fitter: hypothesize-and-test fitting, occlusion labels, hallucination,
        mode selection and refinement.
    pipeline_io: model container, annotations, face boxes, result records.
    eval_harness: metrics, planted synthetic instances, ablation, CLI support.
"""

from .ensemble import Mode, ModelEnsemble
from .errors import (AlignmentFailure, ChecksumError, ContainerError, DimensionError,
                     InsufficientDataError, ParseError, SingularConfigurationError,
                     TruncatedContainerError, UnalignableError, VersionError)
from .fitter import AlignConfig, AlignmentResult, FitConfig, ModeFitResult, align_face, fit_mode
from .pipeline_io import ResultRecord, load_model, load_model_file, save_model, save_model_file
from .shape_model import PointDistributionModel, SimilarityTransform, train_pdm
from .training import TrainConfig, TrainingSample, train_ensemble

__version__ = "0.1.0"
