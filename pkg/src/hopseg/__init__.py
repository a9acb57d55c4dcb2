"""Feed-forward 3D MRI segmentation without back-propagation.

Unsupervised multi-scale feature learning (cascaded channel-wise Saab
transforms with pooling) feeds a coarse-to-fine voxel classifier built
from gradient-boosted trees with local soft-decision refinement.
"""

from . import errors
from .boost import BoostParams, TreeEnsemble, ensemble_fit, predict_proba
from .config import PipelineConfig, PreprocessConfig
from .decoder import (DecoderConfig, DecoderModel, aggregate_features,
                      decoder_fit, decoder_predict, downsample_labels, one_hot,
                      position_encoding, sls_refine)
from .encoder import EncoderConfig, EncoderModel, encoder_apply, encoder_fit
from .io import Case, ingest, load_case, write_raw
from .metrics import dsc, dsc_per_class
from .model_io import load_model, save_model
from .phantom import make_phantoms
from .pipeline import (EvalReport, PredictionResult, SegmentationModel,
                       evaluate, predict, preprocess, train)
from .saab import (EnergyNode, SaabUnit, VoxelHopModel, cw_saab_apply,
                   cw_saab_fit, saab_apply, saab_fit)
from .volume import (NeighborhoodSpec, Volume4D, clahe, gather_neighborhoods,
                     max_pool, median_filter_2d, resample_lanczos,
                     resize_trilinear)

__version__ = "0.1.0"

__all__ = [
    "BoostParams", "Case", "DecoderConfig", "DecoderModel", "EncoderConfig",
    "EncoderModel", "EnergyNode", "EvalReport", "NeighborhoodSpec",
    "PipelineConfig", "PredictionResult", "PreprocessConfig", "SaabUnit",
    "SegmentationModel", "TreeEnsemble", "Volume4D", "VoxelHopModel",
    "aggregate_features", "clahe", "cw_saab_apply", "cw_saab_fit",
    "decoder_fit", "decoder_predict", "downsample_labels", "dsc",
    "dsc_per_class", "encoder_apply", "encoder_fit", "ensemble_fit", "errors",
    "evaluate", "gather_neighborhoods", "ingest", "load_case", "load_model",
    "make_phantoms", "max_pool", "median_filter_2d", "one_hot",
    "position_encoding", "predict", "predict_proba", "preprocess",
    "resample_lanczos", "resize_trilinear", "saab_apply", "saab_fit",
    "save_model", "sls_refine", "train", "write_raw",
]
