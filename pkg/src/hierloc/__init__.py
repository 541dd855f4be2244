"""Hierarchical visual localization.

Global retrieval of prior keyframes, covisibility clustering into places,
per-place 2D-3D matching and P3P-RANSAC pose estimation, plus a direct
whole-map matching baseline, a synthetic world generator and evaluation.
"""
from .covisibility import Place, cluster_priors
from .errors import ValidationError
from .evaluation import EvalParams, EvalReport, localization_metrics, retrieval_recall
from .geometry import PinholeCamera, Pose, pose_error, project
from .global_index import GlobalIndex, build_global_index, load_index, retrieve_priors, save_index
from .map_model import Keyframe, Landmark, VisualMap, load_map, save_map
from .matching import MatchParams, QueryFrame
from .pipeline import LocalizationResult, Mode, PipelineParams, localize, localize_batch
from .pnp import RansacParams, ransac_pnp, solve_p3p
from .queries import load_queries, save_queries
from .synth import SynthConfig, generate_world

__version__ = "0.1.0"

__all__ = [
    "EvalParams", "EvalReport", "GlobalIndex", "Keyframe", "Landmark", "LocalizationResult", "MatchParams",
    "Mode", "PinholeCamera", "PipelineParams", "Place", "Pose", "QueryFrame", "RansacParams", "SynthConfig",
    "ValidationError", "VisualMap", "build_global_index", "cluster_priors", "generate_world", "load_index",
    "load_map", "load_queries", "localization_metrics", "localize", "localize_batch", "pose_error", "project",
    "ransac_pnp", "retrieval_recall", "retrieve_priors", "save_index", "save_map", "save_queries", "solve_p3p",
]
