"""Still-image recognition of pairwise cattle interactions.

A triple-stream network scores each gated pair of detected animals from three
views: visual features of both animals and their overlap, a two-channel
geometric map, and a semantic prior over the pair's predicted actions.
"""

from .geometry import BoundingBox, iou, passes_interaction_threshold, rasterize_pair_map
from .losses import individual_loss, interaction_loss, nt_xent_batch, total_loss
from .network import EncoderConfig, NetworkConfig, TripleStreamNet, fuse_scores
from .pipeline import evaluate_frames, infer_frame, run_inference
from .pretrain import PretrainConfig, run_pretraining
from .proposal import Detection, InteractionProposal, extract_slices, generate_proposals
from .semantic_prior import ClassCatalog, SemanticPriorTable, fit_prior
from .synth_data import SceneConfig, generate_frames
from .train_eval import TrainConfig, evaluate_map, train_individual_actions, train_supervised

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "iou", "passes_interaction_threshold", "rasterize_pair_map",
    "individual_loss", "interaction_loss", "nt_xent_batch", "total_loss",
    "EncoderConfig", "NetworkConfig", "TripleStreamNet", "fuse_scores",
    "evaluate_frames", "infer_frame", "run_inference",
    "PretrainConfig", "run_pretraining",
    "Detection", "InteractionProposal", "extract_slices", "generate_proposals",
    "ClassCatalog", "SemanticPriorTable", "fit_prior",
    "SceneConfig", "generate_frames",
    "TrainConfig", "evaluate_map", "train_individual_actions", "train_supervised",
]
