"""Dense volumetric segmentation of microscopy volumes, with cell detection and vessel tracing.

The pieces, bottom up:

* :mod:`dvnet.tensor` reverse-mode autodiff over n-D convolutions
* :mod:`dvnet.arch` the DVNet encoder/decoder
* :mod:`dvnet.training` losses, metrics, Adam and the training loop
* :mod:`dvnet.ivote` cell centres by iterative radial voting
* :mod:`dvnet.tracer` vessel centrelines and graphs by template tracing
* :mod:`dvnet.tiling`, :mod:`dvnet.pipeline`, :mod:`dvnet.volume_io` large-volume processing
* :mod:`dvnet.phantom`, :mod:`dvnet.evaluation` synthetic ground truth and scoring
"""

from .arch import LayerPlan, Network, NetworkConfig, build_network, count_parameters, plan_architecture, preset
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import MatchResult, eval_cells, eval_vessels
from .ivote import IVoteParams, VoteField, compute_gradient, detect_cells, refine, vote_pass
from .phantom import CELL, TISSUE, VESSEL, Phantom, PhantomParams, gen_phantom
from .pipeline import PipelineError, PipelineParams, PipelineResult, run_pipeline
from .structures import CellList, Edge, VesselGraph
from .tensor import Tensor
from .tiling import TileLayout, split_tiles, stitch
from .tracer import Trace, TracerParams, VisitMap, build_graph, generate_seeds, template_response, trace_fiber
from .training import Sample, dice_loss, cross_entropy_loss, evaluate, iou_per_class, train
from .volume_io import Volume, load_volume, save_volume

__all__ = [
    "CELL",
    "TISSUE",
    "VESSEL",
    "CellList",
    "Edge",
    "IVoteParams",
    "LayerPlan",
    "MatchResult",
    "Network",
    "NetworkConfig",
    "Phantom",
    "PhantomParams",
    "PipelineError",
    "PipelineParams",
    "PipelineResult",
    "Sample",
    "Tensor",
    "TileLayout",
    "Trace",
    "TracerParams",
    "VesselGraph",
    "VisitMap",
    "Volume",
    "VoteField",
    "build_graph",
    "build_network",
    "compute_gradient",
    "count_parameters",
    "cross_entropy_loss",
    "detect_cells",
    "dice_loss",
    "eval_cells",
    "eval_vessels",
    "evaluate",
    "gen_phantom",
    "generate_seeds",
    "iou_per_class",
    "load_checkpoint",
    "load_volume",
    "plan_architecture",
    "preset",
    "refine",
    "run_pipeline",
    "save_checkpoint",
    "save_volume",
    "split_tiles",
    "stitch",
    "template_response",
    "trace_fiber",
    "train",
    "vote_pass",
]
