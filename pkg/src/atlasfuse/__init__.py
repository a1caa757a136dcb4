"""Multi-atlas segmentation: random-forest label fusion refined by label propagation."""
from .features import FeatureMode, PatchConfig
from .forest import ForestConfig, ForestModel, predict, train_forest, train_tree
from .fusion import FusionConfig, ProbMap, binarize, candidate_voxels, fuse_rf, majority_vote
from .metrics import EvalReport, dice, evaluate, mean_distance, nmi, rank_atlases
from .phantom import PhantomSpec, generate_phantom, write_phantom
from .pipeline import Mode, RunConfig, load_config, segment, segment_modes
from .propagation import PropagationConfig, balance_weights, build_graph, propagate, refine, solve_direct
from .volume import Atlas, BoundingBox, Kind, Volume, bounding_box_from_labels, crop, read_volume, write_volume

__version__ = "0.1.0"
