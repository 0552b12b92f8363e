"""Learning to rank image distortion level with a Siamese patch scorer."""
from .dataset import CorpusManifest, OrderedPair, Source, build_corpus, extract_rois, make_ordered_images
from .distortion import DistortionSpec, PatternSpec, generate_pattern, simulate_lca, simulate_moire
from .imaging import Patch, average_ranks, crop, error_map, load_image, save_image, spearman
from .model import (
    ScorerModel,
    TrainConfig,
    backward,
    batch_loss,
    forward,
    init_model,
    load_checkpoint,
    pair_loss,
    save_checkpoint,
    train,
)
from .ranking import (
    PairVerdict,
    ScoreMatrix,
    monte_carlo_pairs,
    monte_carlo_sets,
    order_image_pair,
    order_patch_pair,
    rank_image_set,
    set_rank_accuracy,
    tp_rate,
)

__version__ = "0.1.0"
