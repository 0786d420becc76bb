"""Dynamic sparse training engine for recurrent language models.

Train LSTM language models that are sparse from initialization and keep a
fixed parameter count while their connectivity evolves (magnitude removal,
random or gradient regrowth, cell-gate redistribution), optimized with a
growth-aware averaged SGD variant. Includes analysis tooling for sparse
topology distance, per-gate sparsity, and training-FLOPs accounting.
"""

from .sparse_tensor import (
    Coordinate,
    SparseTensor,
    grow_gradient,
    grow_random,
    init_uniform,
    remove_smallest,
)
from .rnn_model import (
    BpttBatch,
    GatePartition,
    LanguageModel,
    LstmLayer,
    backward,
    clip_gradients,
    forward,
    loss_and_perplexity,
)
from .dst_controller import (
    ConnectivityUpdateReport,
    DstConfig,
    cosine_prune_rate,
    epoch_update,
    init_model_sparsity,
    set_style_removal,
    update_non_rnn_layer,
    update_rnn_layer,
)
from .optimizers import OptimizerConfig, make_optimizer
from .analysis import (
    TopologySnapshot,
    flops_per_step,
    gate_sparsity_breakdown,
    semi_match,
    topology_distance,
)
from .corpus import Corpus, batchify, load_corpus
from .training import TrainingConfig, evaluate, load_checkpoint, train
from .experiments import run_experiment

__version__ = "0.1.0"
