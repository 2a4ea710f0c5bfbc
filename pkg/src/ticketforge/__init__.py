"""Desk-scale lottery-ticket experiments on miniature multimodal transformers."""
import os

# Pin BLAS to one thread before numpy loads anywhere downstream: reductions
# must use a fixed summation order for runs to be bit-reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .autodiff import (Tape, Tensor, backward, matmul, softmax_cross_entropy,
                       symmetric_kl)
from .data import (Batch, TaskSpec, batch_iter, default_suite,
                   gen_pretrain_corpus, gen_task)
from .masks import Mask
from .models import ArchSpec, ModelOutput, build_model, forward, loss_std, \
    pretrain_objectives
from .params import ParamStore, SGD, optimizer_step
from .pruning import (CheckpointStore, EvalResult, ImpResult, PruneConfig,
                      evaluate_ticket, global_magnitude_prune, imp,
                      random_prune, rewind, shuffle_weights_within_layer)
from .training import TrainBudget, evaluate_accuracy, train_model

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Batch", "CheckpointStore", "EvalResult", "ImpResult",
    "Mask", "ModelOutput", "ParamStore", "PruneConfig", "SGD", "Tape",
    "TaskSpec", "Tensor", "TrainBudget", "backward", "batch_iter",
    "build_model", "default_suite", "evaluate_accuracy", "evaluate_ticket",
    "forward", "gen_pretrain_corpus", "gen_task", "global_magnitude_prune",
    "imp", "loss_std", "matmul", "optimizer_step", "pretrain_objectives",
    "random_prune", "rewind", "shuffle_weights_within_layer",
    "softmax_cross_entropy", "symmetric_kl", "train_model",
]
