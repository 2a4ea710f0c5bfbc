"""The shared SGD training loop and dev-set evaluation.

One loop serves dense baselines, IMP rounds, ticket re-training and
adversarial training; they differ only in the loss builder they hand in.
All shuffling flows from the run seed through named substreams, so a run
is bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Batch, batch_iter
from .errors import TrainingError
from .masks import Mask
from .models import loss_std, forward, pretrain_objectives
from .params import ParamStore, SGD, optimizer_step
from .rng import derive_seed

LossFn = Callable[[ParamStore, Optional[Mask], Batch, Tape], ad.Tensor]


@dataclass(frozen=True)
class TrainBudget:
    steps: int = 300
    batch_size: int = 32
    lr: float = 0.25
    eval_batch_size: int = 256


@dataclass
class TrainMetrics:
    losses: list = field(default_factory=list)
    step_hashes: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def default_loss_fn(dataset) -> LossFn:
    if getattr(dataset, "mlm_targets", None) is not None:
        return pretrain_objectives
    return loss_std


def grads_by_name(tape: Tape, grads, params: ParamStore) -> dict[str, np.ndarray]:
    """Re-key backward()'s tensor-keyed gradients to parameter names."""
    out = {}
    for name, leaf in tape.named_leaves.items():
        if name in params.entries:
            out[name] = grads[leaf]
    return out


def train_model(params: ParamStore, dataset, budget: TrainBudget, seed: int,
                mask: Optional[Mask] = None, loss_fn: Optional[LossFn] = None,
                optimizer=None, snapshot_steps=(), checkpoints=None,
                context: str = "train", trace: bool = False) -> TrainMetrics:
    """Run SGD for ``budget.steps`` steps, mutating ``params`` in place.

    With a mask, masked weights start and stay at exactly 0.0.  Snapshots
    are written into ``checkpoints`` after the listed step counts.
    """
    if mask is not None:
        mask.apply_to(params)
    if loss_fn is None:
        loss_fn = default_loss_fn(dataset)
    if optimizer is None:
        optimizer = SGD(budget.lr)
    snapshot_steps = set(snapshot_steps)
    metrics = TrainMetrics()

    step = 0
    epoch = 0
    while step < budget.steps:
        epoch_seed = derive_seed(seed, "order", epoch)
        for batch in batch_iter(dataset, budget.batch_size, epoch_seed):
            if step >= budget.steps:
                break
            tape = Tape()
            loss = loss_fn(params, mask, batch, tape)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"{context}: non-finite loss at step {step}")
            grads = ad.backward(tape, loss)
            optimizer.step(params, grads_by_name(tape, grads, params), mask)
            step += 1
            metrics.losses.append(value)
            if trace:
                metrics.step_hashes.append(params.content_hash())
            if step in snapshot_steps and checkpoints is not None:
                checkpoints.put(step, params)
        epoch += 1
    return metrics


def evaluate_accuracy(params: ParamStore, mask: Optional[Mask], dataset,
                      batch_size: int = 256) -> float:
    """Percent accuracy over a dataset, visited in storage order."""
    n = dataset.size
    correct = 0
    for lo in range(0, n, batch_size):
        batch = dataset.take(np.arange(lo, min(lo + batch_size, n)))
        out = forward(params, mask, batch)
        pred = np.argmax(out.logits.data, axis=1)
        correct += int((pred == batch.labels).sum())
    return 100.0 * correct / n
