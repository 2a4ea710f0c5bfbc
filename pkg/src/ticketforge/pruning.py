"""Global magnitude pruning, the IMP driver, rewinding and baselines.

The prune criterion is global: candidate weights from every prunable
matrix are pooled into one list and the smallest magnitudes go, wherever
they live.  Ties are broken by (name, flat index) ascending so identical
inputs always produce identical masks.  Positions once masked are never
unmasked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import (DEFAULT_DATA_SEED, DEFAULT_DEV_SIZE, DEFAULT_TRAIN_SIZE,
                   TaskSpec, gen_pretrain_corpus, gen_task)
from .errors import CheckpointLookupError, ConfigError, TrainingError
from .masks import Mask
from .models import PRETRAIN, ArchSpec, arch_of, build_model, build_task_head
from .params import ParamStore
from .rng import derive_seed, substream
from .training import TrainBudget, evaluate_accuracy, train_model


def rounds_for_target(rate: float, target_sparsity: float) -> int:
    """Smallest k with 1 - (1-rate)^k >= target_sparsity."""
    k = 1
    while 1.0 - (1.0 - rate) ** k < target_sparsity:
        k += 1
    return k


@dataclass(frozen=True)
class PruneConfig:
    rate_per_round: float = 0.10
    rounds: int = 9
    rewind_step: int = 0
    steps_per_round: int = 200
    target_sparsity: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.rate_per_round < 1.0):
            raise ConfigError("rate_per_round must lie in (0, 1)")
        if self.rewind_step < 0:
            raise ConfigError("rewind_step must be non-negative")
        if self.steps_per_round < 1:
            raise ConfigError("steps_per_round must be positive")
        if self.target_sparsity is not None:
            if not (0.0 < self.target_sparsity < 1.0):
                raise ConfigError("target_sparsity must lie in (0, 1)")
            object.__setattr__(
                self, "rounds",
                rounds_for_target(self.rate_per_round, self.target_sparsity))
        if self.rounds < 1:
            raise ConfigError("rounds must be positive")


class CheckpointStore:
    """Immutable snapshots of a ParamStore keyed by training step.

    Step 0 (the initialization) is recorded at construction; later steps
    must be inserted in strictly increasing order and are never replaced.
    """

    def __init__(self, initial: ParamStore):
        self._blobs: dict[int, bytes] = {}
        self._template = initial
        self._blobs[0] = initial.to_bytes()

    def put(self, step: int, params: ParamStore) -> None:
        if step in self._blobs:
            raise ValueError(f"snapshot for step {step} already written")
        if step < max(self._blobs):
            raise ValueError("snapshot steps must be strictly increasing")
        self._blobs[step] = params.to_bytes()

    def get(self, step: int) -> ParamStore:
        blob = self._blobs.get(step)
        if blob is None:
            raise CheckpointLookupError(f"no snapshot at step {step}")
        return self._template.restored_from(blob)

    def blob(self, step: int) -> bytes:
        blob = self._blobs.get(step)
        if blob is None:
            raise CheckpointLookupError(f"no snapshot at step {step}")
        return blob

    def steps(self) -> list[int]:
        return sorted(self._blobs)


def rewind(ckpts: CheckpointStore, step: int) -> ParamStore:
    """Bitwise restoration of the snapshot taken after ``step`` steps."""
    return ckpts.get(step)


# ---------------------------------------------------------------------------
# pruning criteria
# ---------------------------------------------------------------------------

def global_magnitude_prune(params: ParamStore, mask: Mask, rate: float) -> Mask:
    """Mask the floor(rate * live) smallest-magnitude live weights globally.

    Candidates are the currently unmasked positions across every prunable
    matrix; the selection key is (|value|, name order, flat index).
    """
    if not (0.0 < rate < 1.0):
        raise ConfigError(f"prune rate must lie in (0, 1), got {rate}")
    mask.check_layout(params)
    names = list(params.prunable_names)
    mags, name_ids, flat_ids = [], [], []
    for i, name in enumerate(names):
        values = params.entries[name].reshape(-1)
        alive = mask.arrays[name].reshape(-1) == 1
        idx = np.nonzero(alive)[0]
        mags.append(np.abs(values[idx]))
        name_ids.append(np.full(idx.size, i))
        flat_ids.append(idx)
    mags = np.concatenate(mags)
    name_ids = np.concatenate(name_ids)
    flat_ids = np.concatenate(flat_ids)
    k = int(math.floor(rate * mags.size))
    order = np.lexsort((flat_ids, name_ids, mags))
    chosen = order[:k]
    new_mask = mask.copy()
    for i, name in enumerate(names):
        hits = chosen[name_ids[chosen] == i]
        if hits.size:
            flat = new_mask.arrays[name].reshape(-1)
            flat[flat_ids[hits]] = 0.0
    return new_mask


def random_prune(layout: Union[ParamStore, Mask], sparsity: float,
                 seed: int) -> Mask:
    """Exactly floor(s * total) positions masked uniformly at random."""
    if not (0.0 <= sparsity < 1.0):
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    if isinstance(layout, Mask):
        shapes = {n: a.shape for n, a in layout.arrays.items()}
    else:
        shapes = {n: layout.entries[n].shape for n in layout.prunable_names}
    names = sorted(shapes)
    sizes = [int(np.prod(shapes[n])) for n in names]
    total = sum(sizes)
    k = int(math.floor(sparsity * total))
    chosen = substream(seed, "random-prune").permutation(total)[:k]
    flags = np.ones(total)
    flags[chosen] = 0.0
    arrays = {}
    offset = 0
    for name, size in zip(names, sizes):
        arrays[name] = flags[offset:offset + size].reshape(shapes[name])
        offset += size
    return Mask(arrays)


def shuffle_weights_within_layer(params: ParamStore, seed: int) -> ParamStore:
    """Permute each prunable matrix's entries in place within that matrix.

    The per-matrix value multiset is preserved; heads, biases and norms are
    untouched.  This is the degraded initialization baseline.
    """
    out = params.copy()
    for name in out.prunable_names:
        flat = out.entries[name].reshape(-1)
        perm = substream(seed, "shuffle", name).permutation(flat.size)
        out.entries[name] = flat[perm].reshape(out.entries[name].shape)
    return out


# ---------------------------------------------------------------------------
# IMP
# ---------------------------------------------------------------------------

@dataclass
class ImpResult:
    final_mask: Mask
    checkpoints: CheckpointStore
    round_masks: list = field(default_factory=list)
    round_losses: list = field(default_factory=list)

    def mask_at_sparsity(self, sparsity: float) -> Mask:
        """The first round mask whose sparsity reaches ``sparsity``."""
        for m in self.round_masks:
            if m.sparsity >= sparsity - 1e-12:
                return m
        raise ConfigError(
            f"run never reached sparsity {sparsity}; deepest round has "
            f"{self.round_masks[-1].sparsity if self.round_masks else 0.0}")


def imp(arch: ArchSpec, task: Union[TaskSpec, str], config: PruneConfig,
        seed: int, budget: Optional[TrainBudget] = None,
        init: Optional[ParamStore] = None, train_data=None,
        loss_fn=None) -> ImpResult:
    """Iterative magnitude pruning: train, prune, reset, repeat.

    Each round trains a fresh copy of the rewind snapshot under the current
    mask for ``config.steps_per_round`` steps, then prunes
    ``config.rate_per_round`` of the surviving weights by global magnitude.
    The returned checkpoints hold the initialization and, if requested, the
    rewind point.
    """
    budget = budget or TrainBudget()
    if init is None:
        params = build_model(arch, task, derive_seed(seed, "model-init"))
    else:
        params = init.copy()
    if train_data is None:
        train_data = _default_train_data(arch, task)

    ckpts = CheckpointStore(params)
    mask = Mask.ones_like(params)
    round_budget = TrainBudget(steps=config.steps_per_round,
                               batch_size=budget.batch_size, lr=budget.lr,
                               eval_batch_size=budget.eval_batch_size)

    if config.rewind_step > 0:
        warm = ckpts.get(0)
        warm_budget = TrainBudget(steps=config.rewind_step,
                                  batch_size=budget.batch_size, lr=budget.lr)
        train_model(warm, train_data, warm_budget, derive_seed(seed, "warmup"),
                    mask=mask, loss_fn=loss_fn, context="imp warmup")
        ckpts.put(config.rewind_step, warm)

    result = ImpResult(final_mask=mask, checkpoints=ckpts)
    for r in range(1, config.rounds + 1):
        work = ckpts.get(config.rewind_step)
        try:
            metrics = train_model(work, train_data, round_budget,
                                  derive_seed(seed, "round", r), mask=mask,
                                  loss_fn=loss_fn, context=f"imp round {r}")
        except TrainingError as err:
            raise TrainingError(f"imp round {r}: {err}") from err
        mask = global_magnitude_prune(work, mask, config.rate_per_round)
        result.round_masks.append(mask)
        result.round_losses.append(metrics.final_loss)
    result.final_mask = mask
    return result


def _default_train_data(arch: ArchSpec, task: Union[TaskSpec, str]):
    if task == PRETRAIN:
        return gen_pretrain_corpus(DEFAULT_DATA_SEED, DEFAULT_TRAIN_SIZE,
                                   feature_mode=arch.feature_mode)
    return gen_task(task, DEFAULT_DATA_SEED, DEFAULT_TRAIN_SIZE, "train",
                    feature_mode=arch.feature_mode)


# ---------------------------------------------------------------------------
# ticket evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    params: ParamStore


def evaluate_ticket(mask: Mask, init: ParamStore, task: TaskSpec,
                    budget: TrainBudget, seed: int, train_data=None,
                    dev_data=None, loss_fn=None) -> EvalResult:
    """Re-train m * theta from ``init`` with a fresh head; report dev accuracy.

    The dense reference is this same function with an all-ones mask: the
    computation is identical, so equal seeds give equal numbers.
    """
    arch = arch_of(init)
    if train_data is None:
        train_data = gen_task(task, DEFAULT_DATA_SEED, DEFAULT_TRAIN_SIZE,
                              "train", feature_mode=arch.feature_mode)
    if dev_data is None:
        dev_data = gen_task(task, DEFAULT_DATA_SEED, DEFAULT_DEV_SIZE, "dev",
                            feature_mode=arch.feature_mode)
    head = build_task_head(arch, task, derive_seed(seed, "head", task.task_id))
    params = init.with_head(head)
    mask.check_layout(params)
    train_model(params, train_data, budget, seed, mask=mask, loss_fn=loss_fn,
                context=f"evaluate {task.task_id}")
    accuracy = evaluate_accuracy(params, mask, dev_data, budget.eval_batch_size)
    return EvalResult(accuracy=accuracy, params=params)
