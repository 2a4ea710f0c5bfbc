"""Stock experiment wiring: pretrained initializations and default budgets.

The experiment pipeline mirrors the reference methodology: a trunk is first
pre-trained on the self-supervised corpus (that store is theta_0), then
every ticket is found and re-trained starting from theta_0.  The text-only
variant (MLM term alone, image features zeroed) stands in for a
language-only initialization; the shuffled variant destroys the learned
per-matrix structure while keeping the value distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import (DEFAULT_DATA_SEED, DEFAULT_DEV_SIZE, DEFAULT_PRETRAIN_SIZE,
                   DEFAULT_TRAIN_SIZE, TaskSpec, default_suite,
                   gen_pretrain_corpus, gen_task)
from .models import PRETRAIN, ArchSpec, build_model, pretrain_objectives
from .params import ParamStore
from .pruning import PruneConfig, imp, shuffle_weights_within_layer
from .rng import derive_seed
from .training import TrainBudget, train_model

DEFAULT_PRETRAIN_BUDGET = TrainBudget(steps=1500, batch_size=64, lr=0.5)
DEFAULT_TASK_BUDGET = TrainBudget(steps=600, batch_size=64, lr=0.4)
DEFAULT_IMP_STEPS = 600
DEFAULT_PRETEXT_IMP_STEPS = 150  # 10% of the dense pretext budget


def pretrain_trunk(arch: ArchSpec, seed: int,
                   budget: TrainBudget = DEFAULT_PRETRAIN_BUDGET,
                   corpus_size: int = DEFAULT_PRETRAIN_SIZE,
                   text_only: bool = False) -> ParamStore:
    """Train a fresh trunk on the pretext corpus; returns theta_0.

    ``text_only`` trains with the MLM term alone on batches whose image
    features are zeroed, approximating a language-only initialization.
    """
    corpus = gen_pretrain_corpus(DEFAULT_DATA_SEED, corpus_size,
                                 feature_mode=arch.feature_mode)
    params = build_model(arch, PRETRAIN, derive_seed(seed, "pretrain-init"))
    if text_only:
        def loss_fn(p, m, batch, tape):
            batch.img_feats[:] = 0.0
            return pretrain_objectives(p, m, batch, tape, terms=("mlm",))
        train_model(params, corpus, budget, derive_seed(seed, "pretrain-text"),
                    loss_fn=loss_fn, context="pretrain text-only")
    else:
        train_model(params, corpus, budget, derive_seed(seed, "pretrain"),
                    context="pretrain")
    return params


@dataclass
class Workbench:
    """Caches the expensive shared pieces of one experiment configuration."""
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    task_budget: TrainBudget = DEFAULT_TASK_BUDGET
    pretrain_budget: TrainBudget = DEFAULT_PRETRAIN_BUDGET
    train_size: int = DEFAULT_TRAIN_SIZE
    dev_size: int = DEFAULT_DEV_SIZE
    imp_config: PruneConfig = field(default_factory=lambda: PruneConfig(
        rounds=12, steps_per_round=DEFAULT_IMP_STEPS))
    _cache: dict = field(default_factory=dict, repr=False)

    def _imp_config_for(self, task) -> PruneConfig:
        if task == PRETRAIN and self.imp_config.steps_per_round == DEFAULT_IMP_STEPS:
            return PruneConfig(
                rate_per_round=self.imp_config.rate_per_round,
                rounds=self.imp_config.rounds,
                rewind_step=self.imp_config.rewind_step,
                steps_per_round=DEFAULT_PRETEXT_IMP_STEPS)
        return self.imp_config

    def suite(self) -> list[TaskSpec]:
        return default_suite()

    def theta0(self) -> ParamStore:
        if "theta0" not in self._cache:
            self._cache["theta0"] = pretrain_trunk(
                self.arch, self.seed, self.pretrain_budget)
        return self._cache["theta0"]

    def theta0_textonly(self) -> ParamStore:
        if "theta0_text" not in self._cache:
            self._cache["theta0_text"] = pretrain_trunk(
                self.arch, self.seed, self.pretrain_budget, text_only=True)
        return self._cache["theta0_text"]

    def theta0_shuffled(self) -> ParamStore:
        if "theta0_shuf" not in self._cache:
            self._cache["theta0_shuf"] = shuffle_weights_within_layer(
                self.theta0(), derive_seed(self.seed, "shuffle-init"))
        return self._cache["theta0_shuf"]

    def train_data(self, task: Union[TaskSpec, str]):
        key = ("train", task if isinstance(task, str) else task.task_id)
        if key not in self._cache:
            if task == PRETRAIN:
                self._cache[key] = gen_pretrain_corpus(
                    DEFAULT_DATA_SEED, DEFAULT_PRETRAIN_SIZE,
                    feature_mode=self.arch.feature_mode)
            else:
                self._cache[key] = gen_task(task, DEFAULT_DATA_SEED,
                                            self.train_size, "train",
                                            feature_mode=self.arch.feature_mode)
        return self._cache[key]

    def dev_data(self, task: TaskSpec):
        key = ("dev", task.task_id)
        if key not in self._cache:
            self._cache[key] = gen_task(task, DEFAULT_DATA_SEED, self.dev_size,
                                        "dev", feature_mode=self.arch.feature_mode)
        return self._cache[key]

    def imp_result(self, task: Union[TaskSpec, str],
                   config: Optional[PruneConfig] = None):
        task_id = task if isinstance(task, str) else task.task_id
        config = config or self._imp_config_for(task)
        key = ("imp", task_id, config)
        if key not in self._cache:
            init = self.theta0()
            if task != PRETRAIN:
                from .models import build_task_head
                init = init.with_head(build_task_head(
                    self.arch, task, derive_seed(self.seed, "imp-head", task_id)))
            self._cache[key] = imp(self.arch, task, config,
                                   derive_seed(self.seed, "imp", task_id),
                                   budget=self.task_budget, init=init,
                                   train_data=self.train_data(task))
        return self._cache[key]
