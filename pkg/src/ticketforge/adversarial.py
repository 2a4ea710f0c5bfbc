"""PGD adversarial training for finding and finetuning tickets.

The inner maximization perturbs the feature space (image region features
and word embeddings) inside a per-example, per-modality Frobenius-norm
ball of radius epsilon.  The outer minimization adds the clean loss, the
adversarial loss and a symmetric-KL consistency term, all solved by the
same SGD loop as standard training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Batch
from .errors import AdversarialError, ConfigError, DataError
from .masks import Mask
from .models import arch_of, forward
from .params import ParamStore
from .training import TrainBudget, TrainMetrics, train_model

PERTURB_TARGETS = ("image_features", "text_embeddings")


@dataclass(frozen=True)
class AdvConfig:
    epsilon: float = 0.5
    step_size: float = 0.25        # PGD step, distinct from the KL weight
    pgd_steps: int = 3
    kl_weight: float = 1.0
    perturb_targets: tuple = PERTURB_TARGETS
    simultaneous: bool = True      # False alternates modalities per PGD step
    full_kl_gradient: bool = False  # also backprop the clean branch of the KL

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be positive")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")
        targets = tuple(self.perturb_targets)
        if not targets or any(t not in PERTURB_TARGETS for t in targets):
            raise ConfigError(
                f"perturb_targets must be a non-empty subset of {PERTURB_TARGETS}")
        object.__setattr__(self, "perturb_targets", targets)
        # step_size <= 2*epsilon is the useful regime (larger steps are
        # clipped by the projection) but stays advisory: the projection
        # keeps any step size sound.


@dataclass
class Perturbation:
    """Per-modality delta arrays for one batch."""
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def norms(self, target: str) -> np.ndarray:
        d = self.blocks[target]
        return np.sqrt((d * d).sum(axis=(1, 2)))


def _block_shape(params: ParamStore, batch: Batch, target: str) -> tuple:
    spec = arch_of(params)
    b = batch.size
    if target == "image_features":
        return (b, spec.img_seq_len, spec.img_feat_dim)
    return (b, spec.txt_seq_len, spec.hidden)


def _project(delta: np.ndarray, epsilon: float) -> None:
    """Hard clamp of each example block onto the epsilon ball, in place."""
    norms = np.sqrt((delta * delta).sum(axis=(1, 2)))
    over = norms > epsilon
    if np.any(over):
        factor = np.ones_like(norms)
        factor[over] = epsilon / norms[over]
        delta *= factor[:, None, None]


def pgd_perturb(params: ParamStore, mask: Optional[Mask], batch: Batch,
                cfg: AdvConfig) -> Perturbation:
    """Projected gradient ascent on the cross-entropy, from delta = 0.

    Each step moves along the Frobenius-normalized gradient and projects
    back onto the epsilon ball; a zero gradient leaves delta unchanged.
    """
    if batch.labels is None:
        raise DataError("adversarial perturbation needs a labelled batch")
    delta = Perturbation({t: np.zeros(_block_shape(params, batch, t))
                          for t in cfg.perturb_targets})
    for it in range(cfg.pgd_steps):
        if cfg.simultaneous:
            active = cfg.perturb_targets
        else:
            active = (cfg.perturb_targets[it % len(cfg.perturb_targets)],)
        tape = Tape()
        leaves = {t: tape.leaf(delta.blocks[t], name=f"delta/{t}")
                  for t in cfg.perturb_targets}
        out = forward(params, mask, batch, tape, perturb=leaves)
        loss = ad.softmax_cross_entropy(out.logits, batch.labels)
        grads = ad.backward(tape, loss)
        for t in active:
            g = grads[leaves[t]]
            if not np.all(np.isfinite(g)):
                raise AdversarialError(
                    f"non-finite PGD gradient for {t} at iteration {it}")
            norms = np.sqrt((g * g).sum(axis=(1, 2)))
            live = norms > 0
            if np.any(live):
                step = np.zeros_like(g)
                step[live] = cfg.step_size * g[live] / norms[live, None, None]
                delta.blocks[t] = delta.blocks[t] + step
            _project(delta.blocks[t], cfg.epsilon)
    return delta


def adv_loss(params: ParamStore, mask: Optional[Mask], batch: Batch,
             delta: Perturbation, cfg: AdvConfig,
             tape: Optional[Tape] = None) -> ad.Tensor:
    """Clean CE + adversarial CE + kl_weight * symmetric KL.

    The KL's clean branch is detached unless ``full_kl_gradient`` is set,
    the standard stabilization for consistency terms.
    """
    if batch.labels is None:
        raise DataError("adversarial loss needs a labelled batch")
    tape = tape if tape is not None else Tape()
    clean_out = forward(params, mask, batch, tape)
    ce_clean = ad.softmax_cross_entropy(clean_out.logits, batch.labels)
    frozen = {t: ad.constant(d) for t, d in delta.blocks.items()}
    adv_out = forward(params, mask, batch, tape, perturb=frozen)
    ce_adv = ad.softmax_cross_entropy(adv_out.logits, batch.labels)
    ref = clean_out.logits if cfg.full_kl_gradient \
        else ad.stop_gradient(clean_out.logits)
    kl = ad.symmetric_kl(adv_out.logits, ref)
    return ad.add(ad.add(ce_clean, ce_adv), ad.scale(kl, cfg.kl_weight))


def adv_loss_fn(cfg: AdvConfig):
    """A train_model loss builder running PGD then the combined objective."""

    def loss_fn(p, m, batch, tape):
        delta = pgd_perturb(p, m, batch, cfg)
        return adv_loss(p, m, batch, delta, cfg, tape)

    return loss_fn


def adv_train(params: ParamStore, dataset, budget: TrainBudget, seed: int,
              cfg: AdvConfig, mask: Optional[Mask] = None,
              trace: bool = False) -> TrainMetrics:
    """SGD on the combined objective; PGD runs fresh for every batch."""
    return train_model(params, dataset, budget, seed, mask=mask,
                       loss_fn=adv_loss_fn(cfg), context="adv train",
                       trace=trace)
