"""Miniature multimodal transformer backbones and task heads.

Three families share one forward interface:

* ``one_stream``   - region features and token embeddings in one sequence,
                     a single transformer over the concatenation.
* ``two_stream``   - per-modality encoders followed by cross-attention
                     layers; the classifier reads the text-stream CLS slot.
* ``patch_input``  - the one-stream layout fed raw pixel patches instead of
                     detector features.

The trunk (theta) carries every shared weight; the head (phi) carries only
the task classifier (or the three pretext heads), is never masked and never
pruned.  The prunable set is exactly the 2-D trunk matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (IMG_FEAT_DIM, IMG_SEQ_LEN, TXT_SEQ_LEN, VOCAB_SIZE, Batch,
                   TaskSpec, require_pretext)
from .errors import ConfigError, DataError, DimensionError
from .masks import Mask
from .params import ParamStore
from .rng import substream

FAMILIES = ("one_stream", "two_stream", "patch_input")
PRETRAIN = "pretrain"

FF_MULT = 2


@dataclass(frozen=True)
class ArchSpec:
    family: str = "one_stream"
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    img_seq_len: int = IMG_SEQ_LEN
    txt_seq_len: int = TXT_SEQ_LEN
    vocab_size: int = VOCAB_SIZE
    img_feat_dim: int = IMG_FEAT_DIM
    # two_stream only: explicit per-modality and cross layer counts
    modality_layers: int = 1
    cross_layers: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        for name in ("layers", "hidden", "heads", "img_seq_len", "txt_seq_len",
                     "vocab_size", "img_feat_dim", "modality_layers",
                     "cross_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")

    @property
    def feature_mode(self) -> str:
        return "patches" if self.family == "patch_input" else "regions"


@dataclass
class ModelOutput:
    cls_embedding: Tensor
    logits: Tensor
    modality_states: dict[str, Tensor]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _block_names(prefix: str, hidden: int):
    """(2-D matrices, 1-D vectors) for one transformer block."""
    ff = FF_MULT * hidden
    mats = {f"{prefix}/attn/{p}/W": (hidden, hidden) for p in "qkvo"}
    mats[f"{prefix}/ffn/W1"] = (hidden, ff)
    mats[f"{prefix}/ffn/W2"] = (ff, hidden)
    vecs = {f"{prefix}/attn/{p}/b": (hidden,) for p in "qkvo"}
    vecs[f"{prefix}/ffn/b1"] = (ff,)
    vecs[f"{prefix}/ffn/b2"] = (hidden,)
    for ln in ("ln1", "ln2"):
        vecs[f"{prefix}/{ln}/g"] = (hidden,)
        vecs[f"{prefix}/{ln}/b"] = (hidden,)
    return mats, vecs


def _trunk_layout(spec: ArchSpec):
    h = spec.hidden
    mats = {"emb/img_proj/W": (spec.img_feat_dim, h),
            "emb/txt/table": (spec.vocab_size, h)}
    vecs = {"emb/img_proj/b": (h,), "emb/cls": (h,),
            "emb/ln/g": (h,), "emb/ln/b": (h,),
            "out_ln/g": (h,), "out_ln/b": (h,)}
    if spec.family in ("one_stream", "patch_input"):
        mats["emb/pos"] = (1 + spec.img_seq_len + spec.txt_seq_len, h)
        mats["emb/type"] = (2, h)
        prefixes = [f"enc/{i}" for i in range(spec.layers)]
    else:
        mats["emb/pos_img"] = (spec.img_seq_len, h)
        mats["emb/pos_txt"] = (1 + spec.txt_seq_len, h)
        vecs["emb/img_ln/g"] = (h,)
        vecs["emb/img_ln/b"] = (h,)
        prefixes = [f"img_enc/{i}" for i in range(spec.modality_layers)]
        prefixes += [f"txt_enc/{i}" for i in range(spec.modality_layers)]
        for i in range(spec.cross_layers):
            prefixes += [f"cross/{i}/img", f"cross/{i}/txt"]
    for prefix in prefixes:
        m, v = _block_names(prefix, h)
        mats.update(m)
        vecs.update(v)
    return mats, vecs


def _head_layout(spec: ArchSpec, task: Union[TaskSpec, str]):
    h = spec.hidden
    if task == PRETRAIN:
        return {"head/mlm/W": (h, spec.vocab_size),
                "head/mrm/W": (h, spec.img_feat_dim),
                "head/itm/W": (h, 2)}, \
               {"head/mlm/b": (spec.vocab_size,),
                "head/mrm/b": (spec.img_feat_dim,),
                "head/itm/b": (2,)}
    return {"head/W": (h, task.class_count)}, {"head/b": (task.class_count,)}


def _init_entry(name: str, shape: tuple, seed: int) -> np.ndarray:
    if name.endswith("/g"):          # layer-norm gain
        return np.ones(shape)
    if len(shape) == 1 and name != "emb/cls":
        return np.zeros(shape)
    rng = substream(seed, "init", name)
    if len(shape) == 1:              # the CLS vector
        limit = math.sqrt(6.0 / (1 + shape[0]))
        return rng.uniform(-limit, limit, size=shape)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    if name.startswith("head/"):
        limit *= 0.1  # near-uniform logits at init; heads warm up in training
    return rng.uniform(-limit, limit, size=shape)


def build_model(spec: ArchSpec, task: Union[TaskSpec, str],
                seed: int) -> ParamStore:
    """Deterministic scaled-uniform initialization from the seed.

    The same (spec, task, seed) triple always yields a bit-identical store:
    each matrix draws from its own named substream, so no iteration-order
    dependence can creep in.
    """
    mats, vecs = _trunk_layout(spec)
    head_mats, head_vecs = _head_layout(spec, task)
    entries = {}
    for name, shape in {**mats, **vecs, **head_mats, **head_vecs}.items():
        entries[name] = _init_entry(name, shape, seed)
    trunk = set(mats) | set(vecs)
    head = set(head_mats) | set(head_vecs)
    return ParamStore(entries, trunk, head, prunable_names=set(mats), arch=spec)


def build_task_head(spec: ArchSpec, task: Union[TaskSpec, str],
                    seed: int) -> dict[str, np.ndarray]:
    """Fresh head entries only, for re-training a ticket on a new task."""
    head_mats, head_vecs = _head_layout(spec, task)
    return {name: _init_entry(name, shape, seed)
            for name, shape in {**head_mats, **head_vecs}.items()}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _wrap_leaves(params: ParamStore, mask: Optional[Mask], tape: Tape):
    """Parameters as named tape leaves.

    A second forward on the same tape (the adversarial branch of a combined
    objective) reuses the existing leaves, so gradients from both branches
    accumulate on one set of parameters.
    """
    if mask is not None:
        mask.check_layout(params)
    existing = tape.named_leaves
    leaves = {}
    for name in params.sorted_names():
        if name in existing:
            leaves[name] = existing[name]
            continue
        arr = params.entries[name]
        if mask is not None and name in mask.arrays:
            arr = arr * mask.arrays[name]
        leaves[name] = tape.leaf(arr, name=name)
    return leaves


def _self_block(seq: Tensor, L, prefix: str, b: int, s: int, spec: ArchSpec):
    return _attn_ffn(seq, seq, L, prefix, b, s, s, spec)


def _attn_ffn(target: Tensor, source: Tensor, L, prefix: str,
              b: int, s_t: int, s_s: int, spec: ArchSpec):
    """Pre-norm block: target attends to source, then a feed-forward."""
    h, nh = spec.hidden, spec.heads
    dh = h // nh
    tn = ad.layer_norm(target, L[f"{prefix}/ln1/g"], L[f"{prefix}/ln1/b"])
    sn = tn if source is target else \
        ad.layer_norm(source, L[f"{prefix}/ln1/g"], L[f"{prefix}/ln1/b"])
    t2 = ad.reshape(tn, (b * s_t, h))
    s2 = ad.reshape(sn, (b * s_s, h))

    def proj(x2, rows, p):
        y = ad.linear(x2, L[f"{prefix}/attn/{p}/W"], L[f"{prefix}/attn/{p}/b"])
        return ad.split_heads(y, b, rows, nh, dh)

    ctx = ad.attention_core(proj(t2, s_t, "q"), proj(s2, s_s, "k"),
                            proj(s2, s_s, "v"), 1.0 / math.sqrt(dh))
    out = ad.linear(ad.merge_heads(ctx, b, s_t, nh, dh),
                    L[f"{prefix}/attn/o/W"], L[f"{prefix}/attn/o/b"])
    seq = ad.add(target, ad.reshape(out, (b, s_t, h)))
    x2 = ad.reshape(ad.layer_norm(seq, L[f"{prefix}/ln2/g"],
                                  L[f"{prefix}/ln2/b"]), (b * s_t, h))
    f = ad.silu(ad.linear(x2, L[f"{prefix}/ffn/W1"], L[f"{prefix}/ffn/b1"]))
    f = ad.linear(f, L[f"{prefix}/ffn/W2"], L[f"{prefix}/ffn/b2"])
    return ad.add(seq, ad.reshape(f, (b, s_t, h)))


def _check_batch(spec: ArchSpec, batch: Batch):
    b, si, fd = batch.img_feats.shape
    if (si, fd) != (spec.img_seq_len, spec.img_feat_dim):
        raise DimensionError(
            f"image features {batch.img_feats.shape[1:]} do not match spec "
            f"({spec.img_seq_len}, {spec.img_feat_dim})")
    if batch.txt_tokens.shape != (b, spec.txt_seq_len):
        raise DimensionError("token matrix does not match spec")


def _embed_inputs(spec, batch, L, tape, perturb):
    """Image features and word embeddings with optional perturbations added."""
    b = batch.size
    img = Tensor(batch.img_feats)
    if perturb and "image_features" in perturb:
        img = ad.add(img, perturb["image_features"])
    flat = ad.reshape(img, (b * spec.img_seq_len, spec.img_feat_dim))
    h_img = ad.linear(flat, L["emb/img_proj/W"], L["emb/img_proj/b"])
    h_img = ad.reshape(h_img, (b, spec.img_seq_len, spec.hidden))
    h_txt = ad.embedding(L["emb/txt/table"], batch.txt_tokens)
    if perturb and "text_embeddings" in perturb:
        h_txt = ad.add(h_txt, perturb["text_embeddings"])
    cls = ad.reshape(ad.tile_rows(L["emb/cls"], b), (b, 1, spec.hidden))
    return cls, h_img, h_txt


def forward(params: ParamStore, mask: Optional[Mask], batch: Batch,
            tape: Optional[Tape] = None, perturb=None) -> ModelOutput:
    """Run f(x; m * theta, phi) on a batch.

    The stored parameters are never mutated: masking multiplies into fresh
    arrays.  If no tape is supplied a throwaway one is used (evaluation).
    """
    spec = arch_of(params)
    _check_batch(spec, batch)
    tape = tape if tape is not None else Tape()
    L = _wrap_leaves(params, mask, tape)
    b = batch.size
    si, st, h = spec.img_seq_len, spec.txt_seq_len, spec.hidden

    if spec.family in ("one_stream", "patch_input"):
        cls, h_img, h_txt = _embed_inputs(spec, batch, L, tape, perturb)
        seq = ad.concat([cls, h_img, h_txt], axis=1)
        type_ids = np.array([0] + [0] * si + [1] * st)
        seq = ad.add(ad.add(seq, L["emb/pos"]),
                     ad.embedding(L["emb/type"], type_ids))
        seq = ad.layer_norm(seq, L["emb/ln/g"], L["emb/ln/b"])
        for i in range(spec.layers):
            seq = _self_block(seq, L, f"enc/{i}", b, 1 + si + st, spec)
        seq = ad.layer_norm(seq, L["out_ln/g"], L["out_ln/b"])
        cls_state = ad.reshape(ad.slice_axis(seq, 1, 0, 1), (b, h))
        img_state = ad.slice_axis(seq, 1, 1, 1 + si)
        txt_state = ad.slice_axis(seq, 1, 1 + si, 1 + si + st)
    else:
        cls, h_img, h_txt = _embed_inputs(spec, batch, L, tape, perturb)
        img = ad.layer_norm(ad.add(h_img, L["emb/pos_img"]),
                            L["emb/img_ln/g"], L["emb/img_ln/b"])
        txt = ad.concat([cls, h_txt], axis=1)
        txt = ad.layer_norm(ad.add(txt, L["emb/pos_txt"]),
                            L["emb/ln/g"], L["emb/ln/b"])
        for i in range(spec.modality_layers):
            img = _self_block(img, L, f"img_enc/{i}", b, si, spec)
            txt = _self_block(txt, L, f"txt_enc/{i}", b, 1 + st, spec)
        for i in range(spec.cross_layers):
            new_txt = _attn_ffn(txt, img, L, f"cross/{i}/txt", b, 1 + st, si, spec)
            new_img = _attn_ffn(img, txt, L, f"cross/{i}/img", b, si, 1 + st, spec)
            txt, img = new_txt, new_img
        txt = ad.layer_norm(txt, L["out_ln/g"], L["out_ln/b"])
        img = ad.layer_norm(img, L["out_ln/g"], L["out_ln/b"])
        cls_state = ad.reshape(ad.slice_axis(txt, 1, 0, 1), (b, h))
        img_state = img
        txt_state = ad.slice_axis(txt, 1, 1, 1 + st)

    if "head/W" in params.entries:
        logits = ad.linear(cls_state, L["head/W"], L["head/b"])
    else:
        logits = ad.linear(cls_state, L["head/itm/W"], L["head/itm/b"])
    return ModelOutput(cls_embedding=cls_state, logits=logits,
                       modality_states={"img": img_state, "txt": txt_state})


def arch_of(params: ParamStore) -> ArchSpec:
    spec = params.arch
    if not isinstance(spec, ArchSpec):
        raise ConfigError("parameter store has no attached architecture")
    return spec


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_std(params: ParamStore, mask: Optional[Mask], batch: Batch,
             tape: Optional[Tape] = None) -> Tensor:
    """Cross-entropy of the forward logits against the batch labels."""
    if batch.labels is None:
        raise DataError("batch has no labels")
    out = forward(params, mask, batch, tape)
    return ad.softmax_cross_entropy(out.logits, batch.labels)


def pretrain_objectives(params: ParamStore, mask: Optional[Mask], batch: Batch,
                        tape: Optional[Tape] = None,
                        terms: tuple = ("mlm", "mrm", "itm")) -> Tensor:
    """Sum of masked-token CE, masked-feature regression and ITM CE.

    ``terms`` restricts the objective (the text-only initialization trains
    with just the MLM term).
    """
    spec = arch_of(params)
    px = require_pretext(batch)
    tape = tape if tape is not None else Tape()
    out = forward(params, mask, batch, tape)
    L = {n: t for n, t in tape.named_leaves.items() if n.startswith("head/")}
    b = batch.size
    total = ad.constant(0.0)

    if "mlm" in terms:
        flat_targets = px.mlm_targets.reshape(-1)
        hit = np.nonzero(flat_targets >= 0)[0]
        if hit.size:
            txt_flat = ad.reshape(out.modality_states["txt"],
                                  (b * spec.txt_seq_len, spec.hidden))
            rows = ad.gather_rows(txt_flat, hit)
            logits = ad.linear(rows, L["head/mlm/W"], L["head/mlm/b"])
            total = ad.add(total, ad.softmax_cross_entropy(logits, flat_targets[hit]))

    if "mrm" in terms:
        hit = np.nonzero(px.mrm_mask.reshape(-1))[0]
        if hit.size:
            img_flat = ad.reshape(out.modality_states["img"],
                                  (b * spec.img_seq_len, spec.hidden))
            rows = ad.gather_rows(img_flat, hit)
            pred = ad.linear(rows, L["head/mrm/W"], L["head/mrm/b"])
            target = ad.constant(
                px.mrm_targets.reshape(-1, spec.img_feat_dim)[hit])
            diff = ad.sub(pred, target)
            total = ad.add(total, ad.scale(ad.sum_all(ad.mul(diff, diff)),
                                           1.0 / (hit.size * spec.img_feat_dim)))

    if "itm" in terms:
        logits = ad.linear(out.cls_embedding, L["head/itm/W"], L["head/itm/b"])
        total = ad.add(total, ad.softmax_cross_entropy(logits, px.itm_labels))

    return total
