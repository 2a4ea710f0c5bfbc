"""Deterministic synthetic multimodal tasks.

Every example starts from a latent scene: a row of regions, each holding an
object with a shape, a color and a size.  The image side is a fixed random
projection of the per-region attribute encoding (a frozen stand-in for a
bottom-up feature extractor); the text side is a token sequence describing
or querying the scene.  Pre-training and all downstream tasks read the same
latent variables, which is what makes tickets found on one task meaningful
on another.

All generation is a pure function of (task, seed, size, split).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError
from .rng import substream

# latent alphabet
N_SHAPES = 8
N_COLORS = 6
N_SIZES = 3
LATENT_DIM = N_SHAPES + N_COLORS + N_SIZES

# default geometry, shared with the model configuration
IMG_SEQ_LEN = 4
TXT_SEQ_LEN = 6
IMG_FEAT_DIM = 16
VOCAB_SIZE = 32

# token map
TOK_PAD = 0
TOK_MASK = 1
TOK_DESC = 2
TOK_SEP = 3
TOK_ASK_COLOR = 4
TOK_CMP_SIZE = 5
TOK_COUNT = 6
TOK_WHICH = 7
SHAPE_BASE = 8            # 8..15
COLOR_BASE = SHAPE_BASE + N_SHAPES   # 16..21
SIZE_BASE = COLOR_BASE + N_COLORS    # 22..24
FILLER_BASE = SIZE_BASE + N_SIZES    # 25..31
N_FILLERS = VOCAB_SIZE - FILLER_BASE

MASK_RATE = 0.15
MISMATCH_RATE = 0.5

# stock sizes: large enough for stable dev accuracy, small enough for a desk
DEFAULT_DATA_SEED = 20240
DEFAULT_TRAIN_SIZE = 2048
DEFAULT_DEV_SIZE = 1024
DEFAULT_PRETRAIN_SIZE = 4096

# frozen feature extractors: independent of every experiment seed, like a
# pre-trained detector that is never trained
_GBU_SEED = 714206001
_RENDER_SEED = 714206002


def _projection(tag_seed: int, feat_dim: int) -> np.ndarray:
    rng = substream(tag_seed, "projection", feat_dim)
    w = rng.normal(0.0, 1.0, size=(LATENT_DIM, feat_dim))
    return w / np.sqrt(LATENT_DIM)


def _encode_regions(shapes, colors, sizes) -> np.ndarray:
    """One-hot attribute encoding, (n, regions, LATENT_DIM)."""
    n, k = shapes.shape
    out = np.zeros((n, k, LATENT_DIM))
    idx_n = np.arange(n)[:, None]
    idx_k = np.arange(k)[None, :]
    out[idx_n, idx_k, shapes] = 1.0
    out[idx_n, idx_k, N_SHAPES + colors] = 1.0
    out[idx_n, idx_k, N_SHAPES + N_COLORS + sizes] = 1.0
    return out


def render_features(shapes, colors, sizes, noise_rng, *, mode: str = "regions",
                    feat_dim: int = IMG_FEAT_DIM, noise: float = 0.05) -> np.ndarray:
    """Map latent attributes to per-region feature vectors.

    "regions" mimics detector features; "patches" mimics raw pixel patches.
    Both are frozen linear views of the same latents, differing only in the
    projection, so the two model families see equivalent information.
    """
    if mode == "regions":
        w = _projection(_GBU_SEED, feat_dim)
    elif mode == "patches":
        w = _projection(_RENDER_SEED, feat_dim)
    else:
        raise ConfigError(f"unknown feature mode {mode!r}")
    latents = _encode_regions(shapes, colors, sizes)
    feats = latents @ w
    feats += noise_rng.normal(0.0, noise, size=feats.shape)
    return feats


# ---------------------------------------------------------------------------
# task specs
# ---------------------------------------------------------------------------

RELATIONS = ("attribute_query", "pair_comparison", "cross_modal_match",
             "attribute_count", "region_reference")


@dataclass(frozen=True)
class TaskSpec:
    """A downstream task: a generative rule plus a label-noise level."""
    task_id: str
    class_count: int
    relation: str
    difficulty: float = 0.1

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ConfigError(f"unknown relation {self.relation!r}")
        if not (0.0 < self.difficulty <= 1.0):
            raise ConfigError("difficulty must lie in (0, 1]")
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")


def default_suite() -> list[TaskSpec]:
    """The five stock tasks with pairwise-distinct generative rules."""
    return [
        TaskSpec("color_query", N_COLORS, "attribute_query"),
        TaskSpec("size_compare", 3, "pair_comparison"),
        TaskSpec("caption_match", 2, "cross_modal_match"),
        TaskSpec("color_count", 4, "attribute_count"),
        TaskSpec("region_locate", IMG_SEQ_LEN, "region_reference"),
    ]


PRETRAIN_TASK_ID = "pretrain"


@dataclass
class Pretext:
    """Self-supervised annotations attached to a pre-training batch."""
    mlm_targets: np.ndarray      # (b, txt) int, -1 where not masked
    mrm_targets: np.ndarray      # (b, img, feat) clean features
    mrm_mask: np.ndarray         # (b, img) bool, True where masked
    itm_labels: np.ndarray       # (b,) int, 1 = matched pair


@dataclass
class Batch:
    img_feats: np.ndarray        # (b, img_seq, feat) regions or patches
    txt_tokens: np.ndarray       # (b, txt_seq) int
    labels: Optional[np.ndarray] = None
    pretext: Optional[Pretext] = None

    @property
    def size(self) -> int:
        return self.img_feats.shape[0]


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

UNIFORM_SCENE_RATE = 0.0


def _sample_scenes(rng, n: int, k: int, uniform_rate: float = 0.0):
    """Shapes distinct within a scene so a shape word names one object.

    With ``uniform_rate`` > 0, that fraction of scenes shows one object
    repeated in every region (the single-salient-object case common in
    captioned data); these scenes make cross-modal binding learnable before
    attention has sharpened.
    """
    shapes = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        shapes[i] = rng.choice(N_SHAPES, size=k, replace=False)
    colors = rng.integers(0, N_COLORS, size=(n, k))
    sizes = rng.integers(0, N_SIZES, size=(n, k))
    if uniform_rate > 0.0:
        uniform = rng.random(n) < uniform_rate
        shapes[uniform] = shapes[uniform, :1]
        colors[uniform] = colors[uniform, :1]
        sizes[uniform] = sizes[uniform, :1]
    return shapes, colors, sizes


N_MENTIONS = 2
ATTR_SLOTS = tuple(1 + 2 * j for j in range(N_MENTIONS))


def corrupt_attribute_words(rng, tokens: np.ndarray, rows: np.ndarray) -> None:
    """Replace each attribute word in ``rows`` with a wrong same-family word.

    Shape words are left intact, so a corrupted caption still names real
    objects but lies about what they look like; matching requires checking
    the image.
    """
    for slot in ATTR_SLOTS:
        col = tokens[rows, slot]
        is_color = (col >= COLOR_BASE) & (col < COLOR_BASE + N_COLORS)
        c = col - COLOR_BASE
        z = col - SIZE_BASE
        wrong_c = COLOR_BASE + (c + rng.integers(1, N_COLORS, size=col.shape)) % N_COLORS
        wrong_z = SIZE_BASE + (z + rng.integers(1, N_SIZES, size=col.shape)) % N_SIZES
        tokens[rows, slot] = np.where(is_color, wrong_c, wrong_z)


def _describe(rng, shapes, colors, sizes, txt_len: int) -> np.ndarray:
    """Caption: DESC + (attribute, shape) word pairs for two random regions.

    The attribute slot names the object's color or its size with equal
    probability, so the corpus teaches both bindings.
    """
    n, k = shapes.shape
    tokens = np.empty((n, txt_len), dtype=np.int64)
    tokens[:, 0] = TOK_DESC
    mention = np.empty((n, N_MENTIONS), dtype=np.int64)
    for i in range(n):
        mention[i] = rng.choice(k, size=N_MENTIONS, replace=False)
    rows = np.arange(n)
    for j in range(N_MENTIONS):
        m = mention[:, j]
        color_word = COLOR_BASE + colors[rows, m]
        size_word = SIZE_BASE + sizes[rows, m]
        use_color = rng.random(n) < 0.5
        tokens[:, 1 + 2 * j] = np.where(use_color, color_word, size_word)
        tokens[:, 2 + 2 * j] = SHAPE_BASE + shapes[rows, m]
    used = 1 + 2 * N_MENTIONS
    tokens[:, used:] = TOK_SEP
    if txt_len > used + 1:
        tokens[:, used + 1:] = FILLER_BASE + rng.integers(
            0, N_FILLERS, size=(n, txt_len - used - 1))
    return tokens


def _fillers(rng, n: int, width: int) -> np.ndarray:
    return FILLER_BASE + rng.integers(0, N_FILLERS, size=(n, width))


def _mismatched_captions(rng, shapes, colors, sizes, matched, txt_len):
    """Captions where rows with matched == 0 lie about the scene.

    Half of the mismatches swap in a caption of an unrelated scene (coarse:
    shape words may not even occur in the image); the other half keep the
    true shape words but corrupt the attribute words (fine: only the
    attribute binding gives them away).  Returns (tokens, swapped) so the
    generative record stays auditable.
    """
    n = shapes.shape[0]
    other = _sample_scenes(rng, n, shapes.shape[1])
    swap = (rng.random(n) < 0.5) & (matched == 0)
    cap_shapes = np.where(swap[:, None], other[0], shapes)
    cap_colors = np.where(swap[:, None], other[1], colors)
    cap_sizes = np.where(swap[:, None], other[2], sizes)
    tokens = _describe(rng, cap_shapes, cap_colors, cap_sizes, txt_len)
    corrupt = np.nonzero((matched == 0) & ~swap)[0]
    corrupt_attribute_words(rng, tokens, corrupt)
    return tokens, swap


# ---------------------------------------------------------------------------
# downstream task generation
# ---------------------------------------------------------------------------

@dataclass
class TaskDataset:
    """A labelled split with its generative latents kept for auditing."""
    task: TaskSpec
    split: str
    seed: int
    shapes: np.ndarray
    colors: np.ndarray
    sizes: np.ndarray
    txt_tokens: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    meta: dict[str, np.ndarray]
    feature_mode: str = "regions"
    _feat_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def img_feats(self) -> np.ndarray:
        feats = self._feat_cache.get(self.feature_mode)
        if feats is None:
            noise_rng = substream(self.seed, "feature-noise", self.task.task_id,
                                  self.split, self.feature_mode)
            feats = render_features(self.shapes, self.colors, self.sizes,
                                    noise_rng, mode=self.feature_mode)
            self._feat_cache[self.feature_mode] = feats
        return feats

    def take(self, indices) -> Batch:
        return Batch(img_feats=self.img_feats[indices],
                     txt_tokens=self.txt_tokens[indices],
                     labels=self.labels[indices])


def _apply_label_noise(rng, labels: np.ndarray, class_count: int,
                       difficulty: float) -> np.ndarray:
    """Flip a deterministic count of labels to uniformly chosen wrong classes.

    Exactly floor(n * difficulty * (1 - 1/classes)) labels flip, so a rule
    that knows the latents always scores at least 1 - difficulty*(1-1/c).
    """
    n = labels.shape[0]
    n_flip = int(np.floor(n * difficulty * (1.0 - 1.0 / class_count)))
    noisy = labels.copy()
    if n_flip == 0:
        return noisy
    flip_idx = rng.choice(n, size=n_flip, replace=False)
    offsets = rng.integers(1, class_count, size=n_flip)
    noisy[flip_idx] = (noisy[flip_idx] + offsets) % class_count
    return noisy


def gen_task(spec: TaskSpec, seed: int, size: int, split: str,
             feature_mode: str = "regions") -> TaskDataset:
    """Deterministic labelled dataset; train/dev use disjoint substreams."""
    if split not in ("train", "dev"):
        raise ConfigError(f"split must be 'train' or 'dev', got {split!r}")
    if size <= 0:
        raise ConfigError("size must be positive")
    rng = substream(seed, "task", spec.task_id, split)
    k, t = IMG_SEQ_LEN, TXT_SEQ_LEN
    shapes, colors, sizes = _sample_scenes(rng, size, k)
    tokens = np.full((size, t), TOK_SEP, dtype=np.int64)
    meta: dict[str, np.ndarray] = {}
    rows = np.arange(size)

    if spec.relation == "attribute_query":
        # the distractor shape makes the answer depend on reading slot 1
        # precisely, not on any shape word in the query
        target = rng.integers(0, k, size=size)
        distractor = (target + rng.integers(1, k, size=size)) % k
        clean = colors[rows, target]
        tokens[:, 0] = TOK_ASK_COLOR
        tokens[:, 1] = SHAPE_BASE + shapes[rows, target]
        tokens[:, 2] = SHAPE_BASE + shapes[rows, distractor]
        tokens[:, 3:] = _fillers(rng, size, t - 3)
        meta["target_region"] = target

    elif spec.relation == "pair_comparison":
        pair = np.empty((size, 2), dtype=np.int64)
        for i in range(size):
            pair[i] = rng.choice(k, size=2, replace=False)
        sa = sizes[rows, pair[:, 0]]
        sb = sizes[rows, pair[:, 1]]
        clean = np.where(sa < sb, 0, np.where(sa == sb, 1, 2))
        tokens[:, 0] = TOK_CMP_SIZE
        tokens[:, 1] = SHAPE_BASE + shapes[rows, pair[:, 0]]
        tokens[:, 2] = SHAPE_BASE + shapes[rows, pair[:, 1]]
        tokens[:, 3:] = _fillers(rng, size, t - 3)
        meta["region_a"] = pair[:, 0]
        meta["region_b"] = pair[:, 1]

    elif spec.relation == "cross_modal_match":
        clean = rng.integers(0, 2, size=size)
        tokens, swapped = _mismatched_captions(rng, shapes, colors, sizes,
                                               clean, t)
        meta["swapped"] = swapped.astype(np.int64)

    elif spec.relation == "attribute_count":
        query = rng.integers(0, N_COLORS, size=size)
        clean = rng.integers(0, spec.class_count, size=size)
        # rebuild colors so the queried color appears exactly `clean` times
        colors = np.empty((size, k), dtype=np.int64)
        for i in range(size):
            hit = rng.choice(k, size=clean[i], replace=False)
            row = query[i] + 1 + rng.integers(0, N_COLORS - 1, size=k)
            colors[i] = row % N_COLORS
            colors[i, hit] = query[i]
        tokens[:, 0] = TOK_COUNT
        tokens[:, 1] = COLOR_BASE + query
        tokens[:, 2:] = _fillers(rng, size, t - 2)
        meta["query_color"] = query

    elif spec.relation == "region_reference":
        clean = rng.integers(0, k, size=size)
        tokens[:, 0] = TOK_WHICH
        tokens[:, 1] = COLOR_BASE + colors[rows, clean]
        tokens[:, 2] = SHAPE_BASE + shapes[rows, clean]
        tokens[:, 3:] = _fillers(rng, size, t - 3)

    else:  # pragma: no cover - guarded by TaskSpec
        raise ConfigError(f"unknown relation {spec.relation!r}")

    if spec.relation != "region_reference" and spec.class_count < clean.max() + 1:
        raise ConfigError(f"class_count too small for {spec.relation}")
    labels = _apply_label_noise(rng, clean.astype(np.int64), spec.class_count,
                                spec.difficulty)
    return TaskDataset(task=spec, split=split, seed=seed, shapes=shapes,
                       colors=colors, sizes=sizes, txt_tokens=tokens,
                       labels=labels, clean_labels=clean.astype(np.int64),
                       meta=meta, feature_mode=feature_mode)


# ---------------------------------------------------------------------------
# pre-training corpus
# ---------------------------------------------------------------------------

@dataclass
class PretrainCorpus:
    """Image-text pairs with MLM / MRM / ITM annotations."""
    seed: int
    shapes: np.ndarray
    colors: np.ndarray
    sizes: np.ndarray
    txt_tokens: np.ndarray       # with MASK substitutions already applied
    mlm_targets: np.ndarray
    mrm_mask: np.ndarray
    itm_labels: np.ndarray
    feature_mode: str = "regions"
    _feat_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.itm_labels.shape[0]

    def _features(self):
        pair = self._feat_cache.get(self.feature_mode)
        if pair is None:
            noise_rng = substream(self.seed, "feature-noise", PRETRAIN_TASK_ID,
                                  self.feature_mode)
            clean = render_features(self.shapes, self.colors, self.sizes,
                                    noise_rng, mode=self.feature_mode)
            masked = clean.copy()
            masked[self.mrm_mask] = 0.0
            pair = (masked, clean)
            self._feat_cache[self.feature_mode] = pair
        return pair

    def take(self, indices) -> Batch:
        masked, clean = self._features()
        return Batch(
            img_feats=masked[indices],
            txt_tokens=self.txt_tokens[indices],
            labels=None,
            pretext=Pretext(mlm_targets=self.mlm_targets[indices],
                            mrm_targets=clean[indices],
                            mrm_mask=self.mrm_mask[indices],
                            itm_labels=self.itm_labels[indices]),
        )


def gen_pretrain_corpus(seed: int, size: int,
                        feature_mode: str = "regions") -> PretrainCorpus:
    """Corpus for MLM + MRM + ITM; half the pairs are mismatched."""
    if size <= 0:
        raise ConfigError("size must be positive")
    rng = substream(seed, "task", PRETRAIN_TASK_ID)
    k, t = IMG_SEQ_LEN, TXT_SEQ_LEN
    shapes, colors, sizes = _sample_scenes(rng, size, k,
                                           uniform_rate=UNIFORM_SCENE_RATE)
    itm = (rng.random(size) >= MISMATCH_RATE).astype(np.int64)  # 1 = matched
    tokens, _ = _mismatched_captions(rng, shapes, colors, sizes, itm, t)

    mlm_hits = rng.random((size, t)) < MASK_RATE
    mlm_targets = np.where(mlm_hits, tokens, -1)
    tokens = np.where(mlm_hits, TOK_MASK, tokens)
    mrm_mask = rng.random((size, k)) < MASK_RATE

    return PretrainCorpus(seed=seed, shapes=shapes, colors=colors, sizes=sizes,
                          txt_tokens=tokens, mlm_targets=mlm_targets,
                          mrm_mask=mrm_mask, itm_labels=itm,
                          feature_mode=feature_mode)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(dataset, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """Deterministic shuffled batches covering the dataset exactly once."""
    n = dataset.size
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = substream(epoch_seed, "batch-order").permutation(n)
    for lo in range(0, n, batch_size):
        yield dataset.take(order[lo:lo + batch_size])


def require_pretext(batch: Batch) -> Pretext:
    if batch.pretext is None:
        raise DataError("batch carries no pretext annotations")
    return batch.pretext


def dump_examples(dataset, path) -> int:
    """Debugging dump: one JSON record per line, payloads base64-encoded.

    Returns the number of records written.  The dump is for eyeballing and
    diffing only; training always regenerates from seeds.
    """
    import base64
    import json

    def b64(arr: np.ndarray) -> str:
        return base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode()

    labels = getattr(dataset, "labels", None)
    with open(path, "w", encoding="ascii") as fh:
        for i in range(dataset.size):
            record = {
                "index": i,
                "img_feats": b64(dataset.img_feats[i]) if hasattr(
                    dataset, "img_feats") else b64(dataset.take([i]).img_feats[0]),
                "txt_tokens": b64(dataset.txt_tokens[i]),
            }
            if labels is not None:
                record["label"] = int(labels[i])
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return dataset.size
