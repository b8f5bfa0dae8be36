"""Prototype extraction, cosine scoring, mask prediction and losses.

Conventions used throughout:

* a feature map is a ``Tensor`` of shape [C, h, w];
* a label mask is an integer array with ``-1`` for ignored pixels, ``0`` for
  background and ``1..N`` for the episode's foreground classes;
* prototypes are pooled at feature resolution (masks are nearest-resized
  down), while predictions and losses live at label resolution (score maps
  are bilinearly resized up).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import arraydiff as ad

COSINE_EPS = 1e-8
DEFAULT_TEMPERATURE = 20.0

COSINE_RAW = "cosine_raw"
SOFTMAXED = "softmaxed"


class EmptySupportClassError(ValueError):
    """A class has no labelled pixels in any of its support shots."""

    def __init__(self, class_id: int):
        self.class_id = class_id
        name = "background" if class_id == 0 else f"class {class_id}"
        super().__init__(f"empty support class: {name} has no labelled pixels")


@dataclass
class PrototypeSet:
    """One vector per class id 0..N (0 is background).

    ``fallback[n]`` marks entries that were EMPTY and were filled with a
    substitute vector (see :func:`query_prototypes`).
    """

    vectors: list[ad.Tensor]
    counts: list[int]
    fallback: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.fallback:
            self.fallback = [False] * len(self.vectors)
        if not len(self.vectors) == len(self.counts) == len(self.fallback):
            raise ValueError("prototype set fields have different lengths")
        dims = {v.shape for v in self.vectors}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ad.ShapeError("PrototypeSet", *dims, detail="vectors must share one length")

    @property
    def n_classes(self) -> int:
        return len(self.vectors)

    @property
    def channels(self) -> int:
        return self.vectors[0].shape[0]

    def matrix(self) -> ad.Tensor:
        return ad.stack(self.vectors)

    def numpy(self) -> np.ndarray:
        return np.stack([v.value for v in self.vectors])

    def detach(self) -> "PrototypeSet":
        return PrototypeSet([v.detach() for v in self.vectors], list(self.counts), list(self.fallback))


@dataclass
class ScoreMap:
    scores: ad.Tensor  # [N+1, h, w]
    kind: str

    def __post_init__(self):
        if self.kind not in (COSINE_RAW, SOFTMAXED):
            raise ValueError(f"unknown score map kind {self.kind!r}")
        if self.scores.value.ndim != 3:
            raise ad.ShapeError("ScoreMap", self.scores.shape, detail="expected [N+1, h, w]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape

    def numpy(self) -> np.ndarray:
        return self.scores.value


def to_resolution(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    mask = np.asarray(mask)
    return mask if mask.shape == (h, w) else ad.nearest_resize(mask, h, w)


def masked_average_pool(feature: ad.Tensor, mask: np.ndarray, class_id: int) -> ad.Tensor | None:
    """Mean feature column over ``mask == class_id``; ``None`` when no pixel matches."""
    mask = np.asarray(mask)
    if mask.shape != feature.shape[1:]:
        raise ad.ShapeError("masked_average_pool", feature.shape, mask.shape)
    sel = mask == class_id
    if not sel.any():
        return None
    return ad.masked_mean(feature, sel)


def _mean_of(vectors: Sequence[ad.Tensor]) -> ad.Tensor:
    if len(vectors) == 1:
        return vectors[0]
    total = vectors[0]
    for v in vectors[1:]:
        total = ad.add(total, v)
    return ad.scalar_mul(total, 1.0 / len(vectors))


def support_prototypes(
    features: Sequence[Sequence[ad.Tensor]],
    masks: Sequence[Sequence[np.ndarray]],
    n_ways: int,
) -> PrototypeSet:
    """Foreground and background prototypes from an N x K support set.

    ``features[n - 1][k]`` and ``masks[n - 1][k]`` belong to shot ``k`` of
    class ``n``. The foreground prototype of class ``n`` is the mean of the
    per-shot pooled vectors over the shots of class ``n`` in which the class
    is present. The background prototype pools every location labelled 0
    across all support images.
    """
    if len(features) != n_ways or len(masks) != n_ways:
        raise ValueError(f"expected support for {n_ways} classes, got {len(features)}")
    feats = [f for shots in features for f in shots]
    labels = [to_resolution(m, *f.shape[1:]) for f, m in zip(feats, (m for shots in masks for m in shots))]
    if len(labels) != len(feats):
        raise ValueError("support features and masks differ in count")

    bg_parts, bg_count = [], 0
    for f, m in zip(feats, labels):
        count = int((m == 0).sum())
        if count:
            bg_parts.append((ad.masked_mean(f, m == 0), count))
            bg_count += count
    if not bg_parts:
        raise EmptySupportClassError(0)
    # count-weighted mean of per-image means == mean over the pooled union
    if len(bg_parts) == 1:
        bg = bg_parts[0][0]
    else:
        bg = ad.scalar_mul(bg_parts[0][0], bg_parts[0][1] / bg_count)
        for vec, count in bg_parts[1:]:
            bg = ad.add(bg, ad.scalar_mul(vec, count / bg_count))

    vectors, counts = [bg], [bg_count]
    offset = 0
    for n in range(1, n_ways + 1):
        shots = len(features[n - 1])
        if shots < 1:
            raise ValueError(f"class {n} has no support shots")
        pooled, count = [], 0
        for k in range(shots):
            f, m = feats[offset + k], labels[offset + k]
            vec = masked_average_pool(f, m, n)
            if vec is not None:
                pooled.append(vec)
                count += int((m == n).sum())
        offset += shots
        if not pooled:
            raise EmptySupportClassError(n)
        vectors.append(_mean_of(pooled))
        counts.append(count)
    return PrototypeSet(vectors, counts)


def query_prototypes(
    features: Sequence[ad.Tensor],
    masks: Sequence[np.ndarray],
    fallback: PrototypeSet,
) -> PrototypeSet:
    """Prototypes pooled from (predicted, possibly sparse) query masks.

    Each class vector is the mean over queries of the per-query pooled
    vector, skipping queries in which the class has no selected pixel. A
    class selected nowhere takes the corresponding vector of ``fallback``
    and is flagged.
    """
    if len(features) != len(masks) or not features:
        raise ValueError("need one mask per query feature map")
    labels = [to_resolution(m, *f.shape[1:]) for f, m in zip(features, masks)]
    vectors, counts, flags = [], [], []
    for n in range(fallback.n_classes):
        pooled, count = [], 0
        for f, m in zip(features, labels):
            vec = masked_average_pool(f, m, n)
            if vec is not None:
                pooled.append(vec)
                count += int((m == n).sum())
        if pooled:
            vectors.append(_mean_of(pooled))
            flags.append(False)
        else:
            vectors.append(fallback.vectors[n])
            flags.append(True)
        counts.append(count)
    return PrototypeSet(vectors, counts, flags)


def cosine_score_map(feature: ad.Tensor, protos: PrototypeSet) -> ScoreMap:
    c, h, w = feature.shape
    if c != protos.channels:
        raise ad.ShapeError("cosine_score_map", feature.shape, (protos.n_classes, protos.channels))
    flat = ad.reshape(feature, (c, h * w))
    scores = ad.cosine_scores(flat, protos.matrix(), COSINE_EPS)
    return ScoreMap(ad.reshape(scores, (protos.n_classes, h, w)), COSINE_RAW)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lowest class id."""
    return np.argmax(scores, axis=0).astype(np.int64)


def predict_mask(
    score_map: ScoreMap, out_h: int, out_w: int, temperature: float = DEFAULT_TEMPERATURE
) -> tuple[np.ndarray, ScoreMap]:
    """Upsample raw cosine scores, scale by ``temperature`` and softmax.

    Returns the label mask and the softmaxed map at (out_h, out_w).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if score_map.kind != COSINE_RAW:
        raise ValueError("predict_mask expects a raw cosine score map")
    up = ad.bilinear_resize(score_map.scores, out_h, out_w)
    probs = ad.softmax(ad.scalar_mul(up, temperature), axis=0)
    return argmax_labels(up.value), ScoreMap(probs, SOFTMAXED)


def cross_entropy_loss(softmaxed: ScoreMap, target: np.ndarray) -> ad.Tensor:
    """Mean of ``-log p[target]`` over pixels whose target is not -1."""
    if softmaxed.kind != SOFTMAXED:
        raise ValueError("cross_entropy_loss expects a softmaxed score map")
    target = np.asarray(target)
    if target.shape != softmaxed.shape[1:]:
        raise ad.ShapeError("cross_entropy_loss", softmaxed.shape, target.shape)
    if not (target >= 0).any():
        raise ValueError("cross_entropy_loss: every target pixel is ignored")
    picked = ad.pick(softmaxed.scores, target)
    return ad.scalar_mul(ad.mean(ad.log(picked)), -1.0)


def segment(feature: ad.Tensor, protos: PrototypeSet, out_shape: tuple[int, int], temperature: float):
    """Score, upsample and predict in one call; returns (labels, softmaxed map)."""
    return predict_mask(cosine_score_map(feature, protos), *out_shape, temperature)


def segmentation_loss(
    features: Sequence[ad.Tensor],
    targets: Sequence[np.ndarray],
    protos: PrototypeSet,
    temperature: float,
) -> ad.Tensor:
    """Mean over images of the cross entropy of segmenting each with ``protos``."""
    terms = []
    for f, t in zip(features, targets):
        _, probs = segment(f, protos, np.shape(t), temperature)
        terms.append(cross_entropy_loss(probs, t))
    return _mean_of(terms)


def bidirectional_loss(
    support_features: Sequence[Sequence[ad.Tensor]],
    support_masks: Sequence[Sequence[np.ndarray]],
    query_features: Sequence[ad.Tensor],
    query_masks: Sequence[np.ndarray],
    n_ways: int,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ad.Tensor:
    """Training objective: query cross entropy under support prototypes plus
    support cross entropy under prototypes pooled from the predicted query
    masks (classes absent from every prediction reuse the support prototype).
    """
    p_s = support_prototypes(support_features, support_masks, n_ways)
    predicted, q_terms = [], []
    for f, m in zip(query_features, query_masks):
        labels, probs = segment(f, p_s, np.shape(m), temperature)
        predicted.append(labels)
        q_terms.append(cross_entropy_loss(probs, m))
    p_q = query_prototypes(query_features, predicted, p_s)
    flat_feats = [f for shots in support_features for f in shots]
    flat_masks = [m for shots in support_masks for m in shots]
    support_term = segmentation_loss(flat_feats, flat_masks, p_q, temperature)
    return ad.add(_mean_of(q_terms), support_term)
