"""Test-time prototype refinement: support-set adaptation and prototype fusion.

Fusion works on a per-query *working map* at label resolution. Each step
selects the confidently segmented pixels of the working map (score above
a per-class self-adaptive threshold), pools query prototypes from them,
and mixes those with the support prototypes. Between steps the working
map is averaged with the map produced by the latest fused prototypes.
The final masks come from the last fused prototypes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import arraydiff as ad
from .encoder import EncoderParams, extract_features
from .episodes import Episode
from .protocore import (
    COSINE_RAW,
    DEFAULT_TEMPERATURE,
    SOFTMAXED,
    PrototypeSet,
    ScoreMap,
    argmax_labels,
    cosine_score_map,
    predict_mask,
    query_prototypes,
    segmentation_loss,
    support_prototypes,
)
from .trainer import OptimizerState, adam_step


class AdaptationError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite adaptation loss {loss} at step {step}")


@dataclass(frozen=True)
class RefineConfig:
    adapt_steps: int = 5
    adapt_learning_rate: float = 1e-4
    fusion_steps: int = 2
    omega_s: float = 0.5
    omega_q: float = 0.5
    temperature: float = DEFAULT_TEMPERATURE
    selection_map: str = SOFTMAXED  # or COSINE_RAW

    def __post_init__(self):
        if self.adapt_steps < 0 or self.fusion_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.selection_map not in (SOFTMAXED, COSINE_RAW):
            raise ValueError(f"selection_map must be {SOFTMAXED!r} or {COSINE_RAW!r}")
        for name in ("adapt_learning_rate", "omega_s", "omega_q", "temperature"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def _scores(score_map) -> np.ndarray:
    return score_map.numpy() if isinstance(score_map, ScoreMap) else np.asarray(score_map)


def self_adaptive_threshold(score_map) -> np.ndarray:
    """Per class: (max + mean) / 2 of that class's scores over all pixels."""
    s = _scores(score_map).astype(np.float64)
    if s.ndim != 3 or s[0].size == 0:
        raise ValueError("threshold needs a nonempty [N+1, h, w] map")
    flat = s.reshape(s.shape[0], -1)
    return (flat.max(axis=1) + flat.mean(axis=1)) / 2


def hard_select(pred_mask: np.ndarray, score_map, thresholds: np.ndarray) -> np.ndarray:
    """Keep a pixel's label only where its winning-class score beats that
    class's threshold; everything else becomes -1."""
    s = _scores(score_map)
    pred = np.asarray(pred_mask)
    if pred.shape != s.shape[1:]:
        raise ad.ShapeError("hard_select", s.shape, pred.shape)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    winner = np.take_along_axis(s, pred[None].astype(np.int64), axis=0)[0]
    keep = winner > thresholds[pred]
    return np.where(keep, pred, -1)


def fuse_prototypes(p_s: PrototypeSet, p_q: PrototypeSet, omega_s: float, omega_q: float) -> PrototypeSet:
    """``omega_s * p_s + omega_q * p_q`` per class; fallback entries of
    ``p_q`` leave the support prototype unchanged."""
    if p_s.n_classes != p_q.n_classes or p_s.channels != p_q.channels:
        raise ValueError(
            f"cannot fuse {p_s.n_classes}x{p_s.channels} with {p_q.n_classes}x{p_q.channels} prototypes"
        )
    vectors = []
    for vs, vq, fell_back in zip(p_s.vectors, p_q.vectors, p_q.fallback):
        if fell_back:
            vectors.append(vs)
        else:
            vectors.append(ad.add(ad.scalar_mul(vs, omega_s), ad.scalar_mul(vq, omega_q)))
    return PrototypeSet(vectors, list(p_q.counts), list(p_q.fallback))


def fuse_maps(m1: ScoreMap, m2: ScoreMap) -> ScoreMap:
    if m1.kind != m2.kind:
        raise ValueError(f"cannot fuse a {m1.kind} map with a {m2.kind} map")
    return ScoreMap(ad.scalar_mul(ad.add(m1.scores, m2.scores), 0.5), m1.kind)


# -- adaptation -----------------------------------------------------------


def adaptation_loss(params: EncoderParams, episode: Episode, temperature: float) -> ad.Tensor:
    """Cross entropy of segmenting the support images with their own prototypes."""
    feats = [[extract_features(params, img) for img in shots] for shots in episode.support_images]
    protos = support_prototypes(feats, episode.support_masks, episode.n_ways)
    flat_feats = [f for shots in feats for f in shots]
    flat_masks = [m for shots in episode.support_masks for m in shots]
    return segmentation_loss(flat_feats, flat_masks, protos, temperature)


def adapt(
    params: EncoderParams,
    episode: Episode,
    config: RefineConfig,
    history: list[float] | None = None,
) -> EncoderParams:
    """Return a copy of ``params`` after ``adapt_steps`` Adam steps on the
    support-only loss. ``params`` is never modified.

    If ``history`` is given, the loss before every step and after the last
    one is appended to it.
    """
    adapted = params.clone()
    if config.adapt_steps == 0:
        return adapted
    trainable = adapted.parameters()
    state = OptimizerState.for_params("adam", trainable)
    for step in range(config.adapt_steps):
        loss = adaptation_loss(adapted, episode, config.temperature)
        value = loss.item()
        if not math.isfinite(value):
            raise AdaptationError(step, value)
        if history is not None:
            history.append(value)
        adapted.zero_grad()
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in trainable]
        adam_step(trainable, grads, state, config.adapt_learning_rate)
        adapted.zero_grad()
    if history is not None:
        with ad.no_grad():
            history.append(adaptation_loss(adapted, episode, config.temperature).item())
    return adapted


# -- fusion pipeline ------------------------------------------------------


@dataclass
class RefineStep:
    step: int
    thresholds: list[np.ndarray]  # one vector per query
    selected: np.ndarray  # selected pixels per class, summed over queries
    norms: np.ndarray  # norms of the fused prototypes

    def to_line(self) -> str:
        alpha = "|".join(",".join(f"{a:.6f}" for a in t) for t in self.thresholds)
        sel = ",".join(str(int(c)) for c in self.selected)
        norms = ",".join(f"{n:.6f}" for n in self.norms)
        return f"step={self.step}\talpha={alpha}\tselected={sel}\tnorm={norms}"

    @classmethod
    def from_line(cls, line: str) -> "RefineStep":
        fields = dict(part.split("=", 1) for part in line.rstrip("\n").split("\t"))
        thresholds = [np.array([float(a) for a in t.split(",")]) for t in fields["alpha"].split("|")]
        return cls(
            int(fields["step"]),
            thresholds,
            np.array([int(c) for c in fields["selected"].split(",")]),
            np.array([float(n) for n in fields["norm"].split(",")]),
        )


@dataclass
class RefineTrace:
    steps: list[RefineStep] = field(default_factory=list)

    def to_text(self) -> str:
        return "".join(s.to_line() + "\n" for s in self.steps)

    @classmethod
    def from_text(cls, text: str) -> "RefineTrace":
        return cls([RefineStep.from_line(line) for line in text.splitlines() if line.strip()])


@dataclass
class RefineResult:
    masks: list[np.ndarray]  # final prediction per query
    prototypes: PrototypeSet  # prototypes behind the final prediction
    trace: RefineTrace
    support_only_masks: list[np.ndarray]  # prediction from the support prototypes


def _query_maps(
    features: Sequence[ad.Tensor], protos: PrototypeSet, shapes, config: RefineConfig
) -> tuple[list[np.ndarray], list[ScoreMap]]:
    labels, maps = [], []
    for f, shape in zip(features, shapes):
        raw = cosine_score_map(f, protos)
        lab, probs = predict_mask(raw, *shape, config.temperature)
        labels.append(lab)
        if config.selection_map == SOFTMAXED:
            maps.append(probs)
        else:
            maps.append(ScoreMap(ad.bilinear_resize(raw.scores, *shape), COSINE_RAW))
    return labels, maps


def refine_and_segment(params: EncoderParams, episode: Episode, config: RefineConfig) -> RefineResult:
    """Adapt (optionally), then segment every query with ``fusion_steps``
    rounds of prototype fusion. ``fusion_steps == 0`` segments with the
    support prototypes alone."""
    model = adapt(params, episode, config) if config.adapt_steps > 0 else params
    shapes = [q.shape[1:] for q in episode.query_images]
    with ad.no_grad():
        s_feats = [[extract_features(model, img, False) for img in shots] for shots in episode.support_images]
        q_feats = [extract_features(model, img, False) for img in episode.query_images]
        p_s = support_prototypes(s_feats, episode.support_masks, episode.n_ways)
        labels, working = _query_maps(q_feats, p_s, shapes, config)
        initial = labels
        trace = RefineTrace()
        fused = p_s
        for step in range(1, config.fusion_steps + 1):
            alphas = [self_adaptive_threshold(w) for w in working]
            sparse = [hard_select(lab, w, a) for lab, w, a in zip(labels, working, alphas)]
            p_q = query_prototypes(q_feats, sparse, fallback=p_s)
            fused = fuse_prototypes(p_s, p_q, config.omega_s, config.omega_q)
            selected = np.array([sum(int((s == n).sum()) for s in sparse) for n in range(p_s.n_classes)])
            norms = np.linalg.norm(fused.numpy(), axis=1)
            trace.steps.append(RefineStep(step, alphas, selected, norms))
            if step < config.fusion_steps:
                _, temp = _query_maps(q_feats, fused, shapes, config)
                working = [fuse_maps(w, t) for w, t in zip(working, temp)]
                labels = [argmax_labels(w.numpy()) for w in working]
        if config.fusion_steps == 0:
            final = initial
        else:
            final, _ = _query_maps(q_feats, fused, shapes, config)
    return RefineResult(final, fused.detach(), trace, initial)
