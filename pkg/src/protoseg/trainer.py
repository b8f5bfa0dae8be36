"""Episodic training of the encoder under the bidirectional objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import arraydiff as ad
from . import ptns
from .encoder import EncoderConfig, EncoderParams, extract_features, init_encoder, params_from_container, params_to_container
from .episodes import DatasetSplit, Source, flip_episode, sample_episode
from .protocore import DEFAULT_TEMPERATURE, bidirectional_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, lr: float, loss: float):
        self.iteration = iteration
        self.lr = lr
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (lr {lr:g})")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_momentum"
    learning_rate: float = 7e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    decay_interval: int = 1000
    iterations: int = 3000
    hflip_augment: bool = True
    flip_prob: float = 0.5
    n_ways: int = 1
    k_shots: int = 1
    n_queries: int = 1
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    log_every: int = 50
    encoder: EncoderConfig = EncoderConfig()

    def __post_init__(self):
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.decay_interval <= 0:
            raise ValueError("decay_interval must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def lr_at(self, iteration: int) -> float:
        """Step decay: ``lr0 * factor ** floor(iteration / interval)`` (0-based)."""
        return self.learning_rate * self.lr_decay_factor ** (iteration // self.decay_interval)


@dataclass
class OptimizerState:
    kind: str
    buffers: list[np.ndarray] = field(default_factory=list)  # SGD velocity or Adam first moment
    second: list[np.ndarray] = field(default_factory=list)  # Adam second moment
    step: int = 0

    @classmethod
    def for_params(cls, kind: str, params: Sequence[ad.Tensor]) -> "OptimizerState":
        zeros = [np.zeros_like(p.value) for p in params]
        second = [np.zeros_like(p.value) for p in params] if kind == "adam" else []
        return cls(kind, zeros, second)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m{i}": b for i, b in enumerate(self.buffers)}
        out.update({f"opt.v{i}": b for i, b in enumerate(self.second)})
        return out


def sgd_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: OptimizerState, lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- momentum * v + (g + wd * p); p <- p - lr * v`` in place."""
    for p, g, v in zip(params, grads, state.buffers):
        if g.shape != p.shape:
            raise ad.ShapeError("sgd_step", p.shape, g.shape)
        v *= momentum
        v += g + weight_decay * p.value
        p.value -= lr * v
    state.step += 1


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place (beta1 0.9, beta2 0.999, eps 1e-8)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(params, grads, state.buffers, state.second):
        if g.shape != p.shape:
            raise ad.ShapeError("adam_step", p.shape, g.shape)
        if weight_decay:
            g = g + weight_decay * p.value
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def episode_loss(params: EncoderParams, episode, temperature: float) -> ad.Tensor:
    s_feats = [[extract_features(params, img) for img in shots] for shots in episode.support_images]
    q_feats = [extract_features(params, img) for img in episode.query_images]
    return bidirectional_loss(s_feats, episode.support_masks, q_feats, episode.query_masks, episode.n_ways, temperature)


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration), 0x545241]).generate_state(1)[0])


@dataclass
class TrainResult:
    params: EncoderParams
    state: OptimizerState
    iteration: int
    losses: list[float]
    log: list[tuple[int, float, float]]

    def log_text(self) -> str:
        return "".join(f"{it}\t{loss:.6f}\t{lr:.6g}\n" for it, loss, lr in self.log)


def train(
    source: Source,
    split: DatasetSplit,
    config: TrainConfig,
    progress: Callable[[int, float, float], None] | None = None,
    params: EncoderParams | None = None,
    state: OptimizerState | None = None,
    start_iteration: int = 0,
    checkpoint: Callable[[int, EncoderParams, OptimizerState], None] | None = None,
) -> TrainResult:
    """Run iterations ``start_iteration .. config.iterations - 1``.

    Every iteration draws one episode from a seed derived from
    ``(config.seed, iteration)``, so a run resumed from a checkpoint
    (params, state, start_iteration) replays the remaining iterations
    exactly. ``progress`` receives ``(iteration, loss, lr)`` every
    ``log_every`` iterations; ``checkpoint`` is called at each decay
    boundary and at the end.
    """
    if split.role != "train":
        raise ValueError("train() needs a train split")
    if params is None:
        params = init_encoder(config.encoder, config.seed)
    if params.config != config.encoder:
        raise ValueError("initial parameters do not match the configured encoder")
    trainable = params.parameters()
    if state is None:
        state = OptimizerState.for_params(config.optimizer, trainable)

    losses, log = [], []
    it = start_iteration
    for it in range(start_iteration, config.iterations):
        lr = config.lr_at(it)
        seed = iteration_seed(config.seed, it)
        episode = sample_episode(source, split, config.n_ways, config.k_shots, config.n_queries, seed=seed)
        if config.hflip_augment:
            episode = flip_episode(episode, np.random.default_rng(seed), config.flip_prob)
        loss = episode_loss(params, episode, config.temperature)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(it + 1, lr, value)
        params.zero_grad()
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in trainable]
        if config.optimizer == "sgd_momentum":
            sgd_step(trainable, grads, state, lr, config.momentum, config.weight_decay)
        else:
            adam_step(trainable, grads, state, lr, config.weight_decay)
        params.zero_grad()
        losses.append(value)
        done = it + 1
        if done == 1 or done % config.log_every == 0:
            log.append((done, value, lr))
            if progress is not None:
                progress(done, value, lr)
        if checkpoint is not None and (done % config.decay_interval == 0 or done == config.iterations):
            checkpoint(done, params, state)
    end = max(start_iteration, config.iterations)
    return TrainResult(params, state, end, losses, log)


def save_checkpoint(path, params: EncoderParams, state: OptimizerState | None = None, iteration: int = 0, meta: dict[str, str] | None = None) -> None:
    tensors, info = params_to_container(params)
    info["iteration"] = str(iteration)
    if state is not None:
        tensors.update(state.arrays())
        info["optimizer"] = state.kind
        info["optimizer.step"] = str(state.step)
    info.update(meta or {})
    ptns.save_container(path, tensors, info)


def load_checkpoint(path) -> tuple[EncoderParams, OptimizerState | None, int, dict[str, str]]:
    tensors, meta = ptns.load_container(path)
    params = params_from_container(tensors, meta)
    state = None
    if "optimizer" in meta:
        n = len(params.parameters())
        kind = meta["optimizer"]
        state = OptimizerState(
            kind,
            [tensors[f"opt.m{i}"].copy() for i in range(n)],
            [tensors[f"opt.v{i}"].copy() for i in range(n)] if kind == "adam" else [],
            int(meta.get("optimizer.step", 0)),
        )
    return params, state, int(meta.get("iteration", 0)), meta
