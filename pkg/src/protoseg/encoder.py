"""Fully convolutional feature extractor.

Each block is a single dilated 3x3 convolution followed by ReLU; the last
block has no ReLU. The default layout downsamples once (stride 2 in the
first block) and keeps resolution afterwards with dilations 2 and 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arraydiff as ad
from . import ptns


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (2, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 4)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        object.__setattr__(self, "dilations", tuple(int(v) for v in self.dilations))
        if not self.widths:
            raise ValueError("encoder needs at least one block")
        if not len(self.widths) == len(self.strides) == len(self.dilations):
            raise ValueError("widths, strides and dilations must have equal length")
        if any(d < 1 for d in self.dilations) or any(s < 1 for s in self.strides):
            raise ValueError("strides and dilations must be >= 1")
        if any(b < a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError("dilations must be nondecreasing")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.input_channels < 1 or any(w < 1 for w in self.widths):
            raise ValueError("channel counts must be positive")

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def depth(self) -> int:
        return len(self.widths)

    def truncated(self, depth: int) -> "EncoderConfig":
        """The first ``depth`` blocks, for backbone-depth ablations."""
        if not 1 <= depth <= self.depth:
            raise ValueError(f"depth must be in 1..{self.depth}")
        return EncoderConfig(
            self.input_channels,
            self.widths[:depth],
            self.strides[:depth],
            self.dilations[:depth],
            self.kernel_size,
        )

    def padding(self, block: int) -> int:
        return self.dilations[block] * (self.kernel_size - 1) // 2

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k = self.kernel_size
        for b in range(self.depth):
            s, d, p = self.strides[b], self.dilations[b], self.padding(b)
            h = ad.conv_output_size(h, k, s, d, p)
            w = ad.conv_output_size(w, k, s, d, p)
        return h, w


@dataclass
class EncoderParams:
    config: EncoderConfig
    kernels: list[ad.Tensor] = field(default_factory=list)
    biases: list[ad.Tensor] = field(default_factory=list)

    def parameters(self) -> list[ad.Tensor]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"block{i}.kernel"] = k.value
            out[f"block{i}.bias"] = b.value
        return out

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def clone(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            [ad.Tensor(k.value.copy(), requires_grad=True) for k in self.kernels],
            [ad.Tensor(b.value.copy(), requires_grad=True) for b in self.biases],
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def equals(self, other: "EncoderParams") -> bool:
        """Bitwise equality of configuration and every parameter array."""
        if self.config != other.config:
            return False
        mine, theirs = self.named_arrays(), other.named_arrays()
        return mine.keys() == theirs.keys() and all(
            mine[k].dtype == theirs[k].dtype and np.array_equal(mine[k], theirs[k]) for k in mine
        )


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """Kaiming-normal kernels (fan-in, ReLU gain) and zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x454E43]))
    params = EncoderParams(config)
    c_in, k = config.input_channels, config.kernel_size
    for width in config.widths:
        fan_in = c_in * k * k
        std = math.sqrt(2.0 / fan_in)
        kernel = rng.normal(0.0, std, size=(width, c_in, k, k))
        params.kernels.append(ad.Tensor(kernel, requires_grad=True))
        params.biases.append(ad.Tensor(np.zeros(width), requires_grad=True))
        c_in = width
    return params


def extract_features(params: EncoderParams, image, track_gradients: bool = True) -> ad.Tensor:
    """Map a [3, H, W] image (values in [0, 1]) to a [C, h, w] feature map."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    if x.value.ndim != 3 or x.shape[0] != params.config.input_channels:
        raise ad.ShapeError("extract_features", x.shape, detail="expected [C_in, H, W]")
    if x.has_nonfinite():
        raise ValueError("extract_features: image contains non-finite values")
    if not track_gradients:
        with ad.no_grad():
            return _forward(params, x)
    return _forward(params, x)


def _forward(params: EncoderParams, x: ad.Tensor) -> ad.Tensor:
    cfg = params.config
    last = cfg.depth - 1
    for b, (kernel, bias) in enumerate(zip(params.kernels, params.biases)):
        x = ad.conv2d(
            x, kernel, bias, stride=cfg.strides[b], dilation=cfg.dilations[b], padding=cfg.padding(b)
        )
        if b != last:
            x = ad.relu(x)
    return x


def params_to_container(params: EncoderParams) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    cfg = params.config
    meta = {
        "encoder.input_channels": str(cfg.input_channels),
        "encoder.widths": ",".join(map(str, cfg.widths)),
        "encoder.strides": ",".join(map(str, cfg.strides)),
        "encoder.dilations": ",".join(map(str, cfg.dilations)),
        "encoder.kernel_size": str(cfg.kernel_size),
    }
    return params.named_arrays(), meta


def params_from_container(tensors: dict[str, np.ndarray], meta: dict[str, str]) -> EncoderParams:
    def ints(key):
        return tuple(int(v) for v in meta[key].split(","))

    try:
        cfg = EncoderConfig(
            input_channels=int(meta["encoder.input_channels"]),
            widths=ints("encoder.widths"),
            strides=ints("encoder.strides"),
            dilations=ints("encoder.dilations"),
            kernel_size=int(meta["encoder.kernel_size"]),
        )
    except KeyError as err:
        raise ValueError(f"checkpoint lacks encoder metadata {err}") from None
    params = EncoderParams(cfg)
    c_in, k = cfg.input_channels, cfg.kernel_size
    for i, width in enumerate(cfg.widths):
        kernel = tensors.get(f"block{i}.kernel")
        bias = tensors.get(f"block{i}.bias")
        if kernel is None or bias is None:
            raise ValueError(f"checkpoint lacks parameters for block {i}")
        if kernel.shape != (width, c_in, k, k) or bias.shape != (width,):
            raise ValueError(f"block {i} parameter shapes disagree with the architecture")
        params.kernels.append(ad.Tensor(kernel, requires_grad=True))
        params.biases.append(ad.Tensor(bias, requires_grad=True))
        c_in = width
    return params


def save_encoder(path: str | Path, params: EncoderParams, extra_meta: dict[str, str] | None = None) -> None:
    tensors, meta = params_to_container(params)
    meta.update(extra_meta or {})
    ptns.save_container(path, tensors, meta)


def load_encoder(path: str | Path) -> EncoderParams:
    tensors, meta = ptns.load_container(path)
    return params_from_container(tensors, meta)
