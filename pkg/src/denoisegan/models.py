"""Generator, patch discriminator and the frozen cascade feature network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (LEAKY_SLOPE, BatchNormParams, Conv2dParams, Module, ResidualBlockParams,
                 conv_out_size, max_pool2x2, set_training)
from .rng import Rng, derive
from .tensor import DimensionError, Tensor, concat, leaky_relu, mean, pad2d, relu, reshape, sigmoid, tanh


@dataclass
class GeneratorConfig:
    input_channels: int
    base_width: int = 64
    num_res_blocks: int = 9
    output_channels: int = 3
    image_size: int = 256
    use_skips: bool = True

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.num_res_blocks < 1:
            raise ValueError("num_res_blocks must be >= 1")


@dataclass
class DiscriminatorConfig:
    condition_channels: int
    layers: int = 4
    base_width: int = 64
    image_channels: int = 3


@dataclass
class CascadeNetConfig:
    num_levels: int = 5
    widths: list[int] = field(default_factory=lambda: [64, 64, 128, 128, 256])
    seed: int = 19
    pool_after: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        if len(self.widths) != self.num_levels:
            raise ValueError(f"need {self.num_levels} widths, got {self.widths}")


class Generator(Module):
    """Encoder (k7s1 stem, two k4s2 downsamplings), residual bottleneck at
    H/4, decoder (two k4s2 deconvolutions, k7s1 RGB head) and Tanh.

    With ``use_skips`` each encoder activation is concatenated onto the
    decoder input at the same resolution.
    """

    def __init__(self, cfg: GeneratorConfig, rng: Rng):
        self.cfg = cfg
        w, cin = cfg.base_width, cfg.input_channels
        sk = 2 if cfg.use_skips else 1
        self.stem = Conv2dParams(cin, w, 7, 1, 3, rng)
        self.stem_bn = BatchNormParams(w, rng)
        self.down1 = Conv2dParams(w, 2 * w, 4, 2, 1, rng)
        self.down1_bn = BatchNormParams(2 * w, rng)
        self.down2 = Conv2dParams(2 * w, 4 * w, 4, 2, 1, rng)
        self.down2_bn = BatchNormParams(4 * w, rng)
        self.res_blocks = [ResidualBlockParams(4 * w, rng) for _ in range(cfg.num_res_blocks)]
        self.up1 = Conv2dParams(4 * w * sk, 2 * w, 4, 2, 1, rng, transpose=True)
        self.up1_bn = BatchNormParams(2 * w, rng)
        self.up2 = Conv2dParams(2 * w * sk, w, 4, 2, 1, rng, transpose=True)
        self.up2_bn = BatchNormParams(w, rng)
        self.head = Conv2dParams(w * sk, cfg.output_channels, 7, 1, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise DimensionError(f"generator expects (B, {cfg.input_channels}, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"generator needs spatial dims divisible by 4, got {x.shape}")
        e1 = relu(self.stem_bn(self.stem(x)))
        e2 = relu(self.down1_bn(self.down1(e1)))
        e3 = relu(self.down2_bn(self.down2(e2)))
        h = e3
        for block in self.res_blocks:
            h = block(h)
        if cfg.use_skips:
            h = concat([h, e3])
        h = leaky_relu(self.up1_bn(self.up1(h)), LEAKY_SLOPE)
        if cfg.use_skips:
            h = concat([h, e2])
        h = leaky_relu(self.up2_bn(self.up2(h)), LEAKY_SLOPE)
        if cfg.use_skips:
            h = concat([h, e1])
        return tanh(self.head(h))


class Discriminator(Module):
    """Conditional patch classifier.

    ``layers`` strided k4s2p1 convolutions (BN on all but the first, then
    LeakyReLU 0.2), a k4s1 convolution with asymmetric "same" padding
    (1 before, 2 after) and a sigmoid per cell.
    """

    def __init__(self, cfg: DiscriminatorConfig, rng: Rng):
        self.cfg = cfg
        self.convs = []
        self.norms = []
        ch = cfg.condition_channels + cfg.image_channels
        for i in range(cfg.layers):
            out = cfg.base_width * min(2**i, 8)
            self.convs.append(Conv2dParams(ch, out, 4, 2, 1, rng))
            self.norms.append(BatchNormParams(out, rng) if i > 0 else None)
            ch = out
        self.norms = [n for n in self.norms if n is not None]
        self.final = Conv2dParams(ch, 1, 4, 1, 0, rng)

    def output_size(self, size: int) -> int:
        for _ in range(self.cfg.layers):
            size = conv_out_size(size, 4, 2, 1)
        return size

    def cells(self, condition: Tensor, image: Tensor) -> Tensor:
        if condition.shape[2:] != image.shape[2:] or condition.shape[0] != image.shape[0]:
            raise DimensionError(f"discriminator: condition {condition.shape} vs image {image.shape}")
        h = concat([condition, image])
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i > 0:
                h = self.norms[i - 1](h)
            h = leaky_relu(h, LEAKY_SLOPE)
        h = pad2d(h, (1, 2, 1, 2))
        return sigmoid(self.final(h))

    def __call__(self, condition: Tensor, image: Tensor) -> Tensor:
        """Per-sample score: the mean of the cell probabilities, shape (B,)."""
        c = self.cells(condition, image)
        return mean(reshape(c, (c.shape[0], -1)), axis=1)


class CascadeNet(Module):
    """Frozen multi-level feature extractor mirroring VGG-19 conv1_1..conv3_1.

    Level n is conv3x3 + ReLU; a 2x max-pool precedes the levels after
    ``pool_after``. Default weights are He-normal from a fixed seed; real
    pretrained weights can be loaded from a checkpoint file.
    """

    def __init__(self, cfg: CascadeNetConfig | None = None):
        cfg = cfg or CascadeNetConfig()
        self.cfg = cfg
        rng = Rng(derive(cfg.seed, 0xCA5CADE))
        self.convs = []
        ch = 3
        for width in cfg.widths:
            conv = Conv2dParams(ch, width, 3, 1, 1)
            fan_in = ch * 9
            conv.weight.data = (rng.normal(conv.weight.data.size) * np.sqrt(2.0 / fan_in)).astype(
                np.float32).reshape(conv.weight.shape)
            self.convs.append(conv)
            ch = width
        self.set_requires_grad(False)
        self.calls = 0

    def __call__(self, image: Tensor) -> list[Tensor]:
        self.calls += 1
        feats = []
        h = image
        for n, conv in enumerate(self.convs, start=1):
            h = relu(conv(h))
            feats.append(h)
            if n in self.cfg.pool_after and n < len(self.convs):
                h = max_pool2x2(h)
        return feats

    def load_weights(self, path) -> None:
        from .checkpoint import load_checkpoint

        entries = load_checkpoint(path).tensors
        for name, t in self.state("phi.").items():
            if name not in entries:
                raise KeyError(f"cascade weights file {path} has no entry {name!r}")
            arr = entries[name]
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: file shape {arr.shape} vs expected {t.shape}")
            t.data = arr.astype(np.float32)


def count_parameters(module: Module | None) -> int:
    """Element count of the learnable tensors; frozen weights do not count."""
    if module is None:
        return 0
    return int(sum(p.data.size for p in module.parameters() if p.requires_grad))


def build_models(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, ccfg: CascadeNetConfig | None, seed: int):
    """Initialise G and D from independent seeded streams."""
    g = Generator(gcfg, Rng(derive(seed, 0x6E4)))
    d = Discriminator(dcfg, Rng(derive(seed, 0xD15)))
    phi = CascadeNet(ccfg) if ccfg is not None else None
    return g, d, phi


__all__ = ["CascadeNet", "CascadeNetConfig", "Discriminator", "DiscriminatorConfig", "Generator",
           "GeneratorConfig", "build_models", "count_parameters", "set_training"]
