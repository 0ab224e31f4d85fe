"""Encoder, task head and reconstructor, plus the assembled vMFNet model."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .vmf import DEFAULT_NUM_KERNELS, DEFAULT_SIGMA, KernelBank, normalize_features, recompose, vmf_likelihoods

BN_MOMENTUM = 0.1


@dataclass
class EncoderConfig:
    depth: int = 3
    base_channels: int = 16
    feature_dim: int = 64
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.depth < 1 or self.base_channels < 1 or self.feature_dim < 1 or self.in_channels < 1:
            raise ConfigError(f"encoder sizes must be positive: {self}")
        step = 2**self.depth
        if any(s % step for s in self.input_size):
            raise ConfigError(
                f"input size {self.input_size} must be divisible by 2**depth = {step}"
            )

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.input_size[0] // 2, self.input_size[1] // 2)


@dataclass
class HeadConfig:
    in_channels: int
    hidden_channels: int
    out_channels: int

    def __post_init__(self):
        if min(self.in_channels, self.hidden_channels, self.out_channels) < 1:
            raise ConfigError(f"head channel counts must be positive: {self}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_kernels: int = DEFAULT_NUM_KERNELS
    sigma: float = DEFAULT_SIGMA
    num_classes: int = 3
    head_hidden: int = 16
    likelihood_norm: str = "l1"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.num_kernels < 2:
            raise ConfigError(f"num_kernels must be >= 2, got {self.num_kernels}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.likelihood_norm not in ("l1", "l2"):
            raise ConfigError(f"likelihood_norm must be 'l1' or 'l2', got {self.likelihood_norm!r}")
        if self.encoder.feature_dim < self.num_kernels:
            warnings.warn(
                f"feature_dim {self.encoder.feature_dim} < num_kernels {self.num_kernels}",
                stacklevel=2,
            )

    @property
    def task_head(self) -> HeadConfig:
        # K foreground classes plus background
        return HeadConfig(self.num_kernels, self.head_hidden, self.num_classes + 1)

    @property
    def reconstructor(self) -> HeadConfig:
        return HeadConfig(self.encoder.feature_dim, self.head_hidden, self.encoder.in_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["input_size"] = list(self.encoder.input_size)
        return d


class DoubleConv(nn.Sequential):
    """(3x3 conv, batch norm, ReLU) twice."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )


class Up(nn.Module):
    """Transposed-conv upsampling followed by skip concatenation and a double conv."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, in_channels // 2, 2, stride=2)
        self.conv = DoubleConv(in_channels // 2 + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class UNetEncoder(nn.Module):
    """UNet with the last upsampling stage and output layer removed.

    The result sits at half the input resolution. The final decoder stage
    emits ``feature_dim`` channels; with ``depth == 1`` there is no decoder
    and the bottleneck itself produces them.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        widths = [config.base_channels * 2**k for k in range(config.depth + 1)]
        if config.depth == 1:
            widths[1] = config.feature_dim
        self.inc = DoubleConv(config.in_channels, widths[0])
        self.downs = nn.ModuleList(
            nn.Sequential(nn.MaxPool2d(2), DoubleConv(widths[k], widths[k + 1]))
            for k in range(config.depth)
        )
        # decoder stages run from the bottleneck back up to level 1
        self.ups = nn.ModuleList()
        for level in range(config.depth - 1, 0, -1):
            out = config.feature_dim if level == 1 else widths[level]
            self.ups.append(Up(widths[level + 1], widths[level], out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.config.in_channels, *self.config.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"encoder expects [N, {expected[0]}, {expected[1]}, {expected[2]}], got {tuple(x.shape)}")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for up in self.ups:
            h = up(h, skips.pop())
        return h


class Head(nn.Module):
    """Shallow decoder shared by the task network and the reconstructor.

    double conv -> 2x transposed conv -> double conv -> 1x1 conv -> sigmoid.
    """

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        c = config.hidden_channels
        self.conv1 = DoubleConv(config.in_channels, c)
        self.up = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.conv2 = DoubleConv(c, c)
        self.out = nn.Conv2d(c, config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"head expects [N, {self.config.in_channels}, H, W], got {tuple(x.shape)}"
            )
        h = self.conv2(self.up(self.conv1(x)))
        return torch.sigmoid(self.out(h))


class Outputs(NamedTuple):
    features: torch.Tensor  # unit-norm Z, [N, D, H/2, W/2]
    likelihoods: torch.Tensor  # [N, J, H/2, W/2]
    recomposed: torch.Tensor  # [N, D, H/2, W/2]
    segmentation: torch.Tensor  # sigmoid mask probabilities, [N, K+1, H, W]
    reconstruction: torch.Tensor  # [N, C, H, W]
    kernels: torch.Tensor  # unit-norm bank, [J, D]


class VMFNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        gen = torch.Generator().manual_seed(seed)
        self.encoder = UNetEncoder(config.encoder)
        self.kernels = KernelBank(config.num_kernels, config.encoder.feature_dim, config.sigma, generator=gen)
        self.task = Head(config.task_head)
        self.reconstructor = Head(config.reconstructor)
        for part in (self.encoder, self.task, self.reconstructor):
            init_weights(part, gen)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Raw (unnormalized) features at half resolution."""
        return self.encoder(x)

    def decompose(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mu = self.kernels()
        z = normalize_features(self.encode(x))
        lik = vmf_likelihoods(z, mu, self.kernels.sigma, self.config.likelihood_norm)
        return z, lik, mu

    def segment(self, likelihoods: torch.Tensor) -> torch.Tensor:
        return self.task(likelihoods)

    def reconstruct(self, recomposed: torch.Tensor) -> torch.Tensor:
        return self.reconstructor(recomposed)

    def forward(self, x: torch.Tensor) -> Outputs:
        z, lik, mu = self.decompose(x)
        zt = recompose(lik, mu)
        return Outputs(z, lik, zt, self.segment(lik), self.reconstruct(zt), mu)

    @torch.no_grad()
    def predict_labels(self, x: torch.Tensor) -> torch.Tensor:
        """Hard labels by argmax over the sigmoid channels."""
        return self.segment(self.decompose(x)[1]).argmax(dim=1)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming fan-in init for convolutions, zero biases, identity batch norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _double_conv_params(cin: int, cout: int) -> int:
    return (cin * cout * 9 + cout) + (cout * cout * 9 + cout) + 4 * cout


def encoder_param_count(config: EncoderConfig) -> int:
    """Number of trainable parameters in :class:`UNetEncoder` for ``config``."""
    widths = [config.base_channels * 2**k for k in range(config.depth + 1)]
    if config.depth == 1:
        widths[1] = config.feature_dim
    n = _double_conv_params(config.in_channels, widths[0])
    n += sum(_double_conv_params(widths[k], widths[k + 1]) for k in range(config.depth))
    for level in range(config.depth - 1, 0, -1):
        cin = widths[level + 1]
        out = config.feature_dim if level == 1 else widths[level]
        n += cin * (cin // 2) * 4 + cin // 2
        n += _double_conv_params(cin // 2 + widths[level], out)
    return n


def head_param_count(config: HeadConfig) -> int:
    c = config.hidden_channels
    return (
        _double_conv_params(config.in_channels, c)
        + c * c * 4 + c
        + _double_conv_params(c, c)
        + c * config.out_channels + config.out_channels
    )


def model_param_count(config: ModelConfig) -> int:
    return (
        encoder_param_count(config.encoder)
        + config.num_kernels * config.encoder.feature_dim
        + head_param_count(config.task_head)
        + head_param_count(config.reconstructor)
    )
