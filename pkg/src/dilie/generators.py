"""Encoder-decoder (hourglass) generators and their noise inputs.

Architecture per level ``i`` (input channels ``c_in``, width ``c_i``)::

    down_i : conv3x3/2(c_in -> c_i)  norm  lrelu  conv3x3(c_i -> c_i)  norm  lrelu
    skip_i : conv1x1(c_in -> s_i)    norm  lrelu                 (only where s_i > 0)
    up_i   : norm(c_deep + s_i)  conv3x3(c_deep + s_i -> c_i)  norm  lrelu
             conv1x1(c_i -> c_i)  norm  lrelu

``c_deep`` is the width of the next level (or of this level's own down
block at the bottom).  Deeper features are bilinearly upsampled back to the
level's resolution before concatenation.  By default only the two deepest
levels carry skips, so no per-pixel path runs from the noise input to the
output and an untrained generator emits a smooth image.  A final conv1x1 maps ``c_0`` to
the output channels, followed by a sigmoid.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .core import MIN_SIDE, DimensionError


@dataclass
class GeneratorSpec:
    depth: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    skip_connections: bool = True
    skip_channels: int | tuple[int, ...] = (0, 0, 0, 4, 4)  # per level, outermost first; an int applies to all
    output_channels: int = 3
    output_activation: str = "sigmoid"
    input_channels: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not isinstance(self.skip_channels, int):
            self.skip_channels = tuple(int(c) for c in self.skip_channels)

    def skips(self) -> tuple[int, ...]:
        """Skip width of every level (all zero when skips are off)."""
        if not self.skip_connections:
            return (0,) * self.depth
        if isinstance(self.skip_channels, int):
            return (self.skip_channels,) * self.depth
        return self.skip_channels

    def validate(self) -> "GeneratorSpec":
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if len(self.channels) != self.depth:
            raise ValueError(f"channels has {len(self.channels)} entries for depth {self.depth}")
        if any(c < 1 for c in self.channels) or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.output_channels not in (1, 3):
            raise ValueError(f"output_channels must be 1 or 3, got {self.output_channels}")
        if self.output_activation != "sigmoid":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        if not isinstance(self.skip_channels, int) and len(self.skip_channels) != self.depth:
            raise ValueError(f"skip_channels has {len(self.skip_channels)} entries for depth {self.depth}")
        if self.skip_connections and (min(self.skips()) < 0 or max(self.skips()) < 1):
            raise ValueError("skip widths must be >= 0 with at least one level > 0 when skips are enabled")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        if not isinstance(self.skip_channels, int):
            d["skip_channels"] = list(self.skip_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


def image_head(**kw) -> GeneratorSpec:
    return GeneratorSpec(**kw)


def mask_head(**kw) -> GeneratorSpec:
    return GeneratorSpec(output_channels=1, **kw)


def denoise_head(**kw) -> GeneratorSpec:
    return GeneratorSpec(skip_connections=False, **kw)


class ChannelNorm(nn.Module):
    """Per-channel normalization over batch and space, always using batch statistics.

    Equivalent to training-mode batch norm without running buffers; defined on
    1x1 maps, where it returns the shift.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        # the aten op skips F.batch_norm's more-than-one-value check
        return torch.batch_norm(x, self.weight, self.bias, None, None, True, 0.0, self.eps, False)


def _conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate" if k > 1 else "zeros")


def _block(*layers) -> nn.Sequential:
    return nn.Sequential(*layers)


class _Level(nn.Module):
    def __init__(self, cin: int, width: int, deep_width: int, skip: int, inner: nn.Module | None):
        super().__init__()
        act = lambda: nn.LeakyReLU(0.2)  # noqa: E731
        self.down = _block(_conv(cin, width, 3, 2), ChannelNorm(width), act(),
                           _conv(width, width, 3), ChannelNorm(width), act())
        self.skip = _block(_conv(cin, skip, 1), ChannelNorm(skip), act()) if skip else None
        self.inner = inner
        self.up = _block(ChannelNorm(deep_width + skip), _conv(deep_width + skip, width, 3), ChannelNorm(width), act(),
                         _conv(width, width, 1), ChannelNorm(width), act())

    def forward(self, x):
        d = self.down(x)
        if self.inner is not None:
            d = self.inner(d)
        d = F.interpolate(d, size=x.shape[-2:], mode="bilinear", align_corners=False)
        if self.skip is not None:
            d = torch.cat([self.skip(x), d], dim=1)
        return self.up(d)


class Hourglass(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        ch = spec.channels
        skips = spec.skips()
        inner = None
        for i in reversed(range(spec.depth)):
            cin = spec.input_channels if i == 0 else ch[i - 1]
            deep = ch[min(i + 1, spec.depth - 1)]
            inner = _Level(cin, ch[i], deep, skips[i], inner)
        self.body = inner
        self.head = nn.Conv2d(ch[0], spec.output_channels, 1)

    def forward(self, z):
        return torch.sigmoid(self.head(self.body(z)))


class Generator(nn.Module):
    """A seeded hourglass network together with its spec."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec.validate()
        self.net = Hourglass(spec)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 3:
            z = z[None]
        if z.shape[1] != self.spec.input_channels:
            raise DimensionError(f"noise input has {z.shape[1]} channels, spec expects {self.spec.input_channels}")
        return self.net(z)


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    """Build a generator; conv weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    g = Generator(spec)
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in g.modules():
            if isinstance(m, nn.Conv2d):
                bound = 1.0 / (m.in_channels * m.kernel_size[0] * m.kernel_size[1]) ** 0.5
                m.weight.uniform_(-bound, bound, generator=rng)
                m.bias.uniform_(-bound, bound, generator=rng)
    return g


def expected_parameter_count(spec: GeneratorSpec) -> int:
    """Closed-form parameter count of :class:`Hourglass` for ``spec``."""
    spec.validate()

    def conv(cin, cout, k):
        return cout * (cin * k * k + 1)

    ch = spec.channels
    total = conv(ch[0], spec.output_channels, 1)
    for i, s in enumerate(spec.skips()):
        cin = spec.input_channels if i == 0 else ch[i - 1]
        deep = ch[min(i + 1, spec.depth - 1)]
        total += conv(cin, ch[i], 3) + conv(ch[i], ch[i], 3) + 4 * ch[i]
        if s:
            total += conv(cin, s, 1) + 2 * s
        total += 2 * (deep + s) + conv(deep + s, ch[i], 3) + conv(ch[i], ch[i], 1) + 4 * ch[i]
    return total


@dataclass
class NoiseSeedInput:
    values: torch.Tensor  # (C, H, W)
    seed: int
    jitter_sigma: float = 0.0
    _rng: torch.Generator | None = field(default=None, repr=False, compare=False)

    def jittered(self) -> torch.Tensor:
        """The input perturbed by fresh Gaussian jitter (the input itself if jitter is off)."""
        if self.jitter_sigma <= 0:
            return self.values
        if self._rng is None:
            self._rng = torch.Generator().manual_seed(self.seed + 1_000_003)
        noise = torch.randn(self.values.shape, generator=self._rng, dtype=self.values.dtype)
        return self.values + self.jitter_sigma * noise


def sample_noise_input(shape: tuple[int, int], channels: int, seed: int, jitter_sigma: float = 0.0,
                       dtype: torch.dtype = torch.float32) -> NoiseSeedInput:
    """Uniform noise in [0, 0.1] of shape (channels, H, W)."""
    h, w = shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"noise input shape {shape} below minimum side {MIN_SIDE}")
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be >= 0")
    rng = torch.Generator().manual_seed(seed)
    values = torch.rand((channels, h, w), generator=rng, dtype=torch.float64).to(dtype) * 0.1
    return NoiseSeedInput(values, seed, jitter_sigma)


def forward(g: Generator, z: NoiseSeedInput | torch.Tensor) -> torch.Tensor:
    """Generator output as an (H, W, C) tensor, differentiable in the parameters."""
    values = z.values if isinstance(z, NoiseSeedInput) else z
    return g(values.to(next(g.parameters()).dtype))[0].permute(1, 2, 0)


def save_generator(g: Generator, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file({k: v.detach().contiguous() for k, v in g.state_dict().items()}, str(path))
    Path(str(path) + ".json").write_text(json.dumps({"spec": g.spec.to_dict()}, indent=2))
    return path


def load_generator(path: str | os.PathLike) -> Generator:
    meta = json.loads(Path(str(path) + ".json").read_text())
    g = Generator(GeneratorSpec.from_dict(meta["spec"]))
    g.load_state_dict(load_file(str(path)))
    return g


def mean_abs_laplacian(x: np.ndarray) -> float:
    """Mean |discrete Laplacian| over the interior of an (H, W, C) array."""
    x = np.asarray(x, dtype=np.float64)
    lap = x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4 * x[1:-1, 1:-1]
    return float(np.mean(np.abs(lap)))
