"""Generator, two-headed critic and segmentor.

All three are plain 2D conv nets sized by ``ArchConfig``. ``depth`` is the
number of stride-2 stages; inputs must be divisible by ``2**depth``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

N_MODALITIES = 3
INIT_STD = 0.02


@dataclass
class ArchConfig:
    base_width: int = 64
    depth: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")

    def widths(self) -> list[int]:
        # stage k (k = 0 is full resolution) has w * 2**max(k-1, 0) channels, capped at 8w
        w = self.base_width
        return [min(w * 2 ** max(k - 1, 0), 8 * w) for k in range(self.depth + 1)]


PHANTOM_ARCH = ArchConfig(base_width=16, depth=3)


def label_planes(c: torch.Tensor, size: int, like: torch.Tensor) -> torch.Tensor:
    """(B,) integer labels -> (B, 3, size, size) spatially replicated one-hot."""
    onehot = F.one_hot(c.long(), N_MODALITIES).to(dtype=like.dtype, device=like.device)
    return onehot[:, :, None, None].expand(-1, -1, size, size)


def _check_spatial(x: torch.Tensor, depth: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) batch, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 ** depth or w % 2 ** depth:
        raise ShapeError(f"spatial size {h}x{w} not divisible by 2**{depth}")


class UNet(nn.Module):
    """Encoder-decoder with additive skips and a full-resolution 1x1 head.

    The head sees the decoder output concatenated with the raw input, so a
    pointwise intensity mapping is available at full resolution.
    """

    def __init__(self, in_ch: int, arch: ArchConfig, out_act: str = "tanh"):
        super().__init__()
        arch.validate()
        ch = arch.widths()
        self.depth = arch.depth
        self.stem = nn.Conv2d(in_ch, ch[0], 3, padding=1)
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch[k], ch[k + 1], 3, stride=2, padding=1, bias=False),
                          nn.InstanceNorm2d(ch[k + 1], affine=False),
                          nn.LeakyReLU(0.2))
            for k in range(arch.depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch[k + 1], ch[k], 3, padding=1, bias=False),
                          nn.InstanceNorm2d(ch[k], affine=False),
                          nn.ReLU())
            for k in range(arch.depth)
        )
        self.head = nn.Conv2d(ch[0] + in_ch, 1, 1)
        self.out_act = out_act

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        _check_spatial(inp, self.depth)
        skips = [F.leaky_relu(self.stem(inp), 0.2)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for k in reversed(range(self.depth)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[k](h) + skips[k]
        out = self.head(torch.cat([h, inp], dim=1))
        if self.out_act == "tanh":
            return torch.tanh(out)
        if self.out_act == "sigmoid":
            return torch.sigmoid(out)
        return out


class Generator(nn.Module):
    """G(x, c): source image plus label planes -> target image in [-1, 1]."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.net = UNet(1 + N_MODALITIES, arch, "tanh")

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.net.depth)
        return self.net(torch.cat([x, label_planes(c, x.shape[-1], x)], dim=1))


class Discriminator(nn.Module):
    """Critic over the (x, y) pair with a patch realness head and a modality head.

    No normalisation layers: the gradient penalty is defined per sample.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        ch = arch.widths()
        self.depth = arch.depth
        layers, c_in = [], 2
        for k in range(arch.depth):
            layers += [nn.Conv2d(c_in, ch[k + 1], 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = ch[k + 1]
        self.trunk = nn.Sequential(*layers)
        self.src = nn.Conv2d(c_in, 1, 3, padding=1)
        self.cls = nn.Linear(c_in, N_MODALITIES)

    def forward(self, x: torch.Tensor, y: torch.Tensor):
        if x.shape != y.shape:
            raise ShapeError(f"x {tuple(x.shape)} and y {tuple(y.shape)} differ")
        _check_spatial(x, self.depth)
        h = self.trunk(torch.cat([x, y], dim=1))
        return self.src(h), self.cls(h.mean(dim=(2, 3)))


class Segmentor(nn.Module):
    """S(y, c): whole-tumor probability map.

    ``in_ch`` counts image channels; label planes are appended when
    ``conditional`` (the tumor-consistency segmentor). The boost segmentor
    takes 4 image channels and no label.
    """

    def __init__(self, arch: ArchConfig, in_ch: int = 1, conditional: bool = True):
        super().__init__()
        self.conditional = conditional
        self.net = UNet(in_ch + (N_MODALITIES if conditional else 0), arch, "sigmoid")

    def forward(self, y: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        _check_spatial(y, self.net.depth)
        if self.conditional:
            if c is None:
                raise ValueError("conditional segmentor needs a modality label")
            y = torch.cat([y, label_planes(c, y.shape[-1], y)], dim=1)
        return self.net(y)


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()


_KIND_OFFSET = {"generator": 0, "discriminator": 1, "segmentor": 2, "boost_segmentor": 3}


def init_params(arch: ArchConfig, kind: str, **kwargs) -> nn.Module:
    """Build a network of ``kind`` with N(0, 0.02) weights and zero biases.

    Deterministic in ``arch.seed``; each kind draws from its own stream.
    """
    arch.validate()
    if kind == "generator":
        net = Generator(arch)
    elif kind == "discriminator":
        net = Discriminator(arch)
    elif kind == "segmentor":
        net = Segmentor(arch, **kwargs)
    elif kind == "boost_segmentor":
        kwargs.setdefault("in_ch", 4)
        kwargs.setdefault("conditional", False)
        net = Segmentor(arch, **kwargs)
    else:
        raise ConfigError(f"unknown network kind {kind!r}")
    gen = torch.Generator().manual_seed(int(arch.seed) * 8 + _KIND_OFFSET[kind])
    _init_weights(net, gen)
    return net


def n_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def checksum(net: nn.Module) -> str:
    """Bitwise fingerprint of all parameters."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def generator_forward(G: Generator, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return G(x, c)


def discriminator_forward(D: Discriminator, x: torch.Tensor, y: torch.Tensor):
    return D(x, y)


def segmentor_forward(S: Segmentor, y: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
    return S(y, c)


class Pix2PixEnsemble(nn.Module):
    """Three single-modality generators behind the G(x, c) interface."""

    def __init__(self, generators):
        super().__init__()
        if len(generators) != N_MODALITIES:
            raise ConfigError(f"need {N_MODALITIES} generators, got {len(generators)}")
        self.gens = nn.ModuleList(generators)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        out = torch.empty_like(x)
        for m in range(N_MODALITIES):
            sel = c == m
            if sel.any():
                out[sel] = self.gens[m](x[sel], c[sel])
        return out
