"""Network architectures and their shape/parameter calculators.

Four kinds are supported: a U-Net generator and a residual-block generator
for image translation, a patch discriminator emitting a score map over
overlapping receptive fields, and a time-conditioned U-Net noise predictor
for diffusion. Generators consume and produce rasters in [0, 1]; the
remap to the internal [-1, 1] range lives inside the modules. Weights are
held as named float32 arrays so checkpoints stay framework-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .errors import StructureError

KINDS = ("unet_gen", "resnet_gen", "patch_disc", "diffusion_unet")
NORMS = ("instance", "batch", "none")

DISC_KERNEL = 4
CHANNEL_CAP = 8  # channel widths are capped at base_width * CHANNEL_CAP


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 16
    depth: int = 3
    norm: str = "instance"
    time_embedding_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructureError(f"unknown architecture kind {self.kind!r}")
        if self.norm not in NORMS:
            raise StructureError(f"unknown norm {self.norm!r}")
        for name in ("in_channels", "out_channels", "base_width", "depth"):
            if getattr(self, name) < 1:
                raise StructureError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kind == "diffusion_unet":
            if self.time_embedding_dim < 2 or self.time_embedding_dim % 2:
                raise StructureError(
                    "diffusion_unet needs an even time_embedding_dim >= 2, "
                    f"got {self.time_embedding_dim}"
                )
        elif self.time_embedding_dim:
            raise StructureError(f"time_embedding_dim is only valid for diffusion_unet")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "norm": self.norm,
            "time_embedding_dim": self.time_embedding_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(**d)


@dataclass
class Weights:
    """Named float32 parameter arrays matching an ArchSpec."""

    spec: ArchSpec
    seed: int
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if not np.isfinite(arr).all():
                raise StructureError(f"parameter {name} contains non-finite values")


def _channels(base: int, level: int) -> int:
    return base * min(2**level, CHANNEL_CAP)


def _norm_layer(norm: str, channels: int) -> nn.Module:
    if norm == "instance":
        return nn.InstanceNorm2d(channels, affine=False)
    if norm == "batch":
        # batch statistics only; no running buffers so weights stay pure
        return nn.BatchNorm2d(channels, affine=True, track_running_stats=False)
    return nn.Identity()


def _normed(norm: str) -> bool:
    return norm != "none"


class UNetGenerator(nn.Module):
    """Encoder/decoder with skip connections; tanh-bounded output."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        b, d, norm = spec.base_width, spec.depth, spec.norm
        downs, ups = [], []
        for i in range(d):
            cin = spec.in_channels if i == 0 else _channels(b, i - 1)
            cout = _channels(b, i)
            use_bias = i == 0 or not _normed(norm)
            block = [nn.Conv2d(cin, cout, 4, 2, 1, bias=use_bias)]
            if i > 0:
                block.append(_norm_layer(norm, cout))
            block.append(nn.LeakyReLU(0.2))
            downs.append(nn.Sequential(*block))
        for i in range(d):
            cin = _channels(b, d - 1) if i == 0 else 2 * _channels(b, d - 1 - i)
            cout = _channels(b, d - 2 - i) if i < d - 1 else b
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=not _normed(norm)),
                    _norm_layer(norm, cout),
                    nn.ReLU(),
                )
            )
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(b, spec.out_channels, 3, 1, 1)

    def forward(self, x):
        x = x * 2.0 - 1.0
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        for i, up in enumerate(self.ups):
            x = up(x)
            if i < len(self.ups) - 1:
                x = torch.cat([x, skips[len(self.downs) - 2 - i]], dim=1)
        return (torch.tanh(self.head(x)) + 1.0) / 2.0


class ResnetBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        bias = not _normed(norm)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, bias=bias, padding_mode="reflect"),
            _norm_layer(norm, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1, bias=bias, padding_mode="reflect"),
            _norm_layer(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """7x7 stem, two downsamplings, N residual blocks, two upsamplings."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        b, norm = spec.base_width, spec.norm
        bias = not _normed(norm)
        layers: list[nn.Module] = [
            nn.Conv2d(spec.in_channels, b, 7, 1, 3, bias=bias, padding_mode="reflect"),
            _norm_layer(norm, b),
            nn.ReLU(),
        ]
        for cin, cout in ((b, 2 * b), (2 * b, 4 * b)):
            layers += [nn.Conv2d(cin, cout, 3, 2, 1, bias=bias), _norm_layer(norm, cout), nn.ReLU()]
        layers += [ResnetBlock(4 * b, norm) for _ in range(spec.depth)]
        for cin, cout in ((4 * b, 2 * b), (2 * b, b)):
            layers += [
                nn.ConvTranspose2d(cin, cout, 3, 2, 1, output_padding=1, bias=bias),
                _norm_layer(norm, cout),
                nn.ReLU(),
            ]
        layers += [nn.Conv2d(b, spec.out_channels, 7, 1, 3, padding_mode="reflect")]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        x = x * 2.0 - 1.0
        return (torch.tanh(self.body(x)) + 1.0) / 2.0


def _disc_strides(depth: int) -> list[int]:
    # all-but-last-two layers stride 2; a 1-layer disc is a single stride-1 conv
    return [2 if i < depth - 2 else 1 for i in range(depth)]


class PatchDiscriminator(nn.Module):
    """Stack of 4x4 convs emitting one logit per overlapping patch."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        b, d, norm = spec.base_width, spec.depth, spec.norm
        strides = _disc_strides(d)
        layers: list[nn.Module] = []
        for i, s in enumerate(strides):
            cin = spec.in_channels if i == 0 else _channels(b, i - 1)
            cout = 1 if i == d - 1 else _channels(b, i)
            middle = 0 < i < d - 1
            layers.append(nn.Conv2d(cin, cout, DISC_KERNEL, s, 1, bias=not (middle and _normed(norm))))
            if middle:
                layers.append(_norm_layer(norm, cout))
            if i < d - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        x = x * 2.0 - 1.0
        return self.body(x)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic log-spaced sin/cos position embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class DiffusionBlock(nn.Module):
    """conv + time bias + norm + SiLU with a residual shortcut."""

    def __init__(self, cin: int, cout: int, temb: int, norm: str):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 1, 1, bias=not _normed(norm))
        self.time_proj = nn.Linear(temb, cout)
        self.norm = _norm_layer(norm, cout)
        self.act = nn.SiLU()
        self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x, emb):
        h = self.conv(x) + self.time_proj(emb)[:, :, None, None]
        return self.shortcut(x) + self.act(self.norm(h))


class DiffusionUNet(nn.Module):
    """U-Net noise predictor conditioned on the diffusion timestep."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        b, d, norm, temb = spec.base_width, spec.depth, spec.norm, spec.time_embedding_dim
        ch = [_channels(b, i) for i in range(d + 1)]
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = nn.Conv2d(spec.in_channels, ch[0], 3, 1, 1)
        self.down_blocks = nn.ModuleList(
            DiffusionBlock(ch[i], ch[i], temb, norm) for i in range(d)
        )
        self.downs = nn.ModuleList(nn.Conv2d(ch[i], ch[i + 1], 4, 2, 1) for i in range(d))
        self.middle = DiffusionBlock(ch[d], ch[d], temb, norm)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(ch[i + 1], ch[i], 4, 2, 1) for i in reversed(range(d))
        )
        self.up_blocks = nn.ModuleList(
            DiffusionBlock(2 * ch[i], ch[i], temb, norm) for i in reversed(range(d))
        )
        self.head = nn.Conv2d(ch[0], spec.out_channels, 3, 1, 1)

    def forward(self, x, t):
        emb = sinusoidal_embedding(t, self.spec.time_embedding_dim).to(x.dtype)
        emb = self.time_mlp(emb)
        x = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            x = block(x, emb)
            skips.append(x)
            x = down(x)
        x = self.middle(x, emb)
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1), emb)
        return self.head(x)


_MODULE_CLASSES = {
    "unet_gen": UNetGenerator,
    "resnet_gen": ResnetGenerator,
    "patch_disc": PatchDiscriminator,
    "diffusion_unet": DiffusionUNet,
}


def make_module(spec: ArchSpec) -> nn.Module:
    """Instantiate the torch module for a spec (weights uninitialized)."""
    return _MODULE_CLASSES[spec.kind](spec)


def init_module(module: nn.Module, seed: int, zero_head: bool = False) -> None:
    """Deterministic normal(0, 0.02) init; biases zero; optional zero head."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=g) * 0.02)
                m.bias.zero_()
        if zero_head and hasattr(module, "head"):
            module.head.weight.zero_()
            module.head.bias.zero_()


def build(spec: ArchSpec, seed: int) -> Weights:
    """Deterministically initialized Weights for a spec."""
    module = make_module(spec)
    init_module(module, seed, zero_head=spec.kind == "diffusion_unet")
    return weights_from_module(spec, module, seed)


def weights_from_module(spec: ArchSpec, module: nn.Module, seed: int) -> Weights:
    tensors = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in module.named_parameters()
    }
    return Weights(spec=spec, seed=seed, tensors=tensors)


def module_from_weights(weights: Weights) -> nn.Module:
    module = make_module(weights.spec)
    expected = {name: tuple(p.shape) for name, p in module.named_parameters()}
    got = {name: arr.shape for name, arr in weights.tensors.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise StructureError(
            f"weights do not match spec {weights.spec.kind}: "
            f"missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    with torch.no_grad():
        for name, param in module.named_parameters():
            param.copy_(torch.from_numpy(weights.tensors[name]))
    return module


def _check_spatial(spec: ArchSpec, h: int, w: int) -> None:
    if spec.kind in ("unet_gen", "diffusion_unet"):
        m = 2**spec.depth
        if h % m or w % m:
            raise StructureError(
                f"{spec.kind} needs spatial size divisible by {m}, got {h}x{w}"
            )
    elif spec.kind == "resnet_gen":
        if h % 4 or w % 4:
            raise StructureError(f"resnet_gen needs spatial size divisible by 4, got {h}x{w}")
    else:
        oh, ow = output_shape(spec, (h, w))[1:]
        if oh < 1 or ow < 1:
            raise StructureError(f"patch_disc input {h}x{w} too small for depth {spec.depth}")


def output_shape(spec: ArchSpec, hw: tuple[int, int]) -> tuple[int, int, int]:
    """Predicted (channels, H, W) of forward() for an input of size hw."""
    h, w = hw
    if spec.kind == "patch_disc":
        for s in _disc_strides(spec.depth):
            h = (h + 2 - DISC_KERNEL) // s + 1
            w = (w + 2 - DISC_KERNEL) // s + 1
        return (1, h, w)
    return (spec.out_channels, h, w)


def forward(weights: Weights, x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """Run a batch through the network described by `weights`.

    x is (N, H, W, C) with C = spec.in_channels; generators and the
    discriminator expect values in [0, 1], the noise predictor accepts any
    finite floats and additionally requires a timestep per sample.
    """
    spec = weights.spec
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != spec.in_channels:
        raise StructureError(
            f"expected input (N, H, W, {spec.in_channels}), got {np.asarray(x).shape}"
        )
    _check_spatial(spec, arr.shape[1], arr.shape[2])
    if (t is None) == (spec.kind == "diffusion_unet"):
        raise StructureError("timesteps must be given iff the network is a noise predictor")

    module = module_from_weights(weights).eval()
    batch = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()
    with torch.no_grad():
        if spec.kind == "diffusion_unet":
            ts = torch.as_tensor(np.broadcast_to(np.asarray(t), (arr.shape[0],)).copy())
            out = module(batch, ts)
        else:
            out = module(batch)
    out_np = out.numpy().transpose(0, 2, 3, 1)
    return out_np[:, :, :, 0] if spec.kind == "patch_disc" else out_np


# ---------------------------------------------------------------------------
# Closed-form calculators. These intentionally re-derive the layer geometry
# from the spec (rather than walking a live module) so tests can pin them
# against independently counted fixtures.
# ---------------------------------------------------------------------------

def _conv_params(k: int, cin: int, cout: int, bias: bool) -> int:
    return k * k * cin * cout + (cout if bias else 0)


def param_count(spec: ArchSpec) -> int:
    b, d, norm = spec.base_width, spec.depth, spec.norm
    normed = _normed(norm)
    bn = 2 if norm == "batch" else 0  # affine scale+shift per channel
    total = 0
    if spec.kind == "unet_gen":
        for i in range(d):
            cin = spec.in_channels if i == 0 else _channels(b, i - 1)
            cout = _channels(b, i)
            total += _conv_params(4, cin, cout, i == 0 or not normed)
            total += bn * cout if i > 0 else 0
        for i in range(d):
            cin = _channels(b, d - 1) if i == 0 else 2 * _channels(b, d - 1 - i)
            cout = _channels(b, d - 2 - i) if i < d - 1 else b
            total += _conv_params(4, cin, cout, not normed) + bn * cout
        total += _conv_params(3, b, spec.out_channels, True)
    elif spec.kind == "resnet_gen":
        total += _conv_params(7, spec.in_channels, b, not normed) + bn * b
        for cin, cout in ((b, 2 * b), (2 * b, 4 * b)):
            total += _conv_params(3, cin, cout, not normed) + bn * cout
        total += d * 2 * (_conv_params(3, 4 * b, 4 * b, not normed) + bn * 4 * b)
        for cin, cout in ((4 * b, 2 * b), (2 * b, b)):
            total += _conv_params(3, cin, cout, not normed) + bn * cout
        total += _conv_params(7, b, spec.out_channels, True)
    elif spec.kind == "patch_disc":
        for i in range(d):
            cin = spec.in_channels if i == 0 else _channels(b, i - 1)
            cout = 1 if i == d - 1 else _channels(b, i)
            middle = 0 < i < d - 1
            total += _conv_params(4, cin, cout, not (middle and normed))
            total += bn * cout if middle else 0
    else:  # diffusion_unet
        temb = spec.time_embedding_dim
        ch = [_channels(b, i) for i in range(d + 1)]

        def block(cin, cout):
            n = _conv_params(3, cin, cout, not normed) + bn * cout
            n += temb * cout + cout  # time projection
            if cin != cout:
                n += _conv_params(1, cin, cout, True)
            return n

        total += 2 * (temb * temb + temb)  # time MLP
        total += _conv_params(3, spec.in_channels, ch[0], True)
        total += sum(block(ch[i], ch[i]) for i in range(d))
        total += sum(_conv_params(4, ch[i], ch[i + 1], True) for i in range(d))
        total += block(ch[d], ch[d])
        total += sum(_conv_params(4, ch[i + 1], ch[i], True) for i in range(d))
        total += sum(block(2 * ch[i], ch[i]) for i in range(d))
        total += _conv_params(3, ch[0], spec.out_channels, True)
    return total


def receptive_field(spec: ArchSpec) -> int:
    """Input pixels covered by one output score of a patch discriminator."""
    if spec.kind != "patch_disc":
        raise StructureError(f"receptive_field is defined for patch_disc only, not {spec.kind}")
    rf, jump = 1, 1
    for s in _disc_strides(spec.depth):
        rf += (DISC_KERNEL - 1) * jump
        jump *= s
    return rf
