"""Encoder-decoder generators (plain, fork, stacked output) and the patch discriminator."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

INIT_STD = 0.02
LEAK = 0.2
DROPOUT_BLOCKS = 3


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_heads: int = 1
    out_channels_per_head: int = 3
    resolution: int = 256
    base_width: int = 64
    block_trim: int = 0
    dropout_rate: float = 0.5
    skip: bool = False
    residual: bool = False  # output = clamp(input + net(input)); input and output must match

    def __post_init__(self):
        r = self.resolution
        if r < 64 or r & (r - 1):
            raise SpecError(f"resolution must be a power of two >= 64, got {r}")
        if self.out_heads not in (1, 2):
            raise SpecError(f"out_heads must be 1 or 2, got {self.out_heads}")
        if self.block_trim not in (0, 2):
            raise SpecError(f"block_trim must be 0 or 2, got {self.block_trim}")
        if not 0 <= self.dropout_rate < 1:
            raise SpecError("dropout_rate must lie in [0, 1)")
        if self.residual and (self.out_heads != 1 or self.in_channels != self.out_channels_per_head):
            raise SpecError("a residual generator needs one head with as many channels as its input")

    @property
    def depth(self) -> int:
        return int(math.log2(self.resolution)) - self.block_trim

    def widths(self) -> list[int]:
        """Output channels of each encoder block."""
        return [min(self.base_width * 2 ** i, 8 * self.base_width) for i in range(self.depth)]

    def fingerprint(self) -> str:
        return _fingerprint(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 6
    resolution: int = 256
    depth: int = 3
    base_width: int = 64

    def __post_init__(self):
        if self.depth < 3:
            raise SpecError(f"discriminator depth must be >= 3, got {self.depth}")
        if self.resolution < 2 ** (self.depth + 2):
            raise SpecError(f"resolution {self.resolution} too small for depth {self.depth}")

    def widths(self) -> list[int]:
        # ``depth`` stride-2 blocks then one stride-1 block
        return [min(self.base_width * 2 ** i, 8 * self.base_width) for i in range(self.depth + 1)]

    def fingerprint(self) -> str:
        return _fingerprint(self)


def _fingerprint(spec) -> str:
    doc = {"type": type(spec).__name__, **asdict(spec)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def init_weights(module: nn.Module, std: float = INIT_STD):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def down_block(c_in, c_out, norm=True):
    layers = [nn.Conv2d(c_in, c_out, 4, 2, 1)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(LEAK))
    return nn.Sequential(*layers)


def up_block(c_in, c_out, dropout=0.0):
    layers = [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.BatchNorm2d(c_out)]
    if dropout:
        layers.append(nn.Dropout(dropout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def out_block(c_in, c_out):
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.Tanh())


class Generator(nn.Module):
    """Plain encoder-decoder; with two heads the last two decoder blocks fork.

    The first and innermost encoder blocks carry no batch norm (the innermost
    one sees a 1x1 map), nor does the tanh output block.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths()
        d = spec.depth
        self.encoder = nn.ModuleList(
            down_block(spec.in_channels if i == 0 else w[i - 1], w[i], norm=0 < i < d - 1)
            for i in range(d)
        )
        # decoder block j mirrors encoder block d-1-j
        dec_out = [w[d - 2 - j] for j in range(d - 1)]
        mult = 2 if spec.skip else 1

        def dec_in(j):
            return w[d - 1] if j == 0 else dec_out[j - 1] * mult

        def dec_block(j):
            if j == d - 1:
                return out_block(dec_in(j), spec.out_channels_per_head)
            return up_block(dec_in(j), dec_out[j], spec.dropout_rate if j < DROPOUT_BLOCKS else 0.0)

        n_tail = 2 if spec.out_heads == 2 else 0
        self.n_shared = d - n_tail
        self.decoder = nn.ModuleList(dec_block(j) for j in range(self.n_shared))
        self.heads = nn.ModuleList(
            nn.ModuleList(dec_block(j) for j in range(self.n_shared, d)) for _ in range(spec.out_heads)
        ) if n_tail else nn.ModuleList()
        init_weights(self)

    def forward(self, x):
        check_input(self, x)
        inp = x
        skips = []
        for blk in self.encoder:
            x = blk(x)
            skips.append(x)
        skips.pop()
        x = self._decode(self.decoder, x, skips, 0)
        if not len(self.heads):
            return (inp + x).clamp(-1.0, 1.0) if self.spec.residual else x
        return tuple(self._decode(head, x, list(skips), self.n_shared) for head in self.heads)

    def _decode(self, blocks, x, skips, j0):
        for j, blk in enumerate(blocks, start=j0):
            if self.spec.skip and j > 0:
                x = torch.cat([x, skips[-j]], dim=1)
            x = blk(x)
        return x

    def shared_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of (conditioning, candidate) channel stacks."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths()
        layers = [nn.Conv2d(spec.in_channels, w[0], 4, 2, 1), nn.LeakyReLU(LEAK)]
        for i in range(1, spec.depth):
            layers += [nn.Conv2d(w[i - 1], w[i], 4, 2, 1), nn.BatchNorm2d(w[i]), nn.LeakyReLU(LEAK)]
        layers += [nn.Conv2d(w[spec.depth - 1], w[spec.depth], 4, 1, 1), nn.BatchNorm2d(w[spec.depth]),
                   nn.LeakyReLU(LEAK)]
        layers += [nn.Conv2d(w[spec.depth], 1, 4, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, cond, candidate=None):
        x = cond if candidate is None else torch.cat([cond, candidate], dim=1)
        check_input(self, x)
        return self.net(x)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def check_input(net, x):
    spec = net.spec
    c, r = spec.in_channels, spec.resolution
    if x.dim() != 4 or x.shape[1] != c or x.shape[2] != r or x.shape[3] != r:
        raise SpecError(f"expected N x {c} x {r} x {r} input, got {tuple(x.shape)}")


def build_generator(spec: GeneratorSpec) -> Generator:
    if spec.out_heads != 1:
        raise SpecError("use build_fork_generator for two heads")
    return Generator(spec)


def build_fork_generator(spec: GeneratorSpec) -> Generator:
    if spec.out_heads != 2:
        raise SpecError(f"fork generator needs out_heads=2, got {spec.out_heads}")
    return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    return PatchDiscriminator(spec)


def build(spec):
    if isinstance(spec, DiscriminatorSpec):
        return build_discriminator(spec)
    return build_fork_generator(spec) if spec.out_heads == 2 else build_generator(spec)


def forward(net: nn.Module, batch, training: bool = False, seed: int | None = None):
    """Run ``net`` in inference (default) or training mode.

    Inference disables dropout and uses running batch-norm statistics. In
    training mode ``seed`` fixes the dropout masks.
    """
    was_training = net.training
    net.train(training)
    try:
        if training:
            gen = torch.random.fork_rng() if seed is not None else _null()
            with gen:
                if seed is not None:
                    torch.manual_seed(seed)
                return net(batch)
        with torch.no_grad():
            return net(batch)
    finally:
        net.train(was_training)


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ------------------------------------------------------------ layer tables


def generator_layer_table(spec: GeneratorSpec) -> list[tuple]:
    """``(kind, k, c_in, c_out, batchnorm)`` for every parameterized layer, heads included."""
    w = spec.widths()
    d = spec.depth
    mult = 2 if spec.skip else 1
    table = []
    for i in range(d):
        table.append(("conv", 4, spec.in_channels if i == 0 else w[i - 1], w[i], 0 < i < d - 1))
    dec = []
    for j in range(d):
        c_in = w[d - 1] if j == 0 else w[d - 1 - j] * mult
        last = j == d - 1
        c_out = spec.out_channels_per_head if last else w[d - 2 - j]
        dec.append(("upconv", 4, c_in, c_out, not last))
    n_shared = d - (2 if spec.out_heads == 2 else 0)
    table += dec[:n_shared]
    for _ in range(spec.out_heads if spec.out_heads == 2 else 0):
        table += dec[n_shared:]
    return table


def layer_param_count(table) -> int:
    return sum(k * k * ci * co + co + (2 * co if bn else 0) for _, k, ci, co, bn in table)


# ------------------------------------------------------------ checkpoints


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    return {"GeneratorSpec": GeneratorSpec, "DiscriminatorSpec": DiscriminatorSpec}[kind](**d)


def spec_to_dict(spec) -> dict:
    return {"type": type(spec).__name__, **asdict(spec)}


def save_network(net: nn.Module, path):
    torch.save({"fingerprint": net.spec.fingerprint(), "spec": spec_to_dict(net.spec),
                "state": net.state_dict()}, Path(path))


def load_network(path, expected=None) -> nn.Module:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    spec = spec_from_dict(blob["spec"])
    if spec.fingerprint() != blob["fingerprint"]:
        raise SpecError(f"{path}: spec fingerprint mismatch")
    if expected is not None and expected.fingerprint() != blob["fingerprint"]:
        raise SpecError(f"{path}: checkpoint was built for a different spec")
    net = build(spec)
    net.load_state_dict(blob["state"])
    return net
