"""Architecture descriptors, network assembly and parameter accounting.

Descriptor syntax (whitespace is ignored)::

    GEVConv(1^0, 2^01)v -> GEVConv(2^01, 2^0) -> head(52)

``c^T`` is ``c`` channels of type ``T``, where ``T`` is a string of ``0`` and
``1`` digits (``01`` is rho0 + rho1).  A trailing ``v`` pools after the
layer's nonlinearity.  Every convolution except the last is followed by a
regular nonlinearity.  ``head(H)`` appends global pooling and a dense
classifier ``Dense(c -> H) -> ReLU -> Dense(H -> classes)``; ``head(0)`` is a
single dense layer.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .network import Dense, GeometryContext, GlobalPool, Pool, ReLU, RegularNonlinearity, SteerableConv
from .steerable import FeatureType

_CONV_RE = re.compile(r"^(GEVConv|GEConv)\((\d+)\^([01]+),(\d+)\^([01]+)\)(v?)$")
_HEAD_RE = re.compile(r"^head\((\d+)\)$")

PRESETS = {
    # 2-layer ablation pair
    "gevnet2": ("GEVConv(1^0, 2^01)v -> GEVConv(2^01, 2^0) -> head(52)", "full"),
    "genet2": ("GEConv(1^0, 2^01)v -> GEConv(2^01, 4^0) -> head(52)", "full"),
    # 7-layer benchmark architectures
    "gevnet_mnist": (
        "GEVConv(1^0, 3^01) -> GEVConv(3^01, 3^01)v -> GEVConv(3^01, 8^01) -> GEVConv(8^01, 8^01)v"
        " -> GEVConv(8^01, 12^01) -> GEVConv(12^01, 12^01)v -> GEVConv(12^01, 12^0) -> head(432)",
        "diagonal",
    ),
    "genet_mnist": (
        "GEConv(1^0, 10^01) -> GEConv(10^01, 10^01)v -> GEConv(10^01, 16^01) -> GEConv(16^01, 16^01)v"
        " -> GEConv(16^01, 32^01) -> GEConv(32^01, 32^01)v -> GEConv(32^01, 32^0) -> head(432)",
        "diagonal",
    ),
    # 3-layer net used by the isometry checks
    "gevnet3": ("GEVConv(1^0, 2^01)v -> GEVConv(2^01, 2^01)v -> GEVConv(2^01, 2^0) -> head(16)", "full"),
    # pool-free 3-layer net for the cross-level convergence study
    "gevnet3_flat": ("GEVConv(1^0, 2^01) -> GEVConv(2^01, 2^01) -> GEVConv(2^01, 2^0) -> head(16)", "full"),
}

PUBLISHED_PARAMS = {"gevnet2": 804, "genet2": 824, "gevnet_mnist": 31_000, "genet_mnist": 45_000}


def parse_type(token: str) -> FeatureType:
    return FeatureType(token.count("0"), token.count("1"))


@dataclass(frozen=True)
class ConvSpec:
    order: int
    c_in: int
    rho_in: FeatureType
    c_out: int
    rho_out: FeatureType
    pool: bool


@dataclass(frozen=True)
class Architecture:
    descriptor: str
    level: int = 3
    pairing: str = "full"
    bias: bool = True
    N: int = 101
    batchnorm: bool = True
    num_classes: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, name: str, **overrides) -> "Architecture":
        if name not in PRESETS:
            raise ConfigError(f"unknown architecture preset {name!r}; known: {sorted(PRESETS)}")
        desc, pairing = PRESETS[name]
        kw = {"pairing": pairing}
        kw.update(overrides)
        return cls(desc, **kw)


def parse_descriptor(descriptor: str) -> tuple[list[ConvSpec], int]:
    """Split a descriptor into convolution specs and the head width."""
    tokens = [t for t in re.sub(r"\s+", "", descriptor).split("->") if t]
    if not tokens:
        raise ConfigError("empty architecture descriptor")
    convs, head = [], None
    for i, tok in enumerate(tokens):
        m = _CONV_RE.match(tok)
        if m:
            if head is not None:
                raise ConfigError("head must be the last descriptor element")
            kind, ci, ti, co, to, pool = m.groups()
            convs.append(
                ConvSpec(2 if kind == "GEVConv" else 1, int(ci), parse_type(ti), int(co), parse_type(to), pool == "v")
            )
            continue
        m = _HEAD_RE.match(tok)
        if m and i == len(tokens) - 1:
            head = int(m.group(1))
            continue
        raise ConfigError(f"cannot parse descriptor element {tok!r}")
    if not convs:
        raise ConfigError("descriptor has no convolution layers")
    for a, b in zip(convs, convs[1:]):
        if (a.c_out, a.rho_out) != (b.c_in, b.rho_in):
            raise ConfigError(f"layer types do not compose: {a.c_out}^{a.rho_out} vs {b.c_in}^{b.rho_in}")
    if convs[-1].pool:
        raise ConfigError("the last convolution cannot pool")
    if head is None:
        raise ConfigError("descriptor must end with head(H)")
    return convs, head


class Network:
    """A sequential stack of layers; input is a single scalar channel."""

    def __init__(self, arch: Architecture):
        self.arch = arch
        convs, head = parse_descriptor(arch.descriptor)
        if convs[0].c_in != 1 or convs[0].rho_in != FeatureType(1, 0):
            raise ConfigError("the first layer must take one rho0 channel")
        level = arch.level
        self.layers = []
        for i, c in enumerate(convs):
            last = i == len(convs) - 1
            self.layers.append(
                SteerableConv(c.c_in, c.rho_in, c.c_out, c.rho_out, c.order, level, arch.bias, arch.pairing)
            )
            if not last:
                self.layers.append(RegularNonlinearity(c.c_out, c.rho_out, level, arch.N, arch.batchnorm))
            if c.pool:
                if level < 1:
                    raise ConfigError("architecture pools below grid level 0")
                self.layers.append(Pool(c.rho_out, level))
                level -= 1
        last = convs[-1]
        self.layers.append(GlobalPool(last.rho_out))
        width = last.c_out * last.rho_out.n0
        if head > 0:
            self.layers += [Dense(width, head), ReLU(), Dense(head, arch.num_classes)]
        else:
            self.layers.append(Dense(width, arch.num_classes))
        self.output_level = level

    # -- parameters -------------------------------------------------------
    def init(self, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        self.zero_grad()
        return self

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{i}.{layer.kind}.{k}", layer, k

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def num_conv_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers if isinstance(layer, SteerableConv))

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def state_dict(self) -> dict:
        out = {name: layer.params[k] for name, layer, k in self.named_params()}
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                out[f"{i}.{layer.kind}.buffer.{k}"] = v
        return out

    def load_state_dict(self, state: dict):
        expected = self.state_dict()
        if set(expected) != set(state):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeMismatchError(f"checkpoint does not match architecture (missing {missing}, extra {extra})")
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                name = f"{i}.{layer.kind}.{k}"
                if state[name].shape != layer.params[k].shape:
                    raise ShapeMismatchError(f"{name}: shape {state[name].shape} != {layer.params[k].shape}")
                layer.params[k] = np.array(state[name], dtype=np.float64)
            for k in layer.buffers:
                layer.buffers[k] = np.array(state[f"{i}.{layer.kind}.buffer.{k}"], dtype=np.float64)
        self.zero_grad()

    # -- passes -----------------------------------------------------------
    def forward(self, x: np.ndarray, ctx: GeometryContext, train: bool = False) -> np.ndarray:
        """``x``: ``(B, V, 1, 1)`` scalar fields at ``arch.level``; returns logits ``(B, classes)``."""
        if x.ndim != 4 or x.shape[2:] != (1, 1):
            raise ShapeMismatchError("network input must be (B, V, 1, 1)")
        for layer in self.layers:
            x = layer.forward(x, ctx, train)
        return x

    def features(self, x: np.ndarray, ctx: GeometryContext, upto: int, train: bool = False) -> np.ndarray:
        for layer in self.layers[:upto]:
            x = layer.forward(x, ctx, train)
        return x

    def recalibrate(self, x: np.ndarray, ctx: GeometryContext, batch_size: int = 256) -> None:
        """Set every normalization layer's statistics to exact values over ``x``.

        Layers are processed in order so each sees inputs produced with the
        already recalibrated statistics of the layers before it.
        """
        for i, layer in enumerate(self.layers):
            if not (isinstance(layer, RegularNonlinearity) and layer.batchnorm):
                continue
            total = total_sq = 0.0
            count = 0
            for s in range(0, len(x), batch_size):
                h = self.features(x[s : s + batch_size], ctx, i)
                a, b, n = layer.moments(h, ctx)
                total, total_sq, count = total + a, total_sq + b, count + n
            layer.set_statistics(total, total_sq, count)

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def build_network(arch: Architecture, seed: int = 0) -> Network:
    return Network(arch).init(seed)


def count_params(arch: Architecture | str) -> int:
    """Total learnable parameters (coefficients, biases, normalization affine, dense)."""
    if isinstance(arch, str):
        arch = Architecture.preset(arch) if arch in PRESETS else Architecture(arch)
    return Network(arch).num_params()
