"""Shuffled group convolution over neighborhood edge features.

An SGC unit stacks grouped pointwise convolutions.  Between consecutive
grouped layers the channels are shuffled so that every group of the next
layer sees outputs from every group of the previous one.  The unit ends with
a max-pool over the neighbor axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .geometry import EdgeVariant
from .tensor import Tensor


def _check_divisible(c: int, g: int, what: str = "channels") -> int:
    if g < 1 or c % g:
        raise ConfigurationError(f"group count {g} does not divide {what} {c}")
    return c // g


def split_groups(x: Tensor, g: int) -> list[Tensor]:
    """Split the channel axis into ``g`` contiguous equal blocks."""
    n = _check_divisible(x.shape[-1], g)
    if g == 1:
        return [x]
    return [T.slice_channels(x, j * n, (j + 1) * n) for j in range(g)]


def shuffle_permutation(c: int, g: int) -> np.ndarray:
    """``perm`` with ``out[..., i] = x[..., perm[i]]``: view as (g, c/g), transpose, flatten."""
    n = _check_divisible(c, g)
    return np.arange(c).reshape(g, n).T.reshape(-1)


def channel_shuffle(x: Tensor, g: int) -> Tensor:
    """Input channel ``c`` moves to ``(c mod n) * g + c // n`` with ``n = C / g``."""
    c = x.shape[-1]
    perm = shuffle_permutation(c, g)
    if g == 1 or g == c:
        return x
    return T.permute_channels(x, perm)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class GroupConvLayer:
    """Grouped 1x1 convolution with optional batch norm and ReLU.

    The weight tensor has shape ``(g, c_in/g, c_out/g)``; its size is
    ``c_in * c_out / g``.
    """

    def __init__(self, c_in: int, c_out: int, g: int = 1, rng: np.random.Generator | None = None,
                 with_bn: bool = True, with_activation: bool = True, name: str = "gconv"):
        a = _check_divisible(c_in, g, f"{name} input channels")
        b = _check_divisible(c_out, g, f"{name} output channels")
        rng = np.random.default_rng(0) if rng is None else rng
        bound = glorot_bound(a, b)
        self.g, self.c_in, self.c_out = g, c_in, c_out
        self.name = name
        self.with_bn = with_bn
        self.with_activation = with_activation
        self.weight = Tensor(rng.uniform(-bound, bound, size=(g, a, b)), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), True, f"{name}.bias")
        if with_bn:
            self.gamma = Tensor(np.ones(c_out), True, f"{name}.bn.gamma")
            self.beta = Tensor(np.zeros(c_out), True, f"{name}.bn.beta")
            self.running_mean = np.zeros(c_out)
            self.running_var = np.ones(c_out)

    @property
    def weight_count(self) -> int:
        return self.weight.data.size

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.with_bn:
            out["bn.gamma"] = self.gamma
            out["bn.beta"] = self.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.with_bn:
            return {}
        return {"bn.running_mean": self.running_mean, "bn.running_var": self.running_var}

    def block_diagonal(self) -> np.ndarray:
        """The equivalent dense ``(c_in, c_out)`` weight matrix."""
        g, a, b = self.weight.shape
        full = np.zeros((self.c_in, self.c_out))
        for j in range(g):
            full[j * a:(j + 1) * a, j * b:(j + 1) * b] = self.weight.data[j]
        return full

    def __call__(self, x: Tensor, training: bool = False, momentum: float = 0.9) -> Tensor:
        return group_conv_forward(x, self, training, momentum)


def group_conv_forward(x: Tensor, layer: GroupConvLayer, training: bool = False,
                       momentum: float = 0.9) -> Tensor:
    if x.shape[-1] != layer.c_in:
        raise DimensionError(
            f"{layer.name}: input shape {x.shape} does not match c_in={layer.c_in}")
    y = T.group_conv1x1(x, layer.weight, layer.bias)
    if layer.with_bn:
        y = T.batch_norm(y, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                         momentum, training)
    if layer.with_activation:
        y = T.relu(y)
    return y


@dataclass
class SgcUnitConfig:
    """``shared_input``: every group of the first layer reads the whole edge feature.

    With ``shared_input=False`` the edge feature is instead split into ``g``
    channel blocks, which requires ``g`` to divide its width.
    """

    g: int = 2
    mlp_widths: tuple[int, ...] = (32, 32, 64)
    edge_variant: EdgeVariant = EdgeVariant.CENTER_RELATIVE
    k: int = 16
    shared_input: bool = True
    with_bn: bool = True
    with_activation: bool = True

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.edge_variant = EdgeVariant(self.edge_variant)
        if not self.mlp_widths:
            raise ConfigurationError("SGC unit needs at least one MLP layer")
        for i, w in enumerate(self.mlp_widths):
            if self.g < 1 or w % self.g:
                raise ConfigurationError(
                    f"group count {self.g} does not divide width {w} of layer {i}")
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")

    def first_layer_in(self, c0: int) -> int:
        if self.shared_input:
            return c0 * self.g
        _check_divisible(c0, self.g, "edge feature channels")
        return c0


class SGCUnit:
    def __init__(self, config: SgcUnitConfig, c0: int, rng: np.random.Generator | None = None,
                 name: str = "sgc"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.c0 = c0
        self.name = name
        widths = config.mlp_widths
        c_in = config.first_layer_in(c0)
        self.layers: list[GroupConvLayer] = []
        for i, w in enumerate(widths):
            self.layers.append(GroupConvLayer(c_in, w, config.g, rng, config.with_bn,
                                              config.with_activation, f"{name}.layer{i}"))
            c_in = w

    @property
    def c_out(self) -> int:
        return self.config.mlp_widths[-1]

    def __call__(self, edge_feats: Tensor, training: bool = False, momentum: float = 0.9) -> Tensor:
        return sgc_unit_forward(edge_feats, self.config, self.layers, training, momentum)


def sgc_unit_forward(edge_feats: Tensor, config: SgcUnitConfig, layers: list[GroupConvLayer],
                     training: bool = False, momentum: float = 0.9) -> Tensor:
    """Grouped layers with a shuffle between consecutive ones, then max over neighbors."""
    if len(layers) != len(config.mlp_widths):
        raise ConfigurationError(
            f"{len(layers)} layers given for {len(config.mlp_widths)} configured widths")
    g = config.g
    y = edge_feats
    if config.shared_input and g > 1:
        y = T.concat_channels(*([edge_feats] * g))
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        y = group_conv_forward(y, layer, training, momentum)
        if i < last:
            y = channel_shuffle(y, g)
    pooled, _ = T.maxpool_neighbors(y)
    return pooled
