"""Hierarchical classifier and segmenter built from SGC units.

Each encoder stage samples centers by farthest point sampling, gathers a
fixed-size neighborhood (k-NN by default, radius search as an ablation),
forms edge features and runs an SGC unit.  The next stage sees the sampled
positions concatenated with the unit's output.  The classifier max-pools the
last stage over points and applies a fully connected head; the segmenter
interpolates features back up through the stages with skip connections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .geometry import (EdgeVariant, PointCloud, edge_features, farthest_point_sample,
                       gather_points, interpolation_weights, knn_search, radius_search,
                       weighted_gather)
from .rng import stream
from .sgc import GroupConvLayer, SGCUnit, SgcUnitConfig
from .tensor import Tensor


@dataclass
class StageConfig:
    n_out: int
    sgc: SgcUnitConfig

    @property
    def k(self) -> int:
        return self.sgc.k


@dataclass
class ModelConfig:
    stages: tuple[StageConfig, ...]
    head_widths: tuple[int, ...] = (128, 64)
    seg_up_widths: tuple[tuple[int, ...], ...] = ((128,), (64, 64))
    n_classes: int = 4
    dropout_rate: float = 0.5
    in_channels: int = 3
    neighbor: str = "knn"
    radius: float = 0.25
    knn_method: str = "brute"

    def __post_init__(self):
        self.stages = tuple(s if isinstance(s, StageConfig) else
                            StageConfig(s["n_out"], SgcUnitConfig(**s["sgc"]))
                            for s in self.stages)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        self.seg_up_widths = tuple(tuple(int(w) for w in ws) for ws in self.seg_up_widths)

    def validate(self, require_stages: bool = True) -> "ModelConfig":
        if require_stages and not self.stages:
            raise ConfigurationError("model needs at least one stage")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.in_channels < 3:
            raise ConfigurationError("in_channels must include the 3 position channels")
        if self.neighbor not in ("knn", "radius"):
            raise ConfigurationError(f"neighbor must be 'knn' or 'radius', got {self.neighbor!r}")
        if self.neighbor == "radius" and self.radius <= 0:
            raise ConfigurationError("radius must be positive")
        for s in range(1, len(self.stages)):
            prev, cur = self.stages[s - 1], self.stages[s]
            if cur.n_out > prev.n_out:
                raise ConfigurationError(
                    f"stage {s} keeps {cur.n_out} points but receives only {prev.n_out}")
            if cur.k >= prev.n_out:
                raise ConfigurationError(
                    f"stage {s} k={cur.k} must be below its {prev.n_out} incoming points")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["stages"]:
            s["sgc"]["edge_variant"] = EdgeVariant(s["sgc"]["edge_variant"]).value
            s["sgc"]["mlp_widths"] = list(s["sgc"]["mlp_widths"])
        d["stages"] = list(d["stages"])
        d["head_widths"] = list(d["head_widths"])
        d["seg_up_widths"] = [list(w) for w in d["seg_up_widths"]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_groups(self, g: int) -> "ModelConfig":
        d = self.to_dict()
        for s in d["stages"]:
            s["sgc"]["g"] = g
        return ModelConfig.from_dict(d)


def default_config(n_classes: int = 4, g: int = 2, edge_variant: str = "a",
                   neighbor: str = "knn", in_channels: int = 3, n_points: int = 256,
                   k: int = 16) -> ModelConfig:
    """The desk-scale two-stage configuration.

    For 256-point clouds: keep 128 points with k=16 and SGC widths (32, 32, 64),
    then 32 points with k=8 and widths (64, 128); head (128, 64), dropout 0.5.
    Other cloud sizes scale the kept-point counts (N/2, N/8) and clip k to fit.
    """
    n1 = max(2, n_points // 2)
    n2 = max(1, n_points // 8)
    k1 = min(k, n_points - 1)
    k2 = max(1, min(k // 2, n1 - 1))
    stages = []
    for s, (n_out, widths, k_s) in enumerate(((n1, (32, 32, 64), k1), (n2, (64, 128), k2))):
        try:
            unit = SgcUnitConfig(g=g, mlp_widths=widths, edge_variant=edge_variant, k=k_s)
        except ConfigurationError as exc:
            raise ConfigurationError(f"stage{s}: {exc}") from None
        stages.append(StageConfig(n_out, unit))
    return ModelConfig(
        stages=tuple(stages),
        head_widths=(128, 64),
        seg_up_widths=((128,), (64, 64)),
        n_classes=n_classes,
        dropout_rate=0.5,
        in_channels=in_channels,
        neighbor=neighbor,
    )


class PointModel:
    """Shared encoder and parameter bookkeeping."""

    kind = "base"

    def __init__(self, cfg: ModelConfig, rng_seed: int = 42):
        cfg.validate()
        self.cfg = cfg
        self.seed = rng_seed
        self.bn_momentum = 0.9
        self.dtype = np.dtype(np.float64)
        rng = stream(rng_seed, "init")
        self._init_rng = rng
        self.units: list[SGCUnit] = []
        c = cfg.in_channels
        for s, st in enumerate(cfg.stages):
            unit = SGCUnit(st.sgc, c * st.sgc.edge_variant.multiplier, rng, name=f"stage{s}")
            self.units.append(unit)
            c = 3 + unit.c_out

    def layers(self) -> list[GroupConvLayer]:
        return [layer for u in self.units for layer in u.layers]

    def parameters(self) -> dict[str, Tensor]:
        return {f"{layer.name}.{k}": v for layer in self.layers()
                for k, v in layer.parameters().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers()
                for k, v in layer.buffers().items()}

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            target = params[k].data if k in params else bufs[k]
            if target.shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {target.shape}")
            target[...] = v

    def astype(self, dtype) -> "PointModel":
        """Convert parameters and buffers in place; float32 is a fast training path."""
        self.dtype = np.dtype(dtype)
        for layer in self.layers():
            for p in layer.parameters().values():
                p.data = p.data.astype(self.dtype)
            if layer.with_bn:
                layer.running_mean = layer.running_mean.astype(self.dtype)
                layer.running_var = layer.running_var.astype(self.dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def _prepare(self, points) -> np.ndarray:
        if isinstance(points, PointCloud):
            points = points.data
        arr = np.asarray(points, dtype=self.dtype)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[-1] != self.cfg.in_channels:
            raise DimensionError(
                f"model expects (B, N, {self.cfg.in_channels}) input, got {np.shape(points)}")
        return arr

    def _neighbors(self, xyz: np.ndarray, centers: np.ndarray, s: int) -> np.ndarray:
        k = self.cfg.stages[s].k
        if self.cfg.neighbor == "radius":
            return radius_search(xyz, self.cfg.radius * 2 ** s, k, centers).indices
        return knn_search(xyz, k, centers, self.cfg.knn_method).indices

    def encode(self, arr: np.ndarray, training: bool):
        """Run every stage; returns per-level ``(xyz, features)`` starting with the input."""
        xyz = arr[..., :3]
        feats = Tensor(arr)
        levels = [(xyz, feats)]
        for s, (st, unit) in enumerate(zip(self.cfg.stages, self.units)):
            n = xyz.shape[1]
            if st.n_out > n or st.k >= n:
                raise ConfigurationError(
                    f"stage {s} (n_out={st.n_out}, k={st.k}) needs more than {n} incoming points")
            centers = farthest_point_sample(xyz, st.n_out)
            nbrs = self._neighbors(xyz, centers, s)
            e = edge_features(feats, centers, nbrs, st.sgc.edge_variant)
            out = unit(e, training, self.bn_momentum)
            xyz = gather_points(xyz, centers)
            levels.append((xyz, out))
            feats = T.concat_channels(Tensor(xyz), out)
        return levels

    def __call__(self, points, training: bool = False, rng: np.random.Generator | None = None,
                 trace: dict | None = None) -> Tensor:
        return self.forward(points, training, rng, trace)


class Classifier(PointModel):
    kind = "classifier"

    def __init__(self, cfg: ModelConfig, rng_seed: int = 42):
        super().__init__(cfg, rng_seed)
        c = self.units[-1].c_out
        self.head: list[GroupConvLayer] = []
        for i, w in enumerate(cfg.head_widths):
            self.head.append(GroupConvLayer(c, w, 1, self._init_rng, name=f"head.fc{i}"))
            c = w
        self.head.append(GroupConvLayer(c, cfg.n_classes, 1, self._init_rng, with_bn=False,
                                        with_activation=False, name="head.out"))

    def layers(self) -> list[GroupConvLayer]:
        return super().layers() + self.head

    def forward(self, points, training: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> Tensor:
        """Logits ``(B, n_classes)``; ``rng`` drives dropout in training mode."""
        arr = self._prepare(points)
        levels = self.encode(arr, training)
        y, _ = T.maxpool_neighbors(levels[-1][1])
        if trace is not None:
            trace["levels"] = levels
            trace["global"] = y
        for layer in self.head[:-1]:
            y = layer(y, training, self.bn_momentum)
            y = T.dropout(y, self.cfg.dropout_rate, rng, training)
        return self.head[-1](y, training, self.bn_momentum)


class Segmenter(PointModel):
    kind = "segmenter"

    def __init__(self, cfg: ModelConfig, rng_seed: int = 42):
        super().__init__(cfg, rng_seed)
        if len(cfg.seg_up_widths) != len(cfg.stages):
            raise ConfigurationError(
                f"{len(cfg.seg_up_widths)} decoder width groups for {len(cfg.stages)} stages")
        skip = [cfg.in_channels] + [u.c_out for u in self.units[:-1]]
        c = self.units[-1].c_out
        self.decoder: list[list[GroupConvLayer]] = []
        for i, widths in enumerate(cfg.seg_up_widths):
            level = len(cfg.stages) - 1 - i
            c += skip[level]
            block = []
            for j, w in enumerate(widths):
                block.append(GroupConvLayer(c, w, 1, self._init_rng, name=f"up{i}.fc{j}"))
                c = w
            self.decoder.append(block)
        self.out = GroupConvLayer(c, cfg.n_classes, 1, self._init_rng, with_bn=False,
                                  with_activation=False, name="seg.out")

    def layers(self) -> list[GroupConvLayer]:
        return super().layers() + [l for block in self.decoder for l in block] + [self.out]

    def forward(self, points, training: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> Tensor:
        """Per-point logits ``(B, N, n_classes)``."""
        arr = self._prepare(points)
        levels = self.encode(arr, training)
        f = levels[-1][1]
        for i, block in enumerate(self.decoder):
            coarse_xyz = levels[-1 - i][0]
            fine_xyz, skip = levels[-2 - i]
            idx, w = interpolation_weights(coarse_xyz, fine_xyz)
            f = weighted_gather(f, idx, w)
            if trace is not None:
                trace[f"interp{i}"] = (f, coarse_xyz, fine_xyz)
            f = T.concat_channels(f, skip)
            for layer in block:
                f = layer(f, training, self.bn_momentum)
        return self.out(f, training, self.bn_momentum)


def build_classifier(cfg: ModelConfig, rng_seed: int = 42) -> Classifier:
    return Classifier(cfg, rng_seed)


def build_segmenter(cfg: ModelConfig, rng_seed: int = 42) -> Segmenter:
    return Segmenter(cfg, rng_seed)


def build_model(kind: str, cfg: ModelConfig, rng_seed: int = 42) -> PointModel:
    if kind == "classifier":
        return Classifier(cfg, rng_seed)
    if kind == "segmenter":
        return Segmenter(cfg, rng_seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def forward(model: PointModel, cloud, training: bool = False, seed: int | None = None) -> Tensor:
    """Run ``model`` on one cloud or a batch; training mode needs ``seed`` for dropout."""
    rng = None
    if training:
        if seed is None:
            raise ValueError("training-mode forward needs an explicit seed")
        rng = stream(seed, "dropout")
    return model(cloud, training, rng)
