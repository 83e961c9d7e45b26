"""Analytic parameter / FLOP counts and a forward-time harness.

One multiply-add counts as one FLOP.  Only the pointwise convolution weights
contribute to ``flops``; bias adds, batch norm, activations, pooling and
interpolation are tallied separately as ``other_ops``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import ModelConfig, PointModel
from .tensor import no_grad


def _divides(c_in: int, c_out: int, g: int) -> None:
    if g < 1 or c_in % g or c_out % g:
        raise ConfigurationError(f"group count {g} must divide c_in={c_in} and c_out={c_out}")


def layer_params(c_in: int, c_out: int, g: int = 1) -> int:
    """Weight count of a grouped 1x1 convolution: ``c_in * c_out / g``."""
    _divides(c_in, c_out, g)
    return (c_in // g) * (c_out // g) * g


def layer_flops(n: int, k: int, c_in: int, c_out: int, g: int = 1) -> int:
    """Multiply-adds of a grouped 1x1 convolution over ``n * k`` positions."""
    _divides(c_in, c_out, g)
    if n < 1 or k < 1:
        raise ConfigurationError(f"n and k must be positive, got n={n}, k={k}")
    return n * k * c_in * c_out // g


@dataclass
class LayerCost:
    name: str
    c_in: int
    c_out: int
    g: int
    n: int
    k: int
    weight_params: int
    bias_params: int
    bn_params: int
    params: int
    flops: int
    other_ops: int
    grouped: bool


@dataclass
class ComplexityReport:
    rows: list[LayerCost]
    input_dims: tuple[int, int]
    forward_time_ms: dict | None = None
    params: int = field(init=False)
    flops: int = field(init=False)
    other_ops: int = field(init=False)
    grouped_flops: int = field(init=False)

    def __post_init__(self):
        self.params = sum(r.params for r in self.rows)
        self.flops = sum(r.flops for r in self.rows)
        self.other_ops = sum(r.other_ops for r in self.rows)
        self.grouped_flops = sum(r.flops for r in self.rows if r.grouped)

    def to_dict(self) -> dict:
        d = {
            "params": self.params,
            "flops": self.flops,
            "other_ops": self.other_ops,
            "grouped_flops": self.grouped_flops,
            "input_dims": list(self.input_dims),
            "per_layer": [asdict(r) for r in self.rows],
        }
        if self.forward_time_ms is not None:
            d["forward_time_ms"] = self.forward_time_ms
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        head = ("layer", "c_in", "c_out", "g", "n*k", "params", "flops", "other_ops")
        body = [(r.name, r.c_in, r.c_out, r.g, r.n * r.k, r.params, r.flops, r.other_ops)
                for r in self.rows]
        body.append(("TOTAL", "", "", "", "", self.params, self.flops, self.other_ops))
        cells = [tuple(str(v) for v in row) for row in [head] + body]
        widths = [max(len(row[i]) for row in cells) for i in range(len(head))]
        lines = []
        for j, row in enumerate(cells):
            lines.append("  ".join(v.ljust(widths[i]) if i == 0 else v.rjust(widths[i])
                                   for i, v in enumerate(row)))
            if j == 0 or j == len(cells) - 2:
                lines.append("  ".join("-" * w for w in widths))
        lines.append(f"grouped-layer flops: {self.grouped_flops}")
        if self.forward_time_ms is not None:
            t = self.forward_time_ms
            lines.append(f"forward time: median {t['median']:.3f} ms, IQR {t['iqr']:.3f} ms "
                         f"over {t['trials']} trials")
        return "\n".join(lines)


def _row(name, c_in, c_out, g, n, k, with_bn, with_act, grouped) -> LayerCost:
    w = layer_params(c_in, c_out, g)
    bn = 2 * c_out if with_bn else 0
    positions = n * k * c_out
    other = positions * (1 + (2 if with_bn else 0) + (1 if with_act else 0))
    return LayerCost(name, c_in, c_out, g, n, k, w, c_out, bn, w + c_out + bn,
                     layer_flops(n, k, c_in, c_out, g), other, grouped)


def model_complexity(model, input_dims: tuple[int, int] = (256, 3), kind: str | None = None,
                     ) -> ComplexityReport:
    """Per-layer analytic cost of a model (or a ModelConfig plus ``kind``).

    ``input_dims`` is ``(N, F)`` for a single cloud; FLOPs are per cloud.
    """
    if isinstance(model, PointModel):
        cfg, kind = model.cfg, model.kind
    elif isinstance(model, ModelConfig):
        cfg, kind = model, kind or "classifier"
    else:
        raise TypeError(f"expected a model or ModelConfig, got {type(model).__name__}")
    n, f = input_dims
    if f != cfg.in_channels:
        raise ConfigurationError(f"input has {f} channels, model expects {cfg.in_channels}")
    rows: list[LayerCost] = []
    c = cfg.in_channels
    level_n = [n]
    skip_c = [cfg.in_channels]
    incoming = n
    for s, st in enumerate(cfg.stages):
        sgc = st.sgc
        if st.n_out > incoming or st.k >= incoming:
            raise ConfigurationError(f"stage {s} does not fit {incoming} incoming points")
        c0 = c * sgc.edge_variant.multiplier
        c_in = sgc.first_layer_in(c0)
        for i, w in enumerate(sgc.mlp_widths):
            try:
                rows.append(_row(f"stage{s}.layer{i}", c_in, w, sgc.g, st.n_out, st.k,
                                 sgc.with_bn, sgc.with_activation, True))
            except ConfigurationError as exc:
                raise ConfigurationError(f"stage{s}.layer{i}: {exc}") from None
            c_in = w
        pool = st.n_out * (st.k - 1) * c_in
        rows.append(LayerCost(f"stage{s}.pool", c_in, c_in, 1, st.n_out, st.k, 0, 0, 0, 0, 0,
                              pool, False))
        level_n.append(st.n_out)
        skip_c.append(c_in)
        c = 3 + c_in
        incoming = st.n_out
    last_c = skip_c[-1]
    if kind == "classifier":
        rows.append(LayerCost("global.pool", last_c, last_c, 1, 1, 1, 0, 0, 0, 0, 0,
                              (level_n[-1] - 1) * last_c, False))
        c_in = last_c
        for i, w in enumerate(cfg.head_widths):
            rows.append(_row(f"head.fc{i}", c_in, w, 1, 1, 1, True, True, False))
            c_in = w
        rows.append(_row("head.out", c_in, cfg.n_classes, 1, 1, 1, False, False, False))
    elif kind == "segmenter":
        c_in = last_c
        for i, widths in enumerate(cfg.seg_up_widths):
            level = len(cfg.stages) - 1 - i
            npts = level_n[level]
            q = min(3, level_n[level + 1])
            rows.append(LayerCost(f"up{i}.interp", c_in, c_in, 1, npts, q, 0, 0, 0, 0, 0,
                                  npts * q * c_in, False))
            c_in += skip_c[level]
            for j, w in enumerate(widths):
                rows.append(_row(f"up{i}.fc{j}", c_in, w, 1, npts, 1, True, True, False))
                c_in = w
        rows.append(_row("seg.out", c_in, cfg.n_classes, 1, n, 1, False, False, False))
    else:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    return ComplexityReport(rows, (n, f))


def sweep_groups(cfg: ModelConfig, groups, input_dims=(256, 3), kind: str = "classifier"):
    """Reports for the same architecture with every stage using each group count."""
    out = []
    for g in groups:
        try:
            cfg_g = cfg.with_groups(int(g))
        except ConfigurationError as exc:
            raise ConfigurationError(f"g={g}: {exc}") from None
        out.append((int(g), model_complexity(cfg_g, input_dims, kind)))
    return out


@dataclass
class TimingSummary:
    samples_ms: list[float]
    median: float
    iqr: float

    @property
    def trials(self) -> int:
        return len(self.samples_ms)

    def to_dict(self) -> dict:
        return {"median": self.median, "iqr": self.iqr, "trials": self.trials,
                "samples": self.samples_ms}


def measure_forward_time(model: PointModel, cloud, trials: int = 10, warmup: int = 2) -> TimingSummary:
    """Wall-clock eval-mode forward time per pass, warmup discarded.

    The numbers depend on the machine and its load; compare them only within
    one environment.
    """
    if trials < 3:
        raise ValueError("need at least 3 timing trials")
    samples = []
    with no_grad():
        for i in range(warmup + trials):
            t0 = time.perf_counter_ns()
            model(cloud, training=False)
            dt = (time.perf_counter_ns() - t0) / 1e6
            if i >= warmup:
                samples.append(dt)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return TimingSummary(samples, float(med), float(q3 - q1))
