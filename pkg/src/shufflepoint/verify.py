"""Finite-difference gradient checks for every differentiable operation.

Each check reduces an operation's output to a scalar with a fixed random
projection and compares backprop against central differences in float64.
Inputs are drawn away from the ReLU and max-pool kinks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import EdgeVariant, edge_features, interpolation_weights, weighted_gather
from .model import build_classifier, default_config
from .sgc import GroupConvLayer, SgcUnitConfig, SGCUnit, channel_shuffle
from .tensor import Tensor

TOLERANCE = 1e-4
# tensors larger than this are checked at a seeded sample of coordinates
MAX_COORDS = 256


@dataclass
class CheckResult:
    op: str
    wrt: str
    error: float
    worst: tuple
    passed: bool


def _proj(rng, shape):
    r = rng.normal(size=shape)
    return lambda y: T.tsum(T.mul(y, Tensor(r)))


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=1e-3):
    """Values whose pairwise gaps exceed ``gap`` so max-pool winners stay put."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * (10 * gap) + rng.uniform(0, gap, n)).reshape(shape) / n


def _checks(rng) -> list[tuple[str, str, Callable[[Tensor], Tensor], Tensor]]:
    out = []

    def add(op, wrt, fn, x):
        out.append((op, wrt, fn, Tensor(x)))

    # conv1x1
    x = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=(5, 6))
    b = rng.normal(size=6)
    p = _proj(rng, (3, 4, 6))
    add("conv1x1", "input", lambda t: p(T.conv1x1(t, Tensor(w), Tensor(b))), x)
    add("conv1x1", "weight", lambda t: p(T.conv1x1(Tensor(x), t, Tensor(b))), w)
    add("conv1x1", "bias", lambda t: p(T.conv1x1(Tensor(x), Tensor(w), t)), b)

    # grouped conv
    wg = rng.normal(size=(2, 2, 3))
    xg = rng.normal(size=(3, 4, 4))
    pg = _proj(rng, (3, 4, 6))
    add("group_conv1x1", "input", lambda t: pg(T.group_conv1x1(t, Tensor(wg), Tensor(b))), xg)
    add("group_conv1x1", "weight", lambda t: pg(T.group_conv1x1(Tensor(xg), t, Tensor(b))), wg)
    add("group_conv1x1", "bias", lambda t: pg(T.group_conv1x1(Tensor(xg), Tensor(wg), t)), b)

    # relu
    pr = _proj(rng, (4, 5))
    add("relu", "input", lambda t: pr(T.relu(t)), _away_from_zero(rng, (4, 5)))

    # batch norm, training and eval
    xb = rng.normal(size=(3, 4, 5)) * 2 + 1
    gm = rng.uniform(0.5, 1.5, 5)
    bt = rng.normal(size=5)
    pb = _proj(rng, (3, 4, 5))

    def bn(t, gamma, beta, training):
        return T.batch_norm(t, gamma, beta, np.zeros(5), np.ones(5) * 1.5, 0.9, training)

    add("batch_norm", "input(train)", lambda t: pb(bn(t, Tensor(gm), Tensor(bt), True)), xb)
    add("batch_norm", "gamma(train)", lambda t: pb(bn(Tensor(xb), t, Tensor(bt), True)), gm)
    add("batch_norm", "beta(train)", lambda t: pb(bn(Tensor(xb), Tensor(gm), t, True)), bt)
    add("batch_norm", "input(eval)", lambda t: pb(bn(t, Tensor(gm), Tensor(bt), False)), xb)

    # max-pool over neighbors
    pm = _proj(rng, (3, 4))
    add("maxpool_neighbors", "input", lambda t: pm(T.maxpool_neighbors(t)[0]), _distinct(rng, (3, 5, 4)))

    # concat, slice, permute, shuffle
    xa = rng.normal(size=(2, 3, 2))
    xc = rng.normal(size=(2, 3, 4))
    pc = _proj(rng, (2, 3, 6))
    add("concat_channels", "first", lambda t: pc(T.concat_channels(t, Tensor(xc))), xa)
    add("concat_channels", "second", lambda t: pc(T.concat_channels(Tensor(xa), t)), xc)
    ps = _proj(rng, (2, 3, 2))
    add("slice_channels", "input", lambda t: ps(T.slice_channels(t, 1, 3)), xc)
    pp = _proj(rng, (2, 3, 6))
    add("channel_shuffle", "input", lambda t: pp(channel_shuffle(t, 2)),
        rng.normal(size=(2, 3, 6)))

    # softmax cross-entropy
    labels = rng.integers(0, 5, size=4)
    add("softmax_cross_entropy", "logits", lambda t: T.softmax_cross_entropy(t, labels),
        rng.normal(size=(4, 5)))

    # reshape, scale, add, dropout
    pz = _proj(rng, (6, 2))
    add("reshape", "input", lambda t: pz(T.reshape(t, (6, 2))), rng.normal(size=(3, 4)))
    pd = _proj(rng, (3, 4))
    add("dropout", "input",
        lambda t: pd(T.dropout(t, 0.5, np.random.default_rng(7), True)), rng.normal(size=(3, 4)))

    # edge features, all variants
    xe = rng.normal(size=(2, 6, 3))
    centers = np.array([[0, 2, 5], [1, 3, 4]])
    nbrs = rng.integers(0, 6, size=(2, 3, 4))
    for v in EdgeVariant:
        pe = _proj(rng, (2, 3, 4, 3 * v.multiplier))
        add("edge_features", f"variant {v.value}",
            lambda t, v=v, pe=pe: pe(edge_features(t, centers, nbrs, v)), xe)

    # interpolation gather
    coarse = rng.normal(size=(2, 4, 3))
    fine = rng.normal(size=(2, 7, 3))
    idx, wts = interpolation_weights(coarse, fine)
    pw = _proj(rng, (2, 7, 5))
    add("weighted_gather", "coarse features",
        lambda t: pw(weighted_gather(t, idx, wts)), rng.normal(size=(2, 4, 5)))

    # two stacked grouped layers (an SGC unit) with shuffle and max-pool
    cfg = SgcUnitConfig(g=2, mlp_widths=(8, 6), k=5)
    unit = SGCUnit(cfg, 6, np.random.default_rng(3))
    xu = rng.normal(size=(2, 4, 5, 6))
    pu = _proj(rng, (2, 4, 6))
    add("sgc_unit", "edge features", lambda t: pu(unit(t, training=True)), xu)
    for i, layer in enumerate(unit.layers):
        add("sgc_unit", f"layer{i} weight",
            _substituting(layer, lambda: pu(unit(Tensor(xu), training=True))),
            layer.weight.data.copy())
    return out


def _substituting(layer: GroupConvLayer, run: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
    """A function of ``t`` that evaluates ``run`` with ``t`` as the layer's weight."""
    def fn(t):
        saved = layer.weight
        layer.weight = t
        try:
            return run()
        finally:
            layer.weight = saved
    return fn


def model_check(seed: int = 0, n_points: int = 32) -> list[tuple[str, str, Callable, Tensor]]:
    """The desk classifier on small clouds, checked at the first weight of each stage."""
    rng = np.random.default_rng(seed)
    model = build_classifier(default_config(n_points=n_points), seed)
    pts = rng.normal(size=(4, n_points, 3))
    labels = np.array([0, 1, 2, 3])

    def loss():
        logits = model(pts, training=True, rng=np.random.default_rng(11))
        return T.softmax_cross_entropy(logits, labels)

    out = []
    for unit in model.units:
        layer = unit.layers[0]
        out.append(("classifier", f"{layer.name}.weight", _substituting(layer, loss),
                    Tensor(layer.weight.data.copy())))
    return out


def run_gradcheck(seed: int = 0, include_model: bool = True, eps: float = 1e-6,
                  tolerance: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = _checks(rng)
    if include_model:
        checks += model_check(seed)
    results = []
    pick = np.random.default_rng(seed + 1)
    for op, wrt, fn, x in checks:
        coords = None
        if x.data.size > MAX_COORDS:
            coords = pick.choice(x.data.size, MAX_COORDS, replace=False)
        err, worst = T.finite_difference_check(fn, x, eps, return_worst=True, coords=coords)
        results.append(CheckResult(op, wrt, err, tuple(int(i) for i in worst), err < tolerance))
    return results


def format_results(results: list[CheckResult]) -> str:
    w = max(len(f"{r.op} [{r.wrt}]") for r in results)
    lines = []
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        lines.append(f"{tag}  {(r.op + ' [' + r.wrt + ']').ljust(w)}  rel.err {r.error:.2e}"
                     + ("" if r.passed else f"  worst coordinate {r.worst}"))
    return "\n".join(lines)
