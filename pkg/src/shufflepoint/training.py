"""Optimizer, schedules, metrics, synthetic data and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, TrainingError
from .geometry import AugmentParams, PointCloud, augment_batch, normalize_unit_sphere
from .model import PointModel
from .rng import stream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleConfig:
    lr0: float = 0.001
    lr_decay: float = 0.7
    lr_period: int = 20
    lr_floor: float = 1e-5
    bn_m0: float = 0.9
    bn_decay: float = 0.5
    bn_period: int = 20
    bn_cap: float = 0.99

    def __post_init__(self):
        for name in ("lr_decay", "bn_m0", "bn_decay", "bn_cap"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InputError(f"{name} must lie in (0, 1), got {v}")
        if self.lr0 < 0 or self.lr_floor < 0:
            raise InputError("learning rates must be non-negative")
        if self.lr_period < 1 or self.bn_period < 1:
            raise InputError("schedule periods must be positive")


def lr_schedule(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Step decay by ``lr_decay`` every ``lr_period`` epochs, floored at ``lr_floor``."""
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    return max(cfg.lr_floor, cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_period))


def bn_momentum_schedule(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Momentum whose gap to 1 shrinks by ``bn_decay`` every ``bn_period`` epochs, capped."""
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    return min(cfg.bn_cap, 1.0 - (1.0 - cfg.bn_m0) * cfg.bn_decay ** (epoch // cfg.bn_period))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    base_lr: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update of ``params`` in place.

    Missing gradients count as zero.  Every gradient is checked for finiteness
    before any parameter changes.
    """
    lr = state.base_lr if lr is None else lr
    if lr < 0:
        raise InputError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise InputError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricSet:
    overall_accuracy: float = float("nan")
    mean_class_accuracy: float = float("nan")
    miou: float = float("nan")
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x
        return {"overall_accuracy": clean(self.overall_accuracy),
                "mean_class_accuracy": clean(self.mean_class_accuracy),
                "miou": clean(self.miou), "per_class": self.per_class}


def classification_metrics(pred, true, n_classes: int | None = None) -> MetricSet:
    """Overall accuracy and the mean of per-class accuracies (classes present in ``true``)."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise InputError("prediction and truth lengths differ")
    n_classes = int(max(pred.max(initial=0), true.max(initial=0)) + 1) if n_classes is None else n_classes
    rows = []
    accs = []
    for c in range(n_classes):
        mask = true == c
        if mask.any():
            acc = float((pred[mask] == c).mean())
            accs.append(acc)
            rows.append({"class": c, "count": int(mask.sum()), "accuracy": acc})
    return MetricSet(float((pred == true).mean()) if true.size else float("nan"),
                     float(np.mean(accs)) if accs else float("nan"), per_class=rows)


def shape_iou(pred, true, parts) -> float:
    """Mean IoU over a shape's part labels; a part absent from both counts as 1."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    parts = list(parts)
    allowed = set(parts)
    bad = (set(np.unique(true).tolist()) | set(np.unique(pred).tolist())) - allowed
    if bad:
        raise InputError(f"labels {sorted(bad)} are outside the category's part set {sorted(allowed)}")
    ious = []
    for part in parts:
        p, t = pred == part, true == part
        union = np.count_nonzero(p | t)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & t) / union)
    return float(np.mean(ious))


def compute_miou(pred_labels, true_labels, shape_category, part_sets) -> MetricSet:
    """Per-shape part IoU averaged over shapes.

    Accepts one shape (label arrays and a category) or sequences of them.
    ``per_class`` holds the mean shape IoU per category.
    """
    if np.ndim(shape_category) == 0:
        pred_labels, true_labels, shape_category = [pred_labels], [true_labels], [shape_category]
    if not (len(pred_labels) == len(true_labels) == len(shape_category)):
        raise InputError("pred, truth and category counts differ")
    per_shape = [shape_iou(p, t, part_sets[c])
                 for p, t, c in zip(pred_labels, true_labels, shape_category)]
    cats = np.asarray([int(c) for c in shape_category])
    scores = np.asarray(per_shape)
    rows = [{"category": int(c), "shapes": int((cats == c).sum()),
             "miou": float(scores[cats == c].mean())} for c in sorted(set(cats.tolist()))]
    return MetricSet(miou=float(scores.mean()) if scores.size else float("nan"), per_class=rows)


# ---------------------------------------------------------------------------
# data


@dataclass
class CloudDataset:
    """Equal-size clouds ``(n, N, F)`` with per-cloud labels and optional part labels."""

    points: np.ndarray
    labels: np.ndarray
    part_labels: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    part_sets: dict[int, tuple[int, ...]] | None = None

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    @property
    def n_parts(self) -> int:
        if self.part_sets:
            return max(max(p) for p in self.part_sets.values()) + 1
        return int(self.part_labels.max()) + 1

    def subset(self, idx) -> "CloudDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return CloudDataset(self.points[idx], self.labels[idx],
                            None if self.part_labels is None else self.part_labels[idx],
                            self.class_names, self.part_sets)

    def clouds(self, per_point: bool = False) -> list[PointCloud]:
        if per_point:
            return [PointCloud(p, l) for p, l in zip(self.points, self.part_labels)]
        return [PointCloud(p, int(l)) for p, l in zip(self.points, self.labels)]

    @classmethod
    def from_clouds(cls, clouds: list[PointCloud], n_points: int | None = None,
                    seed: int = 42) -> "CloudDataset":
        """Stack clouds, resampling each to ``n_points`` when sizes differ."""
        if not clouds:
            raise InputError("empty dataset")
        n_points = n_points or clouds[0].n_points
        rng = stream(seed, "split")
        pts, labels, parts = [], [], []
        per_point = clouds[0].label_mode == "point"
        for c in clouds:
            if c.label_mode == "none":
                raise InputError("dataset clouds need labels")
            if c.n_points == n_points:
                sel = np.arange(n_points)
            else:
                sel = np.sort(rng.choice(c.n_points, n_points, replace=c.n_points < n_points))
            pts.append(normalize_unit_sphere(c.data[sel]))
            if per_point:
                parts.append(c.labels[sel])
                labels.append(0)
            else:
                labels.append(c.labels)
        part_labels = np.stack(parts) if per_point else None
        return cls(np.stack(pts), np.asarray(labels, dtype=np.int64), part_labels)


SYNTH_CLASSES = ("sphere", "cube", "plane", "torus")
SYNTH_PART_SETS = {0: (0, 1), 1: (2, 3, 4), 2: (5, 6), 3: (7, 8)}


def _unit_vectors(rng, n):
    u = rng.normal(size=(n, 3))
    return u / np.sqrt((u * u).sum(axis=1, keepdims=True))


def _sphere(rng, n):
    """Antipodal pairs (plus a zero-sum triple when ``n`` is odd): the centroid is 0."""
    half = n // 2 if n % 2 == 0 else (n - 3) // 2
    u = _unit_vectors(rng, half)
    pts = [u, -u]
    if n % 2:
        a, b = _unit_vectors(rng, 2)
        e1 = a
        e2 = b - (b @ e1) * e1
        e2 /= np.sqrt(e2 @ e2)
        ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(0, 2 * np.pi)
        pts.append(np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    xyz = np.concatenate(pts)
    return xyz, (xyz[:, 2] < 0).astype(np.int64)


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    axis = face // 2
    xyz = rng.uniform(-1.0, 1.0, size=(n, 3))
    xyz[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return xyz, 2 + axis


def _plane(rng, n):
    a = rng.uniform(0.5, 1.0)
    xyz = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-a, a, n), np.zeros(n)])
    return xyz, np.where(xyz[:, 0] < 0, 5, 6)


def _torus(rng, n):
    big, small = 1.0, rng.uniform(0.2, 0.4)
    u = np.empty(0)
    v = np.empty(0)
    # rejection sampling of the tube angle gives area-uniform points
    while u.size < n:
        cu = rng.uniform(0, 2 * np.pi, 2 * n)
        cv = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(cv)
        u = np.concatenate([u, cu[keep]])
        v = np.concatenate([v, cv[keep]])
    u, v = u[:n], v[:n]
    ring = big + small * np.cos(v)
    xyz = np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])
    return xyz, np.where(ring < big, 7, 8)


_GENERATORS = (_sphere, _cube, _plane, _torus)


def synth_dataset(n_per_class: int, n_points: int = 256, seed: int = 42) -> CloudDataset:
    """Sphere, cube, plane-patch and torus surfaces with per-point part labels.

    Each instance gets a random rotation about z and is normalized to the unit
    sphere.  Clouds are interleaved by class; the result depends only on the
    arguments.
    """
    if n_points < 32:
        raise InputError(f"n_points must be >= 32, got {n_points}")
    if n_per_class < 1:
        raise InputError("n_per_class must be positive")
    rng = stream(seed, "synth")
    pts = np.empty((n_per_class * 4, n_points, 3))
    labels = np.empty(n_per_class * 4, dtype=np.int64)
    parts = np.empty((n_per_class * 4, n_points), dtype=np.int64)
    i = 0
    for _ in range(n_per_class):
        for c, gen in enumerate(_GENERATORS):
            xyz, part = gen(rng, n_points)
            theta = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                            [np.sin(theta), np.cos(theta), 0.0],
                            [0.0, 0.0, 1.0]])
            pts[i] = normalize_unit_sphere(xyz @ rot.T)
            labels[i] = c
            parts[i] = part
            i += 1
    return CloudDataset(pts, labels, parts, SYNTH_CLASSES, dict(SYNTH_PART_SETS))


def split_dataset(ds: CloudDataset, test_fraction: float = 0.2, seed: int = 42):
    """Stratified split into ``(train, test)`` by per-cloud label."""
    rng = stream(seed, "split")
    train, test = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return ds.subset(np.sort(train)), ds.subset(np.sort(test))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 32
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    task: str = "classification"
    precision: str = "float32"


@dataclass
class TrainResult:
    model: PointModel
    log: list[dict]
    metrics: MetricSet | None = None


def _targets(ds: CloudDataset, idx, task: str) -> np.ndarray:
    if task == "segmentation":
        if ds.part_labels is None:
            raise InputError("segmentation needs per-point part labels")
        return ds.part_labels[idx].reshape(-1)
    return ds.labels[idx]


def _loss(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    if logits.ndim == 3:
        logits = T.reshape(logits, (-1, logits.shape[-1]))
    return T.softmax_cross_entropy(logits, targets)


def predict(model: PointModel, points: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a stack of clouds."""
    outs = []
    with T.no_grad():
        for s in range(0, points.shape[0], batch_size):
            outs.append(model(points[s:s + batch_size], training=False).data)
    return np.concatenate(outs)


def evaluate(model: PointModel, ds: CloudDataset, task: str = "classification",
             batch_size: int = 64) -> MetricSet:
    logits = predict(model, ds.points, batch_size)
    if task == "classification":
        return classification_metrics(logits.argmax(axis=1), ds.labels, model.cfg.n_classes)
    point_metrics = classification_metrics(logits.argmax(axis=-1), ds.part_labels,
                                           model.cfg.n_classes)
    if ds.part_sets:
        preds = []
        for lg, c in zip(logits, ds.labels):
            parts = np.asarray(ds.part_sets[int(c)])
            preds.append(parts[lg[:, parts].argmax(axis=-1)])
        m = compute_miou(preds, list(ds.part_labels), ds.labels, ds.part_sets)
    else:
        parts = tuple(range(model.cfg.n_classes))
        m = compute_miou(list(logits.argmax(axis=-1)), list(ds.part_labels),
                         np.zeros(len(ds), dtype=np.int64), {0: parts})
    m.overall_accuracy = point_metrics.overall_accuracy
    m.mean_class_accuracy = point_metrics.mean_class_accuracy
    return m


def train(model: PointModel, dataset: CloudDataset, epochs: int, cfg: TrainConfig = TrainConfig(),
          seed: int = 42, eval_set: CloudDataset | None = None, on_epoch=None) -> TrainResult:
    """Adam training with step-decayed learning rate and rising BN momentum.

    Everything random (shuffling, augmentation, dropout) comes from named
    streams of ``seed``, so two runs with equal arguments give identical
    parameters and identical logs apart from ``wall_ms``.
    """
    if len(dataset) == 0:
        raise InputError("training set is empty")
    if cfg.batch_size < 1:
        raise InputError("batch size must be positive")
    model.astype(cfg.precision)
    params = model.parameters()
    state = AdamState(base_lr=cfg.schedule.lr0)
    n = len(dataset)
    history = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch - 1, cfg.schedule)
        model.bn_momentum = bn_momentum_schedule(epoch - 1, cfg.schedule)
        order = stream(seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        seen = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            pts = dataset.points[idx]
            if cfg.augment is not None:
                pts = augment_batch(pts, stream(seed, "augment", epoch, b), cfg.augment)
            targets = _targets(dataset, idx, cfg.task)
            logits = model(pts, training=True, rng=stream(seed, "dropout", epoch, b))
            loss = _loss(logits, targets)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged to {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            T.backward(loss)
            try:
                adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += value * targets.size
            pred = logits.data.reshape(-1, logits.shape[-1]).argmax(axis=1)
            correct += int((pred == targets).sum())
            seen += targets.size
        entry = {
            "epoch": epoch,
            "lr": lr,
            "bn_momentum": model.bn_momentum,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "eval_acc": None,
        }
        if eval_set is not None:
            entry["eval_acc"] = evaluate(model, eval_set, cfg.task).overall_accuracy
        entry["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(entry)
        log.info("epoch %d loss %.4f acc %.3f eval %s", epoch, entry["train_loss"],
                 entry["train_acc"], entry["eval_acc"])
        if on_epoch is not None:
            on_epoch(entry)
    metrics = evaluate(model, eval_set, cfg.task) if eval_set is not None else None
    return TrainResult(model, history, metrics)
