"""One test per acceptance criterion, each timed against its runtime budget.

Every test records a row in ``conftest.ACCEPTANCE_ROWS``; the terminal summary prints one
PASS/FAIL line per criterion.
"""
import time
from contextlib import contextmanager

import numpy as np
from scipy.spatial.distance import cdist

from conftest import ACCEPTANCE_ROWS
from shufflepoint import tensor as T
from shufflepoint.complexity import layer_flops, layer_params, sweep_groups
from shufflepoint.geometry import (PointCloud, farthest_point_sample, knn_search,
                                   normalize_unit_sphere)
from shufflepoint.io import (decode_checkpoint, encode_checkpoint, load_checkpoint,
                             read_binary_cloud, save_checkpoint, write_binary_cloud)
from shufflepoint.model import build_classifier, default_config
from shufflepoint.sgc import GroupConvLayer, SgcUnitConfig, SGCUnit, channel_shuffle
from shufflepoint.tensor import Tensor
from shufflepoint.training import (TrainConfig, bn_momentum_schedule,
                                   compute_miou, lr_schedule, shape_iou, split_dataset,
                                   synth_dataset, train)
from shufflepoint.verify import format_results, run_gradcheck

POW2 = [16, 32, 64, 128, 256]


@contextmanager
def criterion(name, budget_s):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        secs = time.perf_counter() - t0
        passed = ok and secs < budget_s
        ACCEPTANCE_ROWS.append((name, passed, secs))
        print(f"{'PASS' if passed else 'FAIL'}  AC{name}  ({secs:.2f}s, budget {budget_s}s)")
    assert secs < budget_s, f"AC{name} took {secs:.1f}s, budget {budget_s}s"


def knn_reference(xyz, k):
    """Neighbor order from scipy distances, ties broken by index via a stable sort."""
    d = cdist(xyz, xyz, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def fps_step_ok(xyz, picks):
    d = ((xyz[:, None] - xyz[None]) ** 2).sum(-1)
    for i in range(1, len(picks)):
        mind = d[:, picks[:i]].min(axis=1)
        mind[picks[:i]] = -1
        if mind[picks[i]] != mind.max():
            return False
    return True


def miou_reference(preds, trues, cats, part_sets):
    scores = []
    for p, t, c in zip(preds, trues, cats):
        size = max(part_sets[c]) + 1
        conf = np.bincount(t * size + p, minlength=size * size).reshape(size, size)
        ious = []
        for q in part_sets[c]:
            union = conf[q].sum() + conf[:, q].sum() - conf[q, q]
            ious.append(1.0 if union == 0 else conf[q, q] / union)
        scores.append(np.mean(ious))
    return float(np.mean(scores))


def test_ac01_layer_params_exact():
    with criterion("1 layer_params exactness", 1):
        for c_in in POW2:
            for c_out in POW2:
                for g in (1, 2, 4, 8):
                    p = layer_params(c_in, c_out, g)
                    assert isinstance(p, int) and p * g == c_in * c_out
        assert layer_params(64, 128, 2) == 4096


def test_ac02_layer_flops_exact():
    with criterion("2 layer_flops exactness", 1):
        assert layer_flops(1024, 20, 64, 128, 2) == 83_886_080
        for c_in in POW2:
            for c_out in POW2:
                base = layer_flops(1024, 20, c_in, c_out, 1)
                for g in (2, 4, 8):
                    assert layer_flops(1024, 20, c_in, c_out, g) * g == base


def test_ac03_group_conv_equivalence():
    with criterion("3 group conv equals block-diagonal conv", 10):
        rng = np.random.default_rng(3)
        worst = 0.0
        for i in range(50):
            g = (2, 4, 8)[i % 3]
            c_in, c_out = g * int(rng.integers(1, 9)), g * int(rng.integers(1, 9))
            layer = GroupConvLayer(c_in, c_out, g, rng, with_bn=False, with_activation=False)
            layer.bias.data[:] = rng.normal(size=c_out)
            x = Tensor(rng.normal(size=(2, int(rng.integers(1, 20)), c_in)))
            dense = T.conv1x1(x, Tensor(layer.block_diagonal()), layer.bias).data
            worst = max(worst, np.abs(layer(x).data - dense).max())
        assert worst < 1e-12
        layer = GroupConvLayer(12, 20, 1, rng, with_bn=False, with_activation=False)
        x = Tensor(rng.normal(size=(3, 7, 12)))
        assert np.array_equal(layer(x).data, T.conv1x1(x, Tensor(layer.weight.data[0]), layer.bias).data)


def test_ac04_channel_shuffle_algebra():
    with criterion("4 channel shuffle algebra", 1):
        rng = np.random.default_rng(4)
        for c in (4, 6, 8, 12, 16, 64):
            x = rng.normal(size=(2, 5, c))
            for g in (d for d in range(1, c + 1) if c % d == 0):
                back = channel_shuffle(channel_shuffle(Tensor(x), g), c // g).data
                assert np.array_equal(back, x)
            assert np.array_equal(channel_shuffle(Tensor(x), 1).data, x)
            assert np.array_equal(channel_shuffle(Tensor(x), c).data, x)
        out = channel_shuffle(Tensor(np.arange(6.0)), 2).data
        assert out.tolist() == [0, 3, 1, 4, 2, 5]


def test_ac05_knn_oracle():
    with criterion("5 k-NN oracle agreement", 30):
        rng = np.random.default_rng(5)
        for i in range(100):
            n = int(rng.integers(40, 2001))
            k = int(rng.integers(1, 33))
            if i % 4 == 0:
                # coarse integer grid: many exact distance ties
                xyz = rng.integers(-4, 5, size=(n, 3)).astype(float)
            else:
                xyz = rng.uniform(-1, 1, size=(n, 3))
            ref = knn_reference(xyz, k)
            assert np.array_equal(knn_search(xyz, k, method="brute").indices, ref), (i, n, k)
            assert np.array_equal(knn_search(xyz, k, method="kdtree").indices, ref), (i, n, k)


def test_ac06_fps_oracle():
    with criterion("6 farthest point sampling oracle", 5):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(2, 65))
            xyz = rng.normal(size=(n, 3))
            picks = farthest_point_sample(xyz, int(rng.integers(1, n + 1)))
            assert len(set(picks.tolist())) == len(picks)
            assert fps_step_ok(xyz, picks)
        line = np.zeros((8, 3))
        line[:, 0] = np.arange(8)
        assert set(farthest_point_sample(line, 2).tolist()) == {0, 7}


def test_ac07_gradient_suite():
    with criterion("7 finite-difference gradient suite", 60):
        results = run_gradcheck(seed=0)
        assert any(r.op == "classifier" for r in results)  # the 2-stage model
        assert all(r.passed for r in results), format_results([r for r in results if not r.passed])


def test_ac08_permutation_invariance():
    with criterion("8 permutation invariance", 30):
        model = build_classifier(default_config())
        rng = np.random.default_rng(8)
        x = normalize_unit_sphere(rng.normal(size=(256, 3)))
        ref = model(x).data
        for _ in range(20):
            assert np.array_equal(model(x[rng.permutation(256)]).data, ref)
        unit = SGCUnit(SgcUnitConfig(g=2, mlp_widths=(16, 32)), 6, rng)
        edges = rng.normal(size=(2, 10, 8, 6))
        ref = unit(Tensor(edges)).data
        for _ in range(20):
            assert np.array_equal(unit(Tensor(edges[:, :, rng.permutation(8)])).data, ref)


def test_ac09_schedules():
    with criterion("9 learning-rate and BN-momentum schedules", 1):
        assert lr_schedule(0) == 0.001 and lr_schedule(20) == 0.0007
        lrs = [lr_schedule(e) for e in range(1000)]
        floor_at = lrs.index(1e-5)
        assert all(v == 1e-5 for v in lrs[floor_at:])
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        bns = [bn_momentum_schedule(e) for e in range(1000)]
        assert bns[0] == 0.9 and max(bns) == 0.99 and bns[-1] == 0.99
        assert all(a <= b for a, b in zip(bns, bns[1:]))


def test_ac10_desk_scale_learning():
    with criterion("10 desk-scale learning on the synthetic set", 600):
        ds = synth_dataset(200, 256, seed=42)
        tr, te = split_dataset(ds, 0.2, 42)
        model = build_classifier(default_config(), 42)
        result = train(model, tr, 30, TrainConfig(), seed=42, eval_set=te)
        losses = [e["train_loss"] for e in result.log]
        print(f"held-out OA {result.metrics.overall_accuracy:.4f}, "
              f"loss epoch 1 {losses[0]:.4f}, epoch 10 {losses[9]:.4f}")
        assert result.metrics.overall_accuracy > 0.9
        assert losses[9] < losses[0]


def test_ac11_ablation_directionality():
    with criterion("11 ablation switches", 1800):
        flops = [r.grouped_flops for _, r in sweep_groups(default_config(), [1, 2, 4, 8])]
        assert all(a > b for a, b in zip(flops, flops[1:]))
        ds = synth_dataset(8, 64, seed=11)
        tr, te = split_dataset(ds, 0.25, 11)
        for variant in ("a", "b", "c"):
            for neighbor in ("knn", "radius"):
                cfg = default_config(edge_variant=variant, neighbor=neighbor, n_points=64)
                result = train(build_classifier(cfg, 11), tr, 2, TrainConfig(batch_size=8),
                               seed=11, eval_set=te)
                m = result.metrics
                assert 0.0 <= m.overall_accuracy <= 1.0 and 0.0 <= m.mean_class_accuracy <= 1.0
                assert all(np.isfinite(e["train_loss"]) for e in result.log)


def test_ac12_miou_oracle():
    with criterion("12 mIoU oracle", 5):
        rng = np.random.default_rng(12)
        sets = {0: (0, 1), 1: (2, 3, 4), 2: (5, 6, 7, 8)}
        for _ in range(100):
            cats = rng.integers(0, 3, size=int(rng.integers(1, 6)))
            preds, trues = [], []
            for c in cats:
                n = int(rng.integers(1, 30))
                preds.append(rng.choice(sets[c], size=n))
                trues.append(rng.choice(sets[c], size=n))
            got = compute_miou(preds, trues, cats, sets).miou
            assert abs(got - miou_reference(preds, trues, cats, sets)) < 1e-12
        assert shape_iou(np.zeros(10, int), np.repeat([0, 1], 5), (0, 1)) == 0.25


def test_ac13_determinism_and_formats(tmp_path):
    with criterion("13 determinism and file formats", 120):
        ds = synth_dataset(6, 64, seed=13)
        blobs = []
        for run in ("a", "b"):
            model = build_classifier(default_config(n_points=64), 13)
            train(model, ds, 2, TrainConfig(batch_size=8), seed=13)
            save_checkpoint(tmp_path / f"{run}.spnm", model)
            blobs.append((tmp_path / f"{run}.spnm").read_bytes())
        assert blobs[0] == blobs[1]
        back = load_checkpoint(tmp_path / "a.spnm")
        save_checkpoint(tmp_path / "again.spnm", back)
        assert (tmp_path / "again.spnm").read_bytes() == blobs[0]
        header, tensors = decode_checkpoint(blobs[0])
        assert encode_checkpoint(header, tensors) == blobs[0]
        rng = np.random.default_rng(13)
        for labels in (None, 2, rng.integers(0, 4, size=50)):
            cloud = PointCloud(rng.normal(size=(50, 3)), labels)
            write_binary_cloud(tmp_path / "c.spnc", cloud)
            got = read_binary_cloud(tmp_path / "c.spnc")
            assert got.data.tobytes() == cloud.data.tobytes()
            assert np.array_equal(np.asarray(got.labels), np.asarray(cloud.labels))
