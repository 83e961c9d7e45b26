import numpy as np
import pytest

from shufflepoint import tensor as T
from shufflepoint.errors import ConfigurationError, DimensionError
from shufflepoint.geometry import PointCloud, normalize_unit_sphere
from shufflepoint.model import (ModelConfig, build_classifier, build_model,
                                build_segmenter, default_config, forward)
from shufflepoint.tensor import Tensor, finite_difference_check


def census(cfg, kind):
    """Learnable scalars counted from the config alone."""
    total = 0
    c = cfg.in_channels
    outs = []
    for st in cfg.stages:
        c_in = c * st.sgc.edge_variant.multiplier * st.sgc.g
        for w in st.sgc.mlp_widths:
            total += c_in * w // st.sgc.g + w + 2 * w
            c_in = w
        outs.append(c_in)
        c = 3 + c_in
    if kind == "classifier":
        c_in = outs[-1]
        for w in cfg.head_widths:
            total += c_in * w + 3 * w
            c_in = w
        total += c_in * cfg.n_classes + cfg.n_classes
    else:
        skips = [cfg.in_channels] + outs[:-1]
        c_in = outs[-1]
        for i, widths in enumerate(cfg.seg_up_widths):
            c_in += skips[len(cfg.stages) - 1 - i]
            for w in widths:
                total += c_in * w + 3 * w
                c_in = w
        total += c_in * cfg.n_classes + cfg.n_classes
    return total


def tie_free_cloud(n, seed):
    return normalize_unit_sphere(np.random.default_rng(seed).normal(size=(n, 3)))


# -- configuration ------------------------------------------------------------


def test_default_config_matches_desk_layout():
    cfg = default_config()
    s1, s2 = cfg.stages
    assert (s1.n_out, s1.k, s1.sgc.mlp_widths, s1.sgc.g) == (128, 16, (32, 32, 64), 2)
    assert (s2.n_out, s2.k, s2.sgc.mlp_widths) == (32, 8, (64, 128))
    assert cfg.head_widths == (128, 64) and cfg.dropout_rate == 0.5


def test_default_config_scales_to_small_clouds():
    cfg = default_config(n_points=32)
    assert [(s.n_out, s.k) for s in cfg.stages] == [(16, 16), (4, 8)]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(stages=(), n_classes=4).validate()
    with pytest.raises(ConfigurationError):
        default_config(n_classes=1).validate()
    with pytest.raises(ConfigurationError):
        default_config().with_groups(3)


def test_config_json_round_trip():
    cfg = default_config(n_classes=7, g=4, edge_variant="c", neighbor="radius")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_json() == ModelConfig.from_dict(cfg.to_dict()).to_json()


def test_stage_that_does_not_fit_is_rejected():
    m = build_classifier(default_config())
    with pytest.raises(ConfigurationError, match="stage 0"):
        m(np.zeros((1, 64, 3)))


# -- construction ---------------------------------------------------------------


@pytest.mark.parametrize("g", [1, 2, 4, 8])
@pytest.mark.parametrize("kind", ["classifier", "segmenter"])
def test_parameter_census(kind, g):
    cfg = default_config(g=g, edge_variant="c")
    m = build_model(kind, cfg)
    assert m.n_parameters() == census(cfg, kind)
    assert m.n_parameters() == sum(p.data.size for p in m.parameters().values())


def test_same_seed_same_weights():
    a, b = build_classifier(default_config(), 3), build_classifier(default_config(), 3)
    c = build_classifier(default_config(), 4)
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()
    assert any(not np.array_equal(v, c.state_dict()[k]) for k, v in a.state_dict().items())


def test_state_dict_mismatch():
    m = build_classifier(default_config())
    state = m.state_dict()
    state.pop("head.out.bias")
    with pytest.raises(ConfigurationError, match="head.out.bias"):
        m.load_state_dict(state)


# -- forward ------------------------------------------------------------------


def test_classifier_forward_shape_and_finite(rng):
    m = build_classifier(default_config(n_classes=6))
    logits = forward(m, PointCloud(rng.normal(size=(256, 3))))
    assert logits.shape == (1, 6) and np.isfinite(logits.data).all()


def test_activations_finite_on_normalized_input():
    m = build_segmenter(default_config())
    trace = {}
    out = m(tie_free_cloud(256, 0), trace=trace)
    assert np.isfinite(out.data).all()
    assert all(np.isfinite(trace[k][0].data).all() for k in ("interp0", "interp1"))


def test_eval_forward_bit_identical_and_unit_scale_noop(rng):
    m = build_classifier(default_config())
    x = tie_free_cloud(256, 1)
    a = forward(m, x).data
    assert np.array_equal(a, forward(m, x).data)
    assert np.array_equal(a, forward(m, x * 1.0).data)


def test_training_forward_needs_seed(rng):
    m = build_classifier(default_config())
    with pytest.raises(ValueError):
        forward(m, rng.normal(size=(256, 3)), training=True)
    x = rng.normal(size=(2, 256, 3))
    a = forward(m, x, training=True, seed=5).data
    assert np.array_equal(a, forward(m, x, training=True, seed=5).data)


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        build_classifier(default_config())(np.zeros((1, 256, 4)))


def test_extra_channels_supported(rng):
    m = build_classifier(default_config(in_channels=6))
    x = np.concatenate([tie_free_cloud(256, 2), rng.normal(size=(256, 3))], axis=1)
    assert m(x).shape == (1, 4)


def test_classifier_permutation_invariant():
    m = build_classifier(default_config())
    x = tie_free_cloud(256, 3)
    ref = m(x).data
    for s in range(3):
        perm = np.random.default_rng(s).permutation(256)
        assert np.array_equal(m(x[perm]).data, ref)


def test_segmenter_permutation_equivariant():
    m = build_segmenter(default_config(n_classes=5, n_points=64))
    x = tie_free_cloud(64, 4)
    ref = m(x).data[0]
    perm = np.random.default_rng(0).permutation(64)
    np.testing.assert_array_equal(m(x[perm]).data[0], ref[perm])


def test_segmenter_output_shape(rng):
    for n in (64, 256):
        m = build_segmenter(default_config(n_classes=9, n_points=n))
        assert m(rng.normal(size=(2, n, 3))).shape == (2, n, 9)


def test_segmenter_skip_rows_exact_at_retained_points():
    m = build_segmenter(default_config())
    trace = {}
    m(tie_free_cloud(256, 5), trace=trace)
    f, coarse, fine = trace["interp0"]
    # coarse points are a subset of the fine level; those rows copy the coarse feature
    coarse_feats = m.encode(np.asarray(tie_free_cloud(256, 5))[None], False)[-1][1].data
    for j, p in enumerate(coarse[0]):
        i = np.flatnonzero((fine[0] == p).all(axis=1))[0]
        np.testing.assert_array_equal(f.data[0, i], coarse_feats[0, j])


@pytest.mark.parametrize("variant", ["a", "b", "c"])
@pytest.mark.parametrize("neighbor", ["knn", "radius"])
def test_variants_and_neighbor_modes_run(rng, variant, neighbor):
    m = build_classifier(default_config(edge_variant=variant, neighbor=neighbor))
    assert np.isfinite(m(rng.normal(size=(2, 256, 3)) * 0.4).data).all()


def test_first_layer_gradient_on_32_points(rng):
    m = build_classifier(default_config(n_points=32))
    x = rng.normal(size=(3, 32, 3))
    labels = np.array([0, 1, 2])
    layer = m.units[0].layers[0]

    def fn(t):
        saved = layer.weight
        layer.weight = t
        try:
            out = m(x, training=True, rng=np.random.default_rng(1))
            return T.softmax_cross_entropy(out, labels)
        finally:
            layer.weight = saved

    assert finite_difference_check(fn, Tensor(layer.weight.data.copy())) < 1e-4


def test_astype_float32_round_trip(rng):
    m = build_classifier(default_config())
    x = rng.normal(size=(1, 256, 3))
    ref = m(x).data
    m.astype("float32")
    assert m(x).data.dtype == np.float32
    np.testing.assert_allclose(m(x).data, ref, rtol=1e-3, atol=1e-4)
