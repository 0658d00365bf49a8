import numpy as np
import pytest

from covct.errors import (
    BadMagicError,
    BuilderError,
    CheckpointError,
    ConfigHashError,
    NumericalError,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from covct.nets import (
    CtNetConfig,
    LayerSpec,
    ModelGraph,
    SegConfig,
    build_cov_ctnet,
    build_cov_raseg,
    build_model,
    build_segnet_baseline,
    forward,
    infer_shapes,
    pca_2d,
    run_graph,
    two_stage_predict,
)
from covct.nets.checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from covct.nets.features import extract_features, write_pca_csv


def conv_count(cin, cout, k):
    return cin * cout * k * k + cout


def bn_count(c):
    return 2 * c


def ctnet_count(widths=(16, 32, 64, 128), fc=(128, 64), in_c=1, hw=(82, 82), classes=2):
    """Layer-by-layer tally of the classifier's trainable parameters."""
    total = conv_count(in_c, widths[0], 3) + bn_count(widths[0])
    c = widths[0]
    for wd in widths:
        total += conv_count(c, wd, 3) + bn_count(wd)  # sub-block a
        total += conv_count(wd, wd, 3) + bn_count(wd)  # sub-block b
        if c != wd:
            total += conv_count(c, wd, 1)  # projection skip
        total += conv_count(wd, wd, 3) + bn_count(wd)  # stride-2 conv
        c = wd
    h, w = (-(-v // 32) for v in hw)  # padded to 32, halved four times, then pooled
    feat = c * h * w
    for f in fc:
        total += feat * f + f
        feat = f
    return total + feat * classes + classes


def seg_count(widths=(32, 64, 128, 256), in_c=1, classes=2):
    total, c = 0, in_c
    for wd in widths:
        total += conv_count(c, wd, 3) + bn_count(wd) + conv_count(wd, wd, 3) + bn_count(wd)
        c = wd
    for i in reversed(range(len(widths))):
        wd = widths[i]
        out = widths[i - 1] if i else widths[0]
        total += conv_count(wd, wd, 3) + bn_count(wd) + conv_count(wd, out, 3) + bn_count(out)
    return total + conv_count(widths[0], classes, 2)


# -------------------------------------------------------------- classifier


def test_ctnet_default_output_and_parameter_count():
    model = build_cov_ctnet()
    x = np.random.default_rng(0).random((3, 1, 82, 82))
    out = forward(model, x).data
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-6)
    assert model.parameter_count() == ctnet_count() == 660050


def test_ctnet_layer_inventory():
    model = build_cov_ctnet()
    kinds = [layer.kind for layer in model.layers]
    # stem + 4 x (a, b, down) convs + 3 projections, and three FC layers
    assert kinds.count("conv") == 16
    assert kinds.count("fc") == 3
    assert kinds.count("add") == 4
    assert model.metadata["feature_layer"] == "fc2_relu"


def test_ctnet_other_sizes_and_widths():
    cfg = CtNetConfig(input_hw=(64, 48), widths=(4, 8, 8, 16), fc_widths=(8, 4))
    model = build_cov_ctnet(cfg)
    assert forward(model, np.zeros((2, 1, 64, 48))).shape == (2, 2)
    assert model.parameter_count() == ctnet_count((4, 8, 8, 16), (8, 4), hw=(64, 48))


def test_ctnet_zero_residual_paths_leave_stem_and_downsampling():
    cfg = CtNetConfig(input_hw=(32, 32), widths=(4, 4, 4, 4), fc_widths=(8, 8), dropout=0.0)
    model = build_cov_ctnet(cfg, seed=1)
    for name, t in model.tensors.items():
        if "_a_" in name or "_b_" in name:
            t.data[...] = 0.0
    x1 = np.random.default_rng(1).random((2, 1, 32, 32))
    values = run_graph(model, x1)
    # with every residual body zeroed, each stage's sum is exactly its skip input
    np.testing.assert_array_equal(values["stage0_add"].data, values["stem_relu"].data)
    np.testing.assert_array_equal(values["stage2_add"].data, values["stage1_down_relu"].data)


def test_ctnet_rejects_bad_widths():
    with pytest.raises(BuilderError):
        build_cov_ctnet(CtNetConfig(widths=(8, 8, 8)))


def test_dropout_makes_train_and_eval_differ():
    model = build_cov_ctnet(CtNetConfig(input_hw=(32, 32), widths=(4, 4, 4, 4), dropout=0.5))
    x = np.random.default_rng(2).random((4, 1, 32, 32))
    assert not np.array_equal(forward(model, x, "train", seed=3).data, forward(model, x, "eval").data)
    np.testing.assert_array_equal(forward(model, x, "eval").data, forward(model, x, "eval").data)


# --------------------------------------------------------------- segmenter


def test_raseg_shapes_and_normalization():
    model = build_cov_raseg(SegConfig(input_hw=(64, 64)))
    out = forward(model, np.random.default_rng(3).random((2, 1, 64, 64))).data
    assert out.shape == (2, 2, 64, 64)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-5)
    assert model.parameter_count() == seg_count() == 2355714


def test_encoder_halves_every_stage():
    shapes = infer_shapes(build_cov_raseg(SegConfig(input_hw=(64, 64))))
    assert [shapes[f"enc{i}_fuse"][2] for i in range(4)] == [32, 16, 8, 4]


def test_eval_outputs_do_not_mix_batch_items():
    model = build_cov_raseg(SegConfig(input_hw=(32, 32), widths=(4, 8, 8, 8)), seed=4, precision="f64")
    x = np.random.default_rng(4).random((3, 1, 32, 32))
    whole = forward(model, x, "eval").data
    single = forward(model, x[1:2], "eval").data
    np.testing.assert_allclose(whole[1:2], single, rtol=1e-12)


def test_segnet_baseline_same_contract_different_output():
    cfg = SegConfig(input_hw=(32, 32), widths=(4, 8, 8, 8))
    ra, sn = build_cov_raseg(cfg, seed=5), build_segnet_baseline(cfg, seed=5)
    assert ra.parameter_count() == sn.parameter_count()
    x = np.random.default_rng(5).random((2, 1, 32, 32))
    a, b = forward(ra, x).data, forward(sn, x).data
    assert a.shape == b.shape
    assert not np.allclose(a, b)
    assert not any(layer.kind in ("avgpool", "avgunpool") for layer in sn.layers)


def test_max_only_fusion_reproduces_baseline_exactly():
    cfg = SegConfig(input_hw=(32, 32), widths=(4, 8, 8, 8), max_branch_weight=1.0)
    ra, sn = build_cov_raseg(cfg, seed=6), build_segnet_baseline(cfg, seed=7)
    assert list(ra.tensors) == list(sn.tensors)
    for name, t in ra.tensors.items():
        sn.tensors[name].data = t.data.copy()
    x = np.random.default_rng(6).random((2, 1, 32, 32))
    np.testing.assert_array_equal(forward(ra, x).data, forward(sn, x).data)


def test_segmenter_rejects_sizes_not_divisible_by_16():
    with pytest.raises(BuilderError):
        build_cov_raseg(SegConfig(input_hw=(40, 40)))


def test_every_unpool_is_linked_once():
    model = build_cov_raseg(SegConfig(input_hw=(32, 32)))
    links = [layer.attrs["link"] for layer in model.layers if layer.kind == "maxunpool"]
    pools = [layer.name for layer in model.layers if layer.kind == "maxpool"]
    assert sorted(links) == sorted(pools)


def test_infer_shapes_rejects_bad_links():
    base = build_cov_raseg(SegConfig(input_hw=(16, 16), widths=(2, 2, 2, 2)))
    layers = [LayerSpec(s.kind, s.name, s.inputs, dict(s.attrs)) for s in base.layers]
    for s in layers:
        if s.name == "dec0_maxunpool":
            s.attrs["link"] = "enc3_maxpool"  # shape mismatch and double link
    with pytest.raises(BuilderError):
        infer_shapes(ModelGraph(layers, base.tensors, base.config))
    layers[1] = LayerSpec("relu", layers[1].name, ("nowhere",))
    with pytest.raises(BuilderError, match="not an earlier layer"):
        infer_shapes(ModelGraph(layers, base.tensors, base.config))


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(ShapeError):
        forward(build_cov_raseg(SegConfig(input_hw=(16, 16))), np.zeros((1, 1, 32, 32)))


def test_forward_names_the_layer_producing_nan():
    model = build_cov_raseg(SegConfig(input_hw=(16, 16), widths=(2, 2, 2, 2)))
    model.tensors["enc1_b_conv.weight"].data[...] = np.nan
    with pytest.raises(NumericalError, match="enc1_b_conv"):
        forward(model, np.ones((2, 1, 16, 16)))


def test_parameter_count_is_pure_function_of_config():
    cfg = SegConfig(input_hw=(32, 32), widths=(3, 5, 7, 9))
    assert build_cov_raseg(cfg, seed=1).parameter_count() == build_cov_raseg(cfg, seed=2).parameter_count()
    assert build_cov_raseg(cfg).parameter_count() == seg_count((3, 5, 7, 9))


# -------------------------------------------------------------- checkpoint


@pytest.fixture
def small_models():
    return [
        build_cov_ctnet(CtNetConfig(input_hw=(32, 32), widths=(2, 4, 4, 4), fc_widths=(4,)), seed=1),
        build_cov_raseg(SegConfig(input_hw=(16, 16), widths=(2, 3, 4, 5)), seed=2),
        build_segnet_baseline(SegConfig(input_hw=(16, 16), widths=(2, 3, 4, 5)), seed=3),
    ]


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, small_models):
    for m in small_models:
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(m, p1, meta={"seed": 1})
        loaded = load_checkpoint(p1, expect=m)
        for name, t in m.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name].data, t.data)
        save_checkpoint(loaded, p2, meta={"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejections(small_models):
    m = small_models[1]
    blob = dumps_checkpoint(m)
    with pytest.raises(BadMagicError):
        loads_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatchError):
        loads_checkpoint(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(TruncatedCheckpointError):
        loads_checkpoint(blob[:-3])
    with pytest.raises(TruncatedCheckpointError):
        loads_checkpoint(blob[:20])
    with pytest.raises(CheckpointError):
        loads_checkpoint(blob + b"\0\0\0\0")
    with pytest.raises(ConfigHashError):
        loads_checkpoint(blob, expect=small_models[2])


def test_distinct_error_kinds():
    kinds = {e.kind for e in (BadMagicError, VersionMismatchError, TruncatedCheckpointError, ConfigHashError)}
    assert len(kinds) == 4


def test_build_model_dispatch(small_models):
    for m in small_models:
        rebuilt = build_model(m.config)
        assert rebuilt.arch == m.arch and rebuilt.config_hash == m.config_hash
    with pytest.raises(BuilderError):
        build_model({"arch": "unknown"})


def test_checkpoint_loads_at_f64(small_models):
    m = load_checkpoint_from_blob(small_models[0], precision="f64")
    assert m.dtype == np.float64


def load_checkpoint_from_blob(model, precision):
    return loads_checkpoint(dumps_checkpoint(model), precision=precision)


# ---------------------------------------------------------------- features


def test_pca_collinear_points_explain_everything():
    t = np.linspace(-1, 1, 7)[:, None]
    feats = t * np.array([[1.0, 2.0, -1.0]]) + np.array([3.0, 0.0, 1.0])
    res = pca_2d(feats)
    assert res.explained_variance_ratio[0] == pytest.approx(1.0)


def test_pca_matches_eigendecomposition_oracle():
    f = np.random.default_rng(8).standard_normal((10, 4))
    res = pca_2d(f)
    centred = f - f.mean(axis=0)
    cov = centred.T @ centred / (len(f) - 1)
    vals, vecs = np.linalg.eig(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order].real, vecs[:, order].real
    assert res.eigenvalues.sum() == pytest.approx(np.trace(cov))
    np.testing.assert_allclose(res.eigenvalues, vals, rtol=1e-10)
    for k in range(2):
        v = vecs[:, k] * np.sign(vecs[np.argmax(np.abs(vecs[:, k])), k])
        np.testing.assert_allclose(res.projection[:, k], centred @ v, atol=1e-10)


def test_pca_needs_three_samples():
    with pytest.raises(ShapeError):
        pca_2d(np.zeros((2, 4)))


def test_extract_features_and_csv(tmp_path):
    model = build_cov_ctnet(CtNetConfig(input_hw=(32, 32), widths=(2, 2, 2, 2), fc_widths=(6, 5)))
    x = np.random.default_rng(9).random((5, 1, 32, 32))
    feats, pca = extract_features(model, x)
    assert feats.shape == (5, 5)
    path = write_pca_csv(tmp_path / "f.csv", list("abcde"), ["healthy"] * 5, pca.projection)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,label,pc1,pc2" and len(lines) == 6


# ----------------------------------------------------------------- predict


class _Spy:
    """Stands in for a segmenter that must not be touched."""

    def __getattr__(self, name):
        raise AssertionError("segmenter was invoked")


def _classifier_with_bias(p_infected):
    model = build_cov_ctnet(CtNetConfig(input_hw=(32, 32), widths=(2, 2, 2, 2), fc_widths=(4,), dropout=0.0))
    model.tensors["classifier.weight"].data[...] = 0.0
    logit = np.log(p_infected) - np.log1p(-p_infected) if 0 < p_infected < 1 else (-50.0 if p_infected == 0 else 50.0)
    model.tensors["classifier.bias"].data[...] = [0.0, logit]
    return model


def test_two_stage_healthy_skips_segmenter():
    pred = two_stage_predict(_classifier_with_bias(0.0), _Spy(), np.random.default_rng(0).random((40, 36)))
    assert pred.label == "healthy" and pred.mask.shape == (40, 36) and not pred.mask.any()


def test_two_stage_infected_returns_segmenter_argmax():
    seg = build_cov_raseg(SegConfig(input_hw=(16, 16), widths=(2, 2, 2, 2)), seed=3)
    img = np.random.default_rng(1).random((16, 16))
    pred = two_stage_predict(_classifier_with_bias(1.0), seg, img)
    assert pred.label == "infected"
    expected = forward(seg, ((img - img.min()) / np.ptp(img))[None, None].astype(np.float32)).data[0].argmax(0)
    np.testing.assert_array_equal(pred.mask, expected)


def test_two_stage_threshold_tie_routes_to_infected():
    seg = build_cov_raseg(SegConfig(input_hw=(16, 16), widths=(2, 2, 2, 2)))
    pred = two_stage_predict(_classifier_with_bias(0.5), seg, np.random.default_rng(2).random((16, 16)))
    assert pred.p_infected == 0.5
    assert pred.label == "infected"
