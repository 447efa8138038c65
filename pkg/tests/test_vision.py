import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plated.vision import (
    ArraySource, AugmentPolicy, CnnConfig, DecodeError, FeatureTable, ImageSource, TrainConfig,
    augment, bilinear_resize, build_custom_cnn, build_transfer_head, decode_and_preprocess,
    evaluate, flip_horizontal, flip_vertical, load_features, load_model, predict_ingredients,
    rank_labels, read_targets, rotate90, train_ingredient_model, whiten, write_features,
    write_targets,
)


def write_ppm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def naive_bilinear(img, oh, ow):
    h, w, c = img.shape
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, h - 1); fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, w - 1); fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_decode_solid_gray(tmp_path):
    p = tmp_path / "g.ppm"
    write_ppm(p, np.full((200, 200, 3), 128))
    x = decode_and_preprocess(p)
    assert x.shape == (200, 200, 3) and x.dtype == np.float32
    np.testing.assert_allclose(x, 128 / 255, atol=1e-6)


def test_decode_downscale_and_png(tmp_path):
    from PIL import Image

    p = tmp_path / "big.png"
    Image.fromarray(np.zeros((400, 400, 3), np.uint8)).save(p)
    assert decode_and_preprocess(p).shape == (200, 200, 3)


def test_checkerboard_matches_oracle(tmp_path):
    yy, xx = np.mgrid[:37, :53]
    board = (((yy // 3 + xx // 4) % 2) * 255)[..., None].repeat(3, 2)
    p = tmp_path / "c.ppm"
    write_ppm(p, board)
    got = decode_and_preprocess(p, size=20)
    want = naive_bilinear(board / 255.0, 20, 20)
    assert np.max(np.abs(got - want)) <= 1e-3


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 12), ow=st.integers(1, 12),
       seed=st.integers(0, 1000))
def test_bilinear_oracle_property(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 2))
    np.testing.assert_allclose(bilinear_resize(img, oh, ow), naive_bilinear(img, oh, ow), atol=1e-12)


def test_decode_error_names_path(tmp_path):
    p = tmp_path / "junk.jpg"
    p.write_bytes(b"not an image")
    with pytest.raises(DecodeError, match="junk.jpg"):
        decode_and_preprocess(p)


def test_augment_involutions():
    img = np.random.default_rng(0).random((10, 10, 3)).astype(np.float32)
    np.testing.assert_array_equal(flip_horizontal(flip_horizontal(img)), img)
    np.testing.assert_array_equal(flip_vertical(flip_vertical(img)), img)
    out = img
    for _ in range(4):
        out = rotate90(out)
    np.testing.assert_array_equal(out, img)


def test_whiten_moments():
    img = np.random.default_rng(1).random((200, 200, 3)).astype(np.float32)
    w = whiten(img)
    assert abs(w.mean()) < 1e-3 and abs(w.std() - 1) < 1e-3
    flat = whiten(np.full((4, 4, 3), 0.3, np.float32))
    assert np.all(np.isfinite(flat))


def test_augment_shape_and_disabled():
    rng = np.random.default_rng(2)
    img = rng.random((200, 200, 3)).astype(np.float32)
    out = augment(img, AugmentPolicy(), rng)
    assert out.shape == img.shape
    assert augment(img, AugmentPolicy(enabled=False), rng) is img
    with pytest.raises(ValueError):
        AugmentPolicy(crop_fraction=0.5)


def test_cnn_shapes():
    cfg = CnnConfig(blocks=4, labels=5)
    assert cfg.spatial_trace() == [200, 100, 50, 25, 12]
    m = build_custom_cnn(cfg)
    dense = [l for l in m.layers if l.kind == "dense"][0]
    assert dense.params["kernel"].value.shape[0] == 12 * 12 * 256
    m3 = build_custom_cnn(CnnConfig(blocks=3, labels=5))
    assert [l for l in m3.layers if l.kind == "dense"][0].params["kernel"].value.shape[0] == 25 * 25 * 128
    small = build_custom_cnn(CnnConfig(blocks=2, labels=5, input_size=16))
    y = small(np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32))
    assert y.shape == (3, 5) and np.all((y > 0) & (y < 1))


def test_cnn_config_errors():
    with pytest.raises(ValueError):
        CnnConfig(blocks=6)
    with pytest.raises(ValueError):
        CnnConfig(hidden=128)
    with pytest.raises(ValueError):
        build_custom_cnn(CnnConfig(blocks=5, input_size=16))


def test_transfer_head_params_and_bias():
    head = build_transfer_head(2048, 200, 0.3)
    assert head.params().count() == 409_800
    small = build_transfer_head(6, 3, 0.0, seed=4)
    b = small.params()["0.dense.bias"].value
    b[:] = [0.0, 1.0, -2.0]
    out = small(np.zeros((2, 6), np.float32))
    np.testing.assert_allclose(out, np.tile(1 / (1 + np.exp(-b)), (2, 1)), rtol=1e-6)


def test_feature_file(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("#dim=4\nimg0,1,2,3,4\n")
    t = load_features(p)
    assert t.dim == 4 and t.rows["img0"].tolist() == [1, 2, 3, 4]
    p.write_text("#dim=4\nimg0,1,2,3,4\nimg0,1,2,3,4\n")
    with pytest.raises(ValueError, match=":3: duplicate"):
        load_features(p)
    p.write_text("#dim=4\nimg0,1,2,3\n")
    with pytest.raises(ValueError, match=":2:"):
        load_features(p)


def test_feature_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = FeatureTable(7, {f"im{i}": rng.normal(size=7).astype(np.float32) for i in range(100)})
    write_features(t, tmp_path / "f.csv")
    back = load_features(tmp_path / "f.csv")
    assert back.dim == 7 and list(back.rows) == list(t.rows)
    for k in t.rows:
        np.testing.assert_array_equal(back.rows[k], t.rows[k])


def test_targets_cache(tmp_path):
    y = np.array([[1, 0, 1], [0, 0, 0]], np.float32)
    write_targets(["a", "b"], y, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "a,101\nb,000\n"
    names, back = read_targets(tmp_path / "t.csv")
    assert names == ["a", "b"]
    np.testing.assert_array_equal(back, y)


def test_rank_labels_threshold():
    labels = ["a", "b", "c"]
    p = np.array([0.9, 0.04, 0.5])
    assert [l for l, _ in rank_labels(p, labels, 0.05)] == ["a", "c"]
    assert [l for l, _ in rank_labels(p, labels, 0.5)] == ["a", "c"]
    assert rank_labels(np.array([0.01, 0.02, 0.03]), labels, 0.05) == []
    with pytest.raises(ValueError):
        predict_ingredients(build_transfer_head(3, 3), np.zeros(3), labels, threshold=1.0)


def test_predict_sorted_by_confidence():
    head = build_transfer_head(2, 3, seed=1)
    head.params()["0.dense.bias"].value[:] = [0.0, 3.0, 1.0]
    head.params()["0.dense.kernel"].value[:] = 0
    out = predict_ingredients(head, np.zeros(2), ["x", "y", "z"], threshold=0.05)
    assert [l for l, _ in out] == ["y", "z", "x"]


def separable(n, dim, k, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(dim, k))
    x = rng.normal(size=(n, dim)).astype(np.float32)
    return x, (x @ w > 0).astype(np.float32)


def test_lr_zero_val_metrics_constant():
    x, y = separable(40, 6, 4, 0)
    head = build_transfer_head(6, 4, 0.3, seed=0)
    rec = train_ingredient_model(head, (ArraySource(x), y), (ArraySource(x[:10]), y[:10]),
                                 TrainConfig(batch_size=8, learning_rate=0.0, max_epochs=6, patience=10))
    vals = {(e["val_metric"], e["val_loss"]) for e in rec.epochs}
    assert len(rec.epochs) == 6 and len(vals) == 1


def test_empty_split_rejected():
    head = build_transfer_head(3, 2)
    with pytest.raises(ValueError):
        train_ingredient_model(head, (ArraySource(np.zeros((0, 3))), np.zeros((0, 2))),
                               (ArraySource(np.zeros((2, 3))), np.zeros((2, 2))), TrainConfig())


def test_early_stop_and_restore(tmp_path):
    x, y = separable(64, 8, 5, 3)
    # validation labels are the complement: learning the train set hurts val IoU
    head = build_transfer_head(8, 5, seed=1)
    ck = tmp_path / "m.pltd"
    rec = train_ingredient_model(head, (ArraySource(x), y), (ArraySource(x), 1 - y),
                                 TrainConfig(batch_size=16, learning_rate=1e-2, max_epochs=25, patience=3),
                                 checkpoint=ck)
    assert len(rec.epochs) == rec.best_epoch + 1 + 3 < 25
    assert rec.best_value == max(e["val_metric"] for e in rec.epochs)
    again = evaluate(head, ArraySource(x), 1 - y)["iou"]
    assert abs(again - rec.best_value) <= 1e-6
    restored = load_model(ck)
    assert abs(evaluate(restored, ArraySource(x), 1 - y)["iou"] - rec.best_value) <= 1e-6


def test_transfer_does_not_mutate_features():
    x, y = separable(32, 5, 3, 2)
    table = FeatureTable(5, {f"i{k}": x[k].copy() for k in range(32)})
    before = {k: v.copy() for k, v in table.rows.items()}
    names = list(table.rows)
    src = ArraySource(table.matrix(names))
    train_ingredient_model(build_transfer_head(5, 3, 0.3), (src, y), (src, y),
                           TrainConfig(batch_size=8, learning_rate=1e-2, max_epochs=3))
    for k in names:
        np.testing.assert_array_equal(table.rows[k], before[k])


def test_cnn_overfit_tiny():
    rng = np.random.default_rng(0)
    x = rng.random((8, 32, 32, 3)).astype(np.float32)
    y = (rng.random((8, 5)) < 0.4).astype(np.float32)
    m = build_custom_cnn(CnnConfig(blocks=2, labels=5, input_size=32), seed=0)
    rec = train_ingredient_model(m, (ArraySource(x), y), (ArraySource(x), y),
                                 TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=60, patience=60))
    assert max(e["train_metric"] for e in rec.epochs) >= 0.95


def test_cnn_permutation_equivariant_and_deterministic():
    m = build_custom_cnn(CnnConfig(blocks=2, labels=4, input_size=16, dropout=0.5), seed=3)
    x = np.random.default_rng(5).random((5, 16, 16, 3)).astype(np.float32)
    perm = np.array([3, 0, 4, 1, 2])
    a = m(x)
    np.testing.assert_allclose(m(x[perm]), a[perm], rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(m(x), a)


def test_image_source_augments_only_in_training(tmp_path):
    paths = []
    for i in range(2):
        p = tmp_path / f"im{i}.ppm"
        write_ppm(p, np.random.default_rng(i).integers(0, 256, (20, 20, 3)))
        paths.append(p)
    src = ImageSource(paths, size=16, policy=AugmentPolicy())
    idx = np.arange(2)
    np.testing.assert_array_equal(src.batch(idx), src.batch(idx))
    tr = src.batch(idx, np.random.default_rng(0), train=True)
    assert tr.shape == (2, 16, 16, 3)
    assert abs(tr[0].mean()) < 1e-3
