"""Window scanning, array-tree conversion, cascades and the GCFS format."""

import numpy as np
import pytest

from cloudspx import gcforest
from cloudspx.gcforest import (
    ArrayTree,
    CascadeConfig,
    Forest,
    ForestFormatError,
    GcConfig,
    GcForestModel,
    ScanConfig,
    deserialize,
    extract_windows,
    load_model,
    predict_gcforest,
    save_model,
    scan_features,
    serialize,
    train_forest,
    train_gcforest,
)


def _blobs(n_per_class=12, seed=0, spread=0.05):
    """Four well-separated 2D clusters, one per class."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]])
    x = np.concatenate(
        [c + spread * rng.standard_normal((n_per_class, 2)) for c in centers]
    ).astype(np.float32)
    y = np.repeat(np.arange(4), n_per_class)
    return x, y


def _brightness_patches(n_per_class=6, seed=0):
    """32x32 patches whose class is encoded in overall brightness."""
    rng = np.random.default_rng(seed)
    levels = [0.1, 0.4, 0.7, 0.95]
    pixels = np.concatenate(
        [
            np.clip(lv + 0.02 * rng.standard_normal((n_per_class, 3, 32, 32)), 0, 1)
            for lv in levels
        ]
    ).astype(np.float32)
    labels = np.repeat(np.arange(4), n_per_class)
    return pixels, labels


def _tiny_config(seed=0):
    return GcConfig(
        scan=ScanConfig(n_trees=4, max_per_class=400),
        cascade=CascadeConfig(n_trees=6, n_folds=3, max_levels=2, patience=1),
        seed=seed,
    )


# -- window extraction --------------------------------------------------------


def test_extract_windows_matches_loop_oracle():
    rng = np.random.default_rng(1)
    pixels = rng.random((2, 3, 12, 12)).astype(np.float32)
    wins = extract_windows(pixels, window=8, stride=4)
    positions = [(i, j) for i in (0, 4) for j in (0, 4)]
    assert wins.shape == (2, 4, 3 * 64)
    for n in range(2):
        for p, (i, j) in enumerate(positions):
            want = pixels[n, :, i : i + 8, j : j + 8].reshape(-1)
            assert np.array_equal(wins[n, p], want)


def test_extract_windows_rejects_oversized_window():
    pixels = np.zeros((1, 3, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError):
        extract_windows(pixels, window=9, stride=4)


def test_default_scan_feature_dim_is_592():
    pixels, labels = _brightness_patches(n_per_class=3)
    model = train_gcforest(pixels, labels, _tiny_config())
    # 7x7 positions at window 8 and 5x5 at window 16, two forests, 4 classes
    assert model.scan_feature_dim() == (49 + 25) * 2 * 4 == 592
    feats = scan_features(model, pixels[:2])
    assert feats.shape == (2, 592)


def test_scan_feature_block_order():
    pixels, labels = _brightness_patches(n_per_class=3, seed=2)
    model = train_gcforest(pixels, labels, _tiny_config(seed=1))
    probe = pixels[:3]
    feats = scan_features(model, probe)
    off = 0
    for stage in model.scan_stages:
        wins = extract_windows(probe, stage.window, model.config.scan.stride)
        n, p, d = wins.shape
        for forest in stage.forests:
            want = forest.predict_proba(wins.reshape(n * p, d)).astype(np.float32)
            got = feats[:, off : off + p * 4]
            assert np.array_equal(got, want.reshape(n, p * 4))
            off += p * 4
    assert off == feats.shape[1]


def test_scan_feature_distributions_sum_to_one():
    pixels, labels = _brightness_patches(n_per_class=3, seed=3)
    model = train_gcforest(pixels, labels, _tiny_config(seed=2))
    feats = scan_features(model, pixels[:4])
    sums = feats.reshape(4, -1, 4).sum(axis=2)
    assert np.allclose(sums, 1.0, atol=1e-5)


# -- array trees --------------------------------------------------------------


def _fit_tree(x, y, kind="random", seed=0):
    clf = gcforest._make_learner(kind, seed)
    clf.fit(x, y)
    return clf


def test_array_tree_apply_matches_recursive_descent():
    rng = np.random.default_rng(4)
    x = rng.random((200, 6)).astype(np.float32)
    y = rng.integers(0, 4, 200)
    tree = ArrayTree.from_sklearn(_fit_tree(x, y))
    probe = rng.random((50, 6)).astype(np.float32)
    leaves = tree.apply(probe)
    for i in range(50):
        node = 0
        while tree.feature[node] >= 0:
            if probe[i, tree.feature[node]] <= tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        assert leaves[i] == node


def test_array_tree_leaf_histograms_normalized():
    rng = np.random.default_rng(5)
    x = rng.random((120, 4)).astype(np.float32)
    y = rng.integers(0, 4, 120)
    tree = ArrayTree.from_sklearn(_fit_tree(x, y))
    leaf = tree.feature < 0
    assert np.allclose(tree.hist[leaf].sum(axis=1), 1.0, atol=1e-6)
    assert np.all(tree.hist[~leaf] == 0)


def test_array_tree_absent_classes_get_zero_mass():
    # trained on labels {0, 2} only; columns 1 and 3 must stay zero
    rng = np.random.default_rng(6)
    x = rng.random((80, 3)).astype(np.float32)
    y = np.where(x[:, 0] > 0.5, 2, 0)
    tree = ArrayTree.from_sklearn(_fit_tree(x, y))
    assert np.all(tree.hist[:, 1] == 0)
    assert np.all(tree.hist[:, 3] == 0)
    probs = tree.predict_proba(x)
    assert probs.shape == (80, 4)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


# -- single forests -----------------------------------------------------------


@pytest.mark.parametrize("kind", ["random", "completely_random"])
def test_forest_reaches_full_train_accuracy_on_separable_data(kind):
    x, y = _blobs()
    forest = train_forest(x, y, kind=kind, n_trees=20, seed=0)
    assert (forest.predict_proba(x).argmax(axis=1) == y).all()


def test_forest_prediction_is_mean_of_trees():
    x, y = _blobs(seed=1)
    forest = train_forest(x, y, kind="random", n_trees=7, seed=1)
    acc = np.zeros((x.shape[0], 4), dtype=np.float64)
    for tree in forest.trees:
        acc += tree.predict_proba(x)
    assert np.array_equal(forest.predict_proba(x), acc / 7)


def test_forest_training_is_deterministic():
    x, y = _blobs(seed=2)
    for kind in ("random", "completely_random"):
        f1 = train_forest(x, y, kind=kind, n_trees=5, seed=3)
        f2 = train_forest(x, y, kind=kind, n_trees=5, seed=3)
        probe = np.random.default_rng(0).random((20, 2)).astype(np.float32) * 6
        assert np.array_equal(f1.predict_proba(probe), f2.predict_proba(probe))
        assert f1.oob_accuracy == f2.oob_accuracy
    f3 = train_forest(x, y, kind="random", n_trees=5, seed=4)
    assert not np.array_equal(
        f1.predict_proba(probe), f3.predict_proba(probe)
    ) or f1.oob_accuracy != f3.oob_accuracy


def test_bootstrap_controls_oob_estimate():
    x, y = _blobs(seed=3)
    with_bs = train_forest(x, y, kind="random", n_trees=10, seed=0)
    assert with_bs.oob_accuracy is not None
    assert 0.0 <= with_bs.oob_accuracy <= 1.0
    without = train_forest(x, y, kind="random", n_trees=10, seed=0, bootstrap=False)
    assert without.oob_accuracy is None
    cr = train_forest(x, y, kind="completely_random", n_trees=10, seed=0)
    assert cr.oob_accuracy is None  # defaults to no bootstrap


def test_forest_input_validation():
    x, y = _blobs()
    with pytest.raises(ValueError):
        train_forest(x, y[:-1])
    with pytest.raises(ValueError):
        train_forest(np.zeros((0, 2), dtype=np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        train_forest(x, y, kind="extremely_random")


def test_cap_per_class_limits_and_preserves_order():
    rng = np.random.default_rng(7)
    x = np.arange(40, dtype=np.float32).reshape(40, 1)
    y = np.repeat(np.arange(4), 10)
    cx, cy = gcforest._cap_per_class(x, y, cap=3, rng=np.random.default_rng(0))
    assert len(cy) == 12
    assert all(np.sum(cy == c) == 3 for c in range(4))
    assert np.all(np.diff(cx[:, 0]) > 0)  # original row order kept
    cx2, cy2 = gcforest._cap_per_class(x, y, cap=3, rng=np.random.default_rng(0))
    assert np.array_equal(cx, cx2)


def test_fold_assignment_balanced_and_deterministic():
    fold = gcforest._fold_assignment(10, 3, np.random.default_rng(1))
    counts = np.bincount(fold, minlength=3)
    assert sorted(counts.tolist()) == [3, 3, 4]
    fold2 = gcforest._fold_assignment(10, 3, np.random.default_rng(1))
    assert np.array_equal(fold, fold2)


# -- cascade ------------------------------------------------------------------


def test_cascade_structure_and_trimming():
    pixels, labels = _brightness_patches(seed=4)
    config = _tiny_config(seed=3)
    model = train_gcforest(pixels, labels, config)
    assert len(model.levels) == model.best_level + 1
    assert len(model.level_accuracy) >= len(model.levels)
    assert model.level_accuracy[model.best_level] == max(model.level_accuracy)
    for level in model.levels:
        assert [cf.kind for cf in level] == [
            "random", "random", "completely_random", "completely_random",
        ]
        for cf in level:
            assert len(cf.folds) == config.cascade.n_folds


def test_cascade_learns_planted_signal():
    pixels, labels = _brightness_patches(seed=5)
    model = train_gcforest(pixels, labels, _tiny_config(seed=4))
    probs, vecs = predict_gcforest(model, pixels)
    assert (probs.argmax(axis=1) == labels).mean() >= 0.95
    assert probs.shape == (len(labels), 4)
    assert vecs.shape == (len(labels), 16)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_predict_composes_levels_and_averages_best():
    pixels, labels = _brightness_patches(n_per_class=4, seed=6)
    model = train_gcforest(pixels, labels, _tiny_config(seed=5))
    probe = pixels[::3]
    probs, vecs = predict_gcforest(model, probe)

    feats = scan_features(model, probe)
    prev = None
    for level in model.levels:
        inp = feats if prev is None else np.hstack([feats, prev])
        outs = []
        for cf in level:
            fold_acc = np.zeros((probe.shape[0], 4), dtype=np.float64)
            for forest in cf.folds:
                tree_acc = np.zeros_like(fold_acc)
                for tree in forest.trees:
                    tree_acc += tree.predict_proba(np.ascontiguousarray(inp, np.float32))
                fold_acc += tree_acc / len(forest.trees)
            outs.append(fold_acc / len(cf.folds))
        prev = np.hstack(outs).astype(np.float32)
    assert np.array_equal(probs, np.mean(outs, axis=0))
    assert np.array_equal(vecs, np.hstack(outs))


def test_train_gcforest_fixed_seed_is_bit_identical():
    pixels, labels = _brightness_patches(n_per_class=4, seed=7)
    config = _tiny_config(seed=6)
    m1 = train_gcforest(pixels, labels, config)
    m2 = train_gcforest(pixels, labels, _tiny_config(seed=6))
    assert serialize(m1) == serialize(m2)


def test_train_gcforest_input_validation():
    pixels, labels = _brightness_patches(n_per_class=2)
    with pytest.raises(ValueError):
        train_gcforest(pixels, labels[:-1], _tiny_config())
    with pytest.raises(ValueError):
        train_gcforest(pixels[:2], labels[:2], _tiny_config())  # fewer than n_folds


def test_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(window_sizes=())
    with pytest.raises(ValueError):
        ScanConfig(window_sizes=(0, 8))
    with pytest.raises(ValueError):
        ScanConfig(stride=0)
    with pytest.raises(ValueError):
        CascadeConfig(n_folds=1)
    with pytest.raises(ValueError):
        CascadeConfig(patience=0)
    with pytest.raises(ValueError):
        CascadeConfig(max_levels=0)


# -- serialization ------------------------------------------------------------


def test_gcfs_round_trip_bitwise(tmp_path):
    pixels, labels = _brightness_patches(n_per_class=4, seed=8)
    model = train_gcforest(pixels, labels, _tiny_config(seed=7))
    path = tmp_path / "model.gcfs"
    save_model(model, path)
    back = load_model(path)

    assert back.config == model.config
    assert back.best_level == model.best_level
    assert back.level_accuracy == model.level_accuracy
    probe = pixels[1::2]
    p1, v1 = predict_gcforest(model, probe)
    p2, v2 = predict_gcforest(back, probe)
    assert np.array_equal(p1, p2)
    assert np.array_equal(v1, v2)
    assert serialize(back) == path.read_bytes()


def test_gcfs_header_layout():
    pixels, labels = _brightness_patches(n_per_class=3, seed=9)
    raw = serialize(train_gcforest(pixels, labels, _tiny_config(seed=8)))
    assert raw[:4] == b"GCFS"
    assert raw[4] == 1


def test_gcfs_rejects_malformed():
    pixels, labels = _brightness_patches(n_per_class=3, seed=10)
    raw = serialize(train_gcforest(pixels, labels, _tiny_config(seed=9)))
    with pytest.raises(ForestFormatError):
        deserialize(raw[:5])
    with pytest.raises(ForestFormatError):
        deserialize(b"YYYY" + raw[4:])
    with pytest.raises(ForestFormatError):
        deserialize(raw[:4] + bytes([9]) + raw[5:])
    hlen = int.from_bytes(raw[5:9], "little")
    with pytest.raises(ForestFormatError):
        deserialize(raw[: 9 + hlen // 3])
    with pytest.raises(ForestFormatError):
        deserialize(raw[:-7])  # inside some tree's node records
