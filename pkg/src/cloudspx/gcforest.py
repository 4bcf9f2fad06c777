"""Deep forest classifier: multi-grained scanning plus a cascade of forests.

Sliding windows over each patch are classified by a pair of forests per
window size; the concatenated class distributions form the scan feature.
Cascade levels of four forests (two random, two completely-random) then
refine 4-class distributions, each level consuming the scan feature plus the
previous level's 16 class-vector dims. Levels are cross-fit k-fold so the
vectors fed forward are out-of-fold; all fold models are kept and averaged
at prediction time.

Individual trees are grown by scikit-learn, then converted to flat arrays;
every prediction in this module runs through the array traversal so that
serialized models reproduce predictions exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.tree import DecisionTreeClassifier, ExtraTreeClassifier

N_CLASSES = 4
FOREST_KINDS = ("random", "completely_random")
_KIND_ID = {"random": 0, "completely_random": 1}


class ForestFormatError(Exception):
    pass


@dataclass
class ScanConfig:
    window_sizes: tuple[int, ...] = (8, 16)
    stride: int = 4
    n_trees: int = 30
    max_per_class: int = 20000

    def __post_init__(self):
        if not self.window_sizes or any(w < 1 for w in self.window_sizes):
            raise ValueError("window_sizes must be positive")
        if self.stride < 1 or self.n_trees < 1 or self.max_per_class < 1:
            raise ValueError("stride, n_trees and max_per_class must be positive")


@dataclass
class CascadeConfig:
    n_trees: int = 500
    n_folds: int = 3
    max_levels: int = 8
    patience: int = 2

    def __post_init__(self):
        if self.n_trees < 1 or self.max_levels < 1:
            raise ValueError("n_trees and max_levels must be positive")
        if self.n_folds < 2:
            raise ValueError("cross-fitting needs at least 2 folds")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class GcConfig:
    scan: ScanConfig = field(default_factory=ScanConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    seed: int = 0


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# array trees and forests


class ArrayTree:
    """Flat decision tree: feature < 0 marks a leaf, histograms are float32."""

    __slots__ = ("feature", "threshold", "left", "right", "hist")

    def __init__(self, feature, threshold, left, right, hist):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.hist = hist

    @classmethod
    def from_sklearn(cls, clf, n_classes: int = N_CLASSES) -> "ArrayTree":
        t = clf.tree_
        leaf = t.children_left == -1
        feature = np.where(leaf, -1, t.feature).astype(np.int32)
        counts = t.value[:, 0, :].astype(np.float64)
        sums = counts.sum(axis=1, keepdims=True)
        sums[sums == 0] = 1.0
        local = counts / sums
        hist = np.zeros((len(feature), n_classes), dtype=np.float32)
        hist[:, clf.classes_.astype(int)] = local.astype(np.float32)
        hist[~leaf] = 0.0
        return cls(
            feature,
            t.threshold.astype(np.float32),
            t.children_left.astype(np.int32),
            t.children_right.astype(np.int32),
            hist,
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index per row; descends left on value <= threshold."""
        node = np.zeros(x.shape[0], dtype=np.int32)
        idx = np.nonzero(self.feature[node] >= 0)[0]
        while idx.size:
            nd = node[idx]
            f = self.feature[nd]
            go_left = x[idx, f] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            idx = idx[self.feature[node[idx]] >= 0]
        return node

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        # float32 storage rounds count fractions, so renormalize on emit to
        # keep every distribution summing to 1 at double precision
        rows = self.hist[self.apply(x)].astype(np.float64)
        sums = rows.sum(axis=1, keepdims=True)
        sums[sums == 0] = 1.0
        return rows / sums


@dataclass
class Forest:
    kind: str
    trees: list
    seed: int
    oob_accuracy: float | None = None

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float32)
        acc = np.zeros((x.shape[0], N_CLASSES), dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict_proba(x)
        return acc / len(self.trees)


def _make_learner(kind: str, random_state: int):
    if kind == "random":
        return DecisionTreeClassifier(
            criterion="gini",
            splitter="best",
            max_features="sqrt",
            min_samples_leaf=2,
            random_state=random_state,
        )
    if kind == "completely_random":
        return ExtraTreeClassifier(
            criterion="gini",
            splitter="random",
            max_features=1,
            min_samples_leaf=1,
            random_state=random_state,
        )
    raise ValueError(f"unknown forest kind {kind!r}")


def train_forest(x, y, kind: str = "random", n_trees: int = 30, seed: int = 0,
                 bootstrap: bool | None = None) -> Forest:
    """Grow n_trees trees with per-tree derived seeds.

    Bootstrap defaults on for random forests (enabling the out-of-bag
    accuracy estimate) and off for completely-random ones. With bootstrap
    off every tree sees the full sample and oob_accuracy stays None.
    """
    if kind not in _KIND_ID:
        raise ValueError(f"unknown forest kind {kind!r}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("x must be [N,D] with matching non-empty labels")
    if bootstrap is None:
        bootstrap = kind == "random"
    n = x.shape[0]
    trees = []
    oob_sum = np.zeros((n, N_CLASSES), dtype=np.float64)
    oob_hits = np.zeros(n, dtype=np.int64)
    for i in range(n_trees):
        ss = np.random.SeedSequence([seed, _KIND_ID[kind], i])
        rs = int(ss.generate_state(1)[0] >> 1)
        clf = _make_learner(kind, rs)
        if bootstrap:
            rng = np.random.default_rng(ss)
            idx = rng.integers(0, n, size=n)
            clf.fit(x[idx], y[idx])
            tree = ArrayTree.from_sklearn(clf)
            oob = np.ones(n, dtype=bool)
            oob[idx] = False
            if oob.any():
                oob_sum[oob] += tree.predict_proba(x[oob])
                oob_hits[oob] += 1
        else:
            clf.fit(x, y)
            tree = ArrayTree.from_sklearn(clf)
        trees.append(tree)
    oob_accuracy = None
    if bootstrap and (oob_hits > 0).any():
        covered = oob_hits > 0
        pred = oob_sum[covered].argmax(axis=1)
        oob_accuracy = float((pred == y[covered]).mean())
    return Forest(kind=kind, trees=trees, seed=seed, oob_accuracy=oob_accuracy)


# ---------------------------------------------------------------------------
# multi-grained scanning


def _window_positions(size: int, window: int, stride: int) -> list[int]:
    if window > size:
        raise ValueError(f"window {window} exceeds patch size {size}")
    return list(range(0, size - window + 1, stride))


def extract_windows(pixels: np.ndarray, window: int, stride: int) -> np.ndarray:
    """[N,3,S,S] -> [N, P, 3*window*window], positions row-major."""
    n, c, h, w = pixels.shape
    rows = _window_positions(h, window, stride)
    cols = _window_positions(w, window, stride)
    out = np.empty((n, len(rows) * len(cols), c * window * window), dtype=np.float32)
    p = 0
    for i in rows:
        for j in cols:
            out[:, p] = pixels[:, :, i : i + window, j : j + window].reshape(n, -1)
            p += 1
    return out


@dataclass
class ScanStage:
    window: int
    forests: tuple  # (random, completely_random)


@dataclass
class CrossFitForest:
    kind: str
    folds: list  # one Forest per fold, trained on that fold's complement

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        acc = np.zeros((x.shape[0], N_CLASSES), dtype=np.float64)
        for f in self.folds:
            acc += f.predict_proba(x)
        return acc / len(self.folds)


@dataclass
class GcForestModel:
    config: GcConfig
    scan_stages: list
    levels: list  # each level: [CrossFitForest x4] ordered R, R, CR, CR
    best_level: int
    level_accuracy: list

    def scan_feature_dim(self) -> int:
        dim = 0
        for stage in self.scan_stages:
            p = len(_window_positions(32, stage.window, self.config.scan.stride)) ** 2
            dim += p * len(stage.forests) * N_CLASSES
        return dim


def _cap_per_class(x, y, cap, rng):
    keep = []
    for c in range(N_CLASSES):
        rows = np.nonzero(y == c)[0]
        if len(rows) > cap:
            rows = np.sort(rng.choice(rows, size=cap, replace=False))
        keep.append(rows)
    keep = np.concatenate(keep)
    keep.sort()
    return x[keep], y[keep]


def _train_scan_stages(pixels, labels, config: GcConfig):
    stages = []
    for wi, window in enumerate(sorted(config.scan.window_sizes)):
        wins = extract_windows(pixels, window, config.scan.stride)
        n, p, d = wins.shape
        flat = wins.reshape(n * p, d)
        wy = np.repeat(labels, p)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, wi]))
        flat, wy = _cap_per_class(flat, wy, config.scan.max_per_class, rng)
        pair = tuple(
            train_forest(
                flat, wy, kind=kind, n_trees=config.scan.n_trees,
                seed=_derive_seed(config.seed, 1, wi, _KIND_ID[kind]),
            )
            for kind in FOREST_KINDS
        )
        stages.append(ScanStage(window=window, forests=pair))
    return stages


def scan_features(model: GcForestModel, pixels: np.ndarray) -> np.ndarray:
    """Per patch: for each window size (ascending), each forest's class
    distributions over all positions, row-major. Default config: 592 dims."""
    pixels = np.ascontiguousarray(pixels, dtype=np.float32)
    blocks = []
    for stage in model.scan_stages:
        wins = extract_windows(pixels, stage.window, model.config.scan.stride)
        n, p, d = wins.shape
        flat = wins.reshape(n * p, d)
        for forest in stage.forests:
            probs = forest.predict_proba(flat).astype(np.float32)
            blocks.append(probs.reshape(n, p * N_CLASSES))
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# cascade


_LEVEL_KINDS = ("random", "random", "completely_random", "completely_random")


def _fold_assignment(n: int, n_folds: int, rng) -> np.ndarray:
    fold = np.empty(n, dtype=np.int64)
    fold[rng.permutation(n)] = np.arange(n) % n_folds
    return fold


def _train_level(feats, y, level: int, config: GcConfig):
    n = feats.shape[0]
    cc = config.cascade
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, level]))
    fold_of = _fold_assignment(n, cc.n_folds, rng)
    forests = []
    oof = []
    for fi, kind in enumerate(_LEVEL_KINDS):
        folds = []
        oof_f = np.zeros((n, N_CLASSES), dtype=np.float64)
        for k in range(cc.n_folds):
            tr = fold_of != k
            if not tr.any() or tr.all():
                raise ValueError("fold without training or held-out rows; add data")
            f = train_forest(
                feats[tr], y[tr], kind=kind, n_trees=cc.n_trees,
                seed=_derive_seed(config.seed, 2, level, fi, k),
            )
            folds.append(f)
            oof_f[~tr] = f.predict_proba(feats[~tr])
        forests.append(CrossFitForest(kind=kind, folds=folds))
        oof.append(oof_f)
    ensemble = np.mean(oof, axis=0)
    accuracy = float((ensemble.argmax(axis=1) == y).mean())
    return forests, np.hstack(oof).astype(np.float32), accuracy


def train_gcforest(pixels: np.ndarray, labels: np.ndarray,
                   config: GcConfig | None = None) -> GcForestModel:
    """Train scan forests, then grow cascade levels until the cross-fit
    ensemble accuracy stops improving for `patience` levels. Levels past the
    best one are dropped."""
    config = config or GcConfig()
    pixels = np.ascontiguousarray(pixels, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if pixels.shape[0] != y.shape[0] or pixels.shape[0] == 0:
        raise ValueError("pixels and labels must be non-empty and aligned")
    if pixels.shape[0] < config.cascade.n_folds:
        raise ValueError("need at least n_folds training patches")

    stages = _train_scan_stages(pixels, y, config)
    model = GcForestModel(
        config=config, scan_stages=stages, levels=[], best_level=0, level_accuracy=[]
    )
    feats = scan_features(model, pixels)

    prev = None
    accs = []
    levels = []
    for level in range(config.cascade.max_levels):
        inp = feats if prev is None else np.hstack([feats, prev])
        forests, prev, acc = _train_level(inp, y, level, config)
        levels.append(forests)
        accs.append(acc)
        best = int(np.argmax(accs))
        if level - best >= config.cascade.patience:
            break
    best = int(np.argmax(accs))
    model.levels = levels[: best + 1]
    model.best_level = best
    model.level_accuracy = accs
    return model


def predict_gcforest(model: GcForestModel, pixels: np.ndarray):
    """Returns (probs [N,4], class_vectors [N,16]) from the best level.

    probs averages the four forests of the best level; class_vectors is their
    concatenation. Each forest itself averages its fold models.
    """
    feats = scan_features(model, pixels)
    prev = None
    vecs = None
    for forests in model.levels:
        inp = feats if prev is None else np.hstack([feats, prev])
        vecs = [cf.predict_proba(inp) for cf in forests]
        prev = np.hstack(vecs).astype(np.float32)
    probs = np.mean(vecs, axis=0)
    return probs, np.hstack(vecs)


# ---------------------------------------------------------------------------
# serialization (GCFS format)

MAGIC = b"GCFS"
VERSION = 1


def _tree_to_bytes(tree: ArrayTree) -> bytes:
    n = len(tree.feature)
    out = bytearray(struct.pack("<I", n))
    for i in range(n):
        if tree.feature[i] < 0:
            out += struct.pack("<B", 1)
            out += tree.hist[i].astype("<f4").tobytes()
        else:
            out += struct.pack(
                "<BIfII", 0, int(tree.feature[i]), float(tree.threshold[i]),
                int(tree.left[i]), int(tree.right[i]),
            )
    return bytes(out)


def _tree_from_buffer(data: bytes, off: int):
    if off + 4 > len(data):
        raise ForestFormatError("truncated tree header")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    feature = np.full(n, -1, dtype=np.int32)
    threshold = np.zeros(n, dtype=np.float32)
    left = np.zeros(n, dtype=np.int32)
    right = np.zeros(n, dtype=np.int32)
    hist = np.zeros((n, N_CLASSES), dtype=np.float32)
    for i in range(n):
        if off >= len(data):
            raise ForestFormatError("truncated node record")
        tag = data[off]
        off += 1
        if tag == 1:
            if off + 16 > len(data):
                raise ForestFormatError("truncated leaf record")
            hist[i] = np.frombuffer(data, dtype="<f4", count=N_CLASSES, offset=off)
            off += 16
        elif tag == 0:
            if off + 16 > len(data):
                raise ForestFormatError("truncated split record")
            f, t, l, r = struct.unpack_from("<IfII", data, off)
            feature[i], threshold[i], left[i], right[i] = f, t, l, r
            off += 16
        else:
            raise ForestFormatError(f"unknown node tag {tag}")
    return ArrayTree(feature, threshold, left, right, hist), off


def _forest_meta(f: Forest) -> dict:
    return {
        "kind": f.kind,
        "seed": f.seed,
        "n_trees": len(f.trees),
        "oob_accuracy": f.oob_accuracy,
    }


def serialize(model: GcForestModel) -> bytes:
    cfg = model.config
    header = {
        "config": {
            "seed": cfg.seed,
            "scan": {
                "window_sizes": list(cfg.scan.window_sizes),
                "stride": cfg.scan.stride,
                "n_trees": cfg.scan.n_trees,
                "max_per_class": cfg.scan.max_per_class,
            },
            "cascade": {
                "n_trees": cfg.cascade.n_trees,
                "n_folds": cfg.cascade.n_folds,
                "max_levels": cfg.cascade.max_levels,
                "patience": cfg.cascade.patience,
            },
        },
        "best_level": model.best_level,
        "level_accuracy": model.level_accuracy,
        "scan_stages": [
            {"window": s.window, "forests": [_forest_meta(f) for f in s.forests]}
            for s in model.scan_stages
        ],
        "levels": [
            [
                {"kind": cf.kind, "folds": [_forest_meta(f) for f in cf.folds]}
                for cf in level
            ]
            for level in model.levels
        ],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", VERSION)
    out += struct.pack("<I", len(hbytes))
    out += hbytes
    for stage in model.scan_stages:
        for forest in stage.forests:
            for tree in forest.trees:
                out += _tree_to_bytes(tree)
    for level in model.levels:
        for cf in level:
            for forest in cf.folds:
                for tree in forest.trees:
                    out += _tree_to_bytes(tree)
    return bytes(out)


def deserialize(data: bytes) -> GcForestModel:
    if len(data) < 9:
        raise ForestFormatError("truncated model file")
    if data[:4] != MAGIC:
        raise ForestFormatError("bad magic")
    if data[4] > VERSION:
        raise ForestFormatError(f"unsupported version {data[4]}")
    (hlen,) = struct.unpack_from("<I", data, 5)
    if len(data) < 9 + hlen:
        raise ForestFormatError("truncated header")
    header = json.loads(data[9 : 9 + hlen].decode())
    c = header["config"]
    config = GcConfig(
        scan=ScanConfig(
            window_sizes=tuple(c["scan"]["window_sizes"]),
            stride=c["scan"]["stride"],
            n_trees=c["scan"]["n_trees"],
            max_per_class=c["scan"]["max_per_class"],
        ),
        cascade=CascadeConfig(**c["cascade"]),
        seed=c["seed"],
    )
    off = 9 + hlen

    def read_forest(meta):
        nonlocal off
        trees = []
        for _ in range(meta["n_trees"]):
            tree, off2 = _tree_from_buffer(data, off)
            trees.append(tree)
            off = off2
        return Forest(
            kind=meta["kind"], trees=trees, seed=meta["seed"],
            oob_accuracy=meta["oob_accuracy"],
        )

    stages = []
    for smeta in header["scan_stages"]:
        forests = tuple(read_forest(m) for m in smeta["forests"])
        stages.append(ScanStage(window=smeta["window"], forests=forests))
    levels = []
    for lmeta in header["levels"]:
        level = []
        for cfmeta in lmeta:
            folds = [read_forest(m) for m in cfmeta["folds"]]
            level.append(CrossFitForest(kind=cfmeta["kind"], folds=folds))
        levels.append(level)
    return GcForestModel(
        config=config,
        scan_stages=stages,
        levels=levels,
        best_level=header["best_level"],
        level_accuracy=header["level_accuracy"],
    )


def save_model(model: GcForestModel, path: str | Path) -> None:
    Path(path).write_bytes(serialize(model))


def load_model(path: str | Path) -> GcForestModel:
    return deserialize(Path(path).read_bytes())
