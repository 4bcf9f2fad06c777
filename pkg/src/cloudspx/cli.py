"""Command-line front end for the cloud detection pipeline.

Commands operate on a workspace directory with a fixed layout:

    tiles/<id>/          image containers (plus gt.png for synthetic tiles)
    edges/<id>.png       saved edge probability maps
    maps/<id>.spxm       super-pixel segmentations
    labels/<id>.json     per-region class labels
    dataset/             extracted patches and manifests
    models/              trained classifiers
    predictions/<id>.jsonl, masks/<id>.png, reports/

Every artifact-producing command writes the effective configuration next to
its output. Flag values override the --config file, which overrides defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import edgeprob, gcforest, hfcnn, metrics, patchset, raster, refine, superpixel, synthgen
from .config import PipelineConfig, write_sidecar
from .patchset import ClassLabel

_CHUNK = 128  # patches per model batch when predicting


# ---------------------------------------------------------------------------
# workspace helpers


def _tiles_dir(ws: Path) -> Path:
    return ws / "tiles"


def _discover_tiles(ws: Path) -> list:
    root = _tiles_dir(ws)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "meta.json").is_file())


def _select_tiles(ws: Path, requested) -> list:
    if requested:
        return list(requested)
    found = _discover_tiles(ws)
    if not found:
        raise SystemExit(f"no tiles found under {_tiles_dir(ws)}")
    return found


def _load_tile(ws: Path, tile_id: str) -> raster.MultiBandImage:
    return raster.load_image(_tiles_dir(ws) / tile_id)


def _map_path(ws: Path, tile_id: str) -> Path:
    return ws / "maps" / f"{tile_id}.spxm"


def _load_map(ws: Path, tile_id: str) -> superpixel.SuperPixelMap:
    path = _map_path(ws, tile_id)
    if not path.is_file():
        raise SystemExit(f"missing segmentation {path}; run segment first")
    return superpixel.load_map(path)


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# config flags


_SKIP_FLAGS = {"scan_window_sizes"}


def _add_config_flags(sp: argparse.ArgumentParser, names) -> list:
    defaults = PipelineConfig()
    for name in names:
        if name in _SKIP_FLAGS:
            sp.add_argument(
                "--scan-window-sizes", dest=name, default=None,
                type=lambda s: tuple(int(v) for v in s.split(",")),
                help="comma-separated window sizes (default 8,16)",
            )
            continue
        default = getattr(defaults, name)
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            sp.add_argument(flag, dest=name, default=None,
                            action=argparse.BooleanOptionalAction)
        else:
            sp.add_argument(flag, dest=name, default=None, type=type(default))
    return list(names)


def _resolve_config(args, names) -> PipelineConfig:
    overrides = {name: getattr(args, name) for name in names}
    return PipelineConfig.resolve(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    ws = Path(args.workspace)
    out_root = _ensure_dir(_tiles_dir(ws))
    for i in range(args.tiles):
        tile_id = f"t{i:03d}"
        params = synthgen.SceneParams(
            seed=args.seed + i,
            tile_size=args.tile_size,
            n_thick_blobs=args.thick_blobs,
            n_cirrus_halos=args.cirrus_halos,
            n_buildings=args.buildings,
        )
        img, gt, scene = synthgen.generate_tile(params)
        synthgen.write_tile(out_root / tile_id, img, gt, scene)
        frac = {c.name.lower(): round(gt.fraction(c), 3) for c in ClassLabel}
        print(f"{tile_id}: {args.tile_size}x{args.tile_size} {frac}")
    return 0


def _cmd_edges(args) -> int:
    ws = Path(args.workspace)
    out_root = _ensure_dir(ws / "edges")
    for tile_id in _select_tiles(ws, args.tile):
        img = _load_tile(ws, tile_id)
        em = edgeprob.edge_probability(img)
        edgeprob.save_edge_map(em, out_root / f"{tile_id}.png")
        print(f"{tile_id}: edge map {em.width}x{em.height}, "
              f"max {float(em.prob.max()):.3f}")
    return 0


_SEGMENT_FLAGS = ["n_superpixels", "compactness", "iterations", "edge_weight",
                  "edge_detector", "min_area"]


def _cmd_segment(args) -> int:
    ws = Path(args.workspace)
    cfg = _resolve_config(args, _SEGMENT_FLAGS)
    out_root = _ensure_dir(ws / "maps")
    for tile_id in _select_tiles(ws, args.tile):
        img = _load_tile(ws, tile_id)
        external = None
        if cfg.edge_detector == "external":
            path = Path(args.external_edges) if args.external_edges \
                else ws / "edges" / f"{tile_id}.png"
            external = edgeprob.load_external_map(path)
        em = edgeprob.edge_probability(img, detector=cfg.edge_detector,
                                       external_map=external)
        spmap = superpixel.segment(
            img, em,
            n_superpixels=cfg.n_superpixels,
            compactness=cfg.compactness,
            iterations=cfg.iterations,
            edge_weight=cfg.edge_weight,
        )
        spmap = superpixel.enforce_connectivity(spmap, min_area=cfg.min_area)
        out = out_root / f"{tile_id}.spxm"
        superpixel.save_map(spmap, out)
        write_sidecar(cfg, out)
        hist = spmap.energy_history
        print(f"{tile_id}: {spmap.n_regions} regions, "
              f"energy {hist[0]:.4g} -> {hist[-1]:.4g}")
    return 0


def _majority_labels(label_raster: np.ndarray, gt: np.ndarray) -> dict:
    n = int(label_raster.max()) + 1
    comb = label_raster.ravel().astype(np.int64) * patchset.N_CLASSES + gt.ravel()
    counts = np.bincount(comb, minlength=n * patchset.N_CLASSES)
    counts = counts.reshape(n, patchset.N_CLASSES)
    return {rid: int(counts[rid].argmax()) for rid in range(n)}


def _cmd_label_from_gt(args) -> int:
    ws = Path(args.workspace)
    out_root = _ensure_dir(ws / "labels")
    for tile_id in _select_tiles(ws, args.tile):
        gt = synthgen.load_ground_truth(_tiles_dir(ws) / tile_id)
        spmap = _load_map(ws, tile_id)
        labels = _majority_labels(spmap.label, gt.classes)
        patchset.save_label_file(out_root / f"{tile_id}.json", tile_id, labels)
        counts = np.bincount(list(labels.values()), minlength=patchset.N_CLASSES)
        print(f"{tile_id}: {len(labels)} regions, per class {counts.tolist()}")
    return 0


def _cmd_build_dataset(args) -> int:
    ws = Path(args.workspace)
    tile_ids = _select_tiles(ws, args.tile)
    cfg = _resolve_config(args, [])
    tiles = {}
    maps = {}
    label_files = []
    for tile_id in tile_ids:
        label_path = ws / "labels" / f"{tile_id}.json"
        if not label_path.is_file():
            raise SystemExit(f"missing labels for {tile_id}: {label_path}")
        tiles[tile_id] = _load_tile(ws, tile_id)
        maps[tile_id] = _load_map(ws, tile_id)
        _, labels = patchset.load_label_file(label_path)
        label_files.append((tile_id, labels))
    out_dir = ws / args.out
    manifest = patchset.build_dataset(tiles, maps, label_files, out_dir)
    write_sidecar(cfg, out_dir / "manifest.jsonl")
    print(f"{len(manifest.entries)} patches, per class {manifest.class_counts}")
    return 0


def _cmd_split(args) -> int:
    ws = Path(args.workspace)
    manifest = patchset.Manifest.load(ws / args.manifest)
    train, test = patchset.split(manifest, args.test_fraction, args.seed)
    base = (ws / args.manifest).parent
    train.save(base / "train.jsonl")
    test.save(base / "test.jsonl")
    print(f"train {len(train.entries)} / test {len(test.entries)} "
          f"(fraction {args.test_fraction}, seed {args.seed})")
    return 0


_TRAIN_FLAGS = ["lr", "momentum", "max_iterations", "batch_size", "seed"]


def _cmd_train_hfcnn(args) -> int:
    ws = Path(args.workspace)
    cfg = _resolve_config(args, _TRAIN_FLAGS)
    manifest = patchset.Manifest.load(ws / args.manifest)
    model = hfcnn.HfcnnModel(seed=cfg.seed)
    history = hfcnn.train(model, manifest, cfg.train_config(),
                          stop_at_accuracy=args.stop_at_accuracy)
    out = ws / args.out
    _ensure_dir(out.parent)
    hfcnn.save_model(model, out)
    write_sidecar(cfg, out)
    tail = history["accuracy"][-10:]
    print(f"{model.iterations} iterations, final loss {history['loss'][-1]:.4f}, "
          f"recent accuracy {float(np.mean(tail)):.3f}")
    return 0


_FOREST_FLAGS = ["scan_window_sizes", "scan_stride", "scan_trees",
                 "scan_max_per_class", "cascade_trees", "cascade_folds",
                 "cascade_max_levels", "cascade_patience", "seed"]


def _cmd_train_forest(args) -> int:
    ws = Path(args.workspace)
    cfg = _resolve_config(args, _FOREST_FLAGS)
    manifest = patchset.Manifest.load(ws / args.manifest)
    batch = patchset.load_batch(manifest, range(len(manifest.entries)))
    model = gcforest.train_gcforest(batch.pixels, batch.labels, cfg.gc_config())
    out = ws / args.out
    _ensure_dir(out.parent)
    gcforest.save_model(model, out)
    write_sidecar(cfg, out)
    oob = [f.oob_accuracy for s in model.scan_stages for f in s.forests]
    accs = ", ".join(f"{a:.3f}" for a in model.level_accuracy)
    print(f"scan OOB {oob}, level accuracy [{accs}], best level {model.best_level}")
    return 0


def _cmd_predict(args) -> int:
    ws = Path(args.workspace)
    for rel in (args.cnn, args.forest):
        if not (ws / rel).is_file():
            raise SystemExit(f"missing model {ws / rel}; train it first")
    cnn = hfcnn.load_model(ws / args.cnn)
    forest = gcforest.load_model(ws / args.forest)
    out_root = _ensure_dir(ws / "predictions")
    for tile_id in _select_tiles(ws, args.tile):
        img = _load_tile(ws, tile_id)
        spmap = _load_map(ws, tile_id)
        stats = superpixel.region_stats(spmap, img)
        pixels = np.stack([
            np.transpose(superpixel.extract_patch(img, r).pixels, (2, 0, 1))
            for r in stats
        ]).astype(np.float32)
        probs_cnn = np.empty((len(stats), patchset.N_CLASSES))
        feats = np.empty((len(stats), hfcnn.FEATURE_DIM))
        probs_forest = np.empty((len(stats), patchset.N_CLASSES))
        vectors = np.empty((len(stats), 4 * patchset.N_CLASSES))
        for start in range(0, len(stats), _CHUNK):
            sl = slice(start, start + _CHUNK)
            p, f = cnn.forward(pixels[sl])
            probs_cnn[sl], feats[sl] = p, f
            pf, vec = gcforest.predict_gcforest(forest, pixels[sl])
            probs_forest[sl], vectors[sl] = pf, vec
        preds = [
            refine.make_prediction(r.id, probs_cnn[i], feats[i],
                                   probs_forest[i], vectors[i], r.mean_nir)
            for i, r in enumerate(stats)
        ]
        refine.save_predictions(preds, out_root / f"{tile_id}.jsonl")
        np.savez(
            out_root / f"{tile_id}.npz",
            region_ids=np.array([r.id for r in stats], dtype=np.int64),
            features=np.stack([p.feature for p in preds]),
            mean_nir=np.array([r.mean_nir for r in stats]),
        )
        counts = np.bincount([int(p.label) for p in preds],
                             minlength=patchset.N_CLASSES)
        print(f"{tile_id}: {len(preds)} regions, per class {counts.tolist()}")
    return 0


_REFINE_FLAGS = ["nir_threshold", "relabel_hops", "relabel_aggregate"]


def _cmd_refine(args) -> int:
    ws = Path(args.workspace)
    cfg = _resolve_config(args, _REFINE_FLAGS)
    pred_root = ws / "predictions"
    mask_root = _ensure_dir(ws / "masks")
    for tile_id in _select_tiles(ws, args.tile):
        spmap = _load_map(ws, tile_id)
        preds = refine.load_predictions(pred_root / f"{tile_id}.jsonl")
        side = np.load(pred_root / f"{tile_id}.npz")
        by_id = {int(r): i for i, r in enumerate(side["region_ids"])}
        preds = [
            dataclasses.replace(
                p,
                feature=side["features"][by_id[p.region_id]],
                mean_nir=float(side["mean_nir"][by_id[p.region_id]]),
            )
            for p in preds
        ]
        graph = superpixel.adjacency(spmap)
        refined = refine.refine(preds, graph, nir_threshold=cfg.nir_threshold,
                                hops=cfg.relabel_hops,
                                aggregate=cfg.relabel_aggregate)
        out = pred_root / f"{tile_id}.refined.jsonl"
        refine.save_predictions(refined, out)
        write_sidecar(cfg, out)
        mask = refine.binary_mask(spmap.label, refined)
        refine.save_mask(mask, mask_root / f"{tile_id}.png")
        changed = sum(1 for p in refined if p.relabeled)
        print(f"{tile_id}: {changed} regions changed, "
              f"{int(mask.mask.sum())} cloud pixels")
    return 0


def _cmd_evaluate(args) -> int:
    ws = Path(args.workspace)
    cfg = _resolve_config(args, ["cirrus_is_cloud", "nir_threshold"])
    report_root = _ensure_dir(ws / "reports")
    flags = {}
    baseline_flags = {}
    for tile_id in _select_tiles(ws, args.tile):
        spmap = _load_map(ws, tile_id)
        gt = synthgen.load_ground_truth(_tiles_dir(ws) / tile_id)
        gt_regions = metrics.pixel_mask_to_regions(
            spmap.label, metrics.gt_cloud_pixels(gt.classes, cfg.cirrus_is_cloud))
        suffix = ".refined.jsonl" if args.refined else ".jsonl"
        preds = refine.load_predictions(ws / "predictions" / f"{tile_id}{suffix}")
        pred_regions = metrics.predicted_cloud_regions(preds, spmap.n_regions)
        flags[tile_id] = (pred_regions, gt_regions)
        if args.baseline:
            img = _load_tile(ws, tile_id)
            stats = superpixel.region_stats(spmap, img)
            mean_nir = np.array([r.mean_nir for r in stats])
            baseline_flags[tile_id] = (
                metrics.nir_baseline(mean_nir, cfg.nir_threshold), gt_regions)
    report = metrics.build_report(flags)
    out = report_root / args.out
    metrics.save_report(report, out,
                        csv_path=out.with_suffix(".csv") if args.csv else None)
    write_sidecar(cfg, out)
    m = report.micro_average
    print(f"pipeline micro P {m.precision:.3f} R {m.recall:.3f} F {m.f_measure:.3f}")
    if args.baseline:
        base = metrics.build_report(baseline_flags)
        metrics.save_report(base, report_root / f"baseline_{args.out}")
        b = base.micro_average
        print(f"baseline micro P {b.precision:.3f} R {b.recall:.3f} F {b.f_measure:.3f}")
    return 0


def _cmd_label_serve(args) -> int:
    from . import labelserver

    server = labelserver.LabelServer(
        Path(args.workspace), host=args.host, port=args.port,
        static_dir=Path(args.static) if args.static else None,
    )
    print(f"serving on http://{args.host}:{server.port}/ (ctrl-c stops)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudspx",
        description="super-pixel cloud detection on RGB+NIR tiles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--workspace", "-w", default=".", help="workspace directory")
        sp.add_argument("--config", default=None, help="pipeline config JSON")
        return sp

    sp = add("synth", _cmd_synth, "generate synthetic tiles with ground truth")
    sp.add_argument("--tiles", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tile-size", type=int, default=256)
    sp.add_argument("--thick-blobs", type=int, default=3)
    sp.add_argument("--cirrus-halos", type=int, default=3)
    sp.add_argument("--buildings", type=int, default=8)

    sp = add("edges", _cmd_edges, "compute and save edge probability maps")
    sp.add_argument("--tile", action="append", default=None)

    sp = add("segment", _cmd_segment, "segment tiles into super-pixels")
    sp.add_argument("--tile", action="append", default=None)
    sp.add_argument("--external-edges", default=None,
                    help="edge map PNG when --edge-detector external")
    _add_config_flags(sp, _SEGMENT_FLAGS)

    sp = add("label-from-gt", _cmd_label_from_gt,
             "derive region labels from synthetic ground truth")
    sp.add_argument("--tile", action="append", default=None)

    sp = add("build-dataset", _cmd_build_dataset, "extract labeled patches")
    sp.add_argument("--tile", action="append", default=None)
    sp.add_argument("--out", default="dataset")

    sp = add("split", _cmd_split, "stratified train/test manifest split")
    sp.add_argument("--manifest", default="dataset/manifest.jsonl")
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-hfcnn", _cmd_train_hfcnn, "train the fusion CNN")
    sp.add_argument("--manifest", default="dataset/train.jsonl")
    sp.add_argument("--out", default="models/hfcnn.bin")
    sp.add_argument("--stop-at-accuracy", type=float, default=None)
    _add_config_flags(sp, _TRAIN_FLAGS)

    sp = add("train-forest", _cmd_train_forest, "train the deep forest")
    sp.add_argument("--manifest", default="dataset/train.jsonl")
    sp.add_argument("--out", default="models/gcforest.bin")
    _add_config_flags(sp, _FOREST_FLAGS)

    sp = add("predict", _cmd_predict, "classify every region of a tile")
    sp.add_argument("--tile", action="append", default=None)
    sp.add_argument("--cnn", default="models/hfcnn.bin")
    sp.add_argument("--forest", default="models/gcforest.bin")

    sp = add("refine", _cmd_refine, "apply NIR and neighborhood refinement")
    sp.add_argument("--tile", action="append", default=None)
    _add_config_flags(sp, _REFINE_FLAGS)

    sp = add("evaluate", _cmd_evaluate, "score predictions against ground truth")
    sp.add_argument("--tile", action="append", default=None)
    sp.add_argument("--out", default="eval.json")
    sp.add_argument("--refined", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--baseline", action="store_true",
                    help="also score the NIR threshold baseline")
    sp.add_argument("--csv", action="store_true")
    _add_config_flags(sp, ["cirrus_is_cloud", "nir_threshold"])

    sp = add("label-serve", _cmd_label_serve, "serve tiles for the annotator")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8765)
    sp.add_argument("--static", default=None, help="directory of built UI assets")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
