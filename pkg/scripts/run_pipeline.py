#!/usr/bin/env python3
"""Run the full cloud-detection recipe on freshly generated tiles.

Builds a workspace, renders synthetic tiles, segments them, trains both
classifiers on the first tiles, then predicts, refines and scores the
held-out remainder. The workspace is left on disk for inspection.

    python3 scripts/run_pipeline.py --workspace /tmp/clouds --tiles 8
"""

import argparse
import json
import sys
import time
from pathlib import Path

from cloudspx import cli


def stage(name, argv):
    start = time.perf_counter()
    cli.main([str(a) for a in argv])
    print(f"== {name} done in {time.perf_counter() - start:.1f}s", flush=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workspace", required=True, type=Path)
    ap.add_argument("--tiles", type=int, default=8)
    ap.add_argument("--test-tiles", type=int, default=2,
                    help="how many trailing tiles are held out")
    ap.add_argument("--tile-size", type=int, default=256)
    ap.add_argument("--superpixels", type=int, default=160)
    ap.add_argument("--cnn-iterations", type=int, default=2500)
    ap.add_argument("--scan-trees", type=int, default=30)
    ap.add_argument("--cascade-trees", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.test_tiles >= args.tiles:
        ap.error("need at least one training tile")
    ws = args.workspace
    n_train = args.tiles - args.test_tiles
    train_ids = [f"t{i:03d}" for i in range(n_train)]
    test_ids = [f"t{i:03d}" for i in range(n_train, args.tiles)]

    stage("synth", ["synth", "--workspace", ws, "--tiles", args.tiles,
                    "--tile-size", args.tile_size, "--thick-blobs", 3,
                    "--cirrus-halos", 2, "--buildings", 6,
                    "--seed", args.seed])
    stage("edges", ["edges", "--workspace", ws])
    stage("segment", ["segment", "--workspace", ws,
                      "--n-superpixels", args.superpixels,
                      "--iterations", 10])
    stage("label-from-gt", ["label-from-gt", "--workspace", ws])

    train_sel = []
    for t in train_ids:
        train_sel += ["--tile", t]
    stage("build-dataset", ["build-dataset", "--workspace", ws, *train_sel])
    stage("train-hfcnn", ["train-hfcnn", "--workspace", ws,
                          "--manifest", "dataset/manifest.jsonl",
                          "--max-iterations", args.cnn_iterations,
                          "--stop-at-accuracy", 0.995, "--seed", args.seed])
    stage("train-forest", ["train-forest", "--workspace", ws,
                           "--manifest", "dataset/manifest.jsonl",
                           "--scan-trees", args.scan_trees,
                           "--cascade-trees", args.cascade_trees,
                           "--seed", args.seed])

    test_sel = []
    for t in test_ids:
        test_sel += ["--tile", t]
    stage("predict", ["predict", "--workspace", ws, *test_sel])
    stage("refine", ["refine", "--workspace", ws, *test_sel])
    stage("evaluate", ["evaluate", "--workspace", ws, *test_sel,
                       "--baseline", "--csv", "--out", "pipeline.json"])

    report = json.loads((ws / "reports" / "pipeline.json").read_text())
    micro = report["micro_average"]
    print(f"\nheld out {', '.join(test_ids)}: "
          f"P {micro['precision']:.3f} R {micro['recall']:.3f} "
          f"F {micro['f_measure']:.3f}")
    print(f"masks: {ws / 'masks'}")
    print(f"report: {ws / 'reports' / 'pipeline.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
