"""Config merging plus a small end-to-end run of every CLI command."""

import json

import numpy as np
import pytest

from cloudspx import cli, gcforest, hfcnn, metrics, patchset, refine, superpixel
from cloudspx.config import PipelineConfig, write_sidecar


# -- configuration ------------------------------------------------------------


def test_defaults_round_trip(tmp_path):
    cfg = PipelineConfig()
    cfg.save(tmp_path / "c.json")
    back = PipelineConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert isinstance(back.scan_window_sizes, tuple)


def test_merged_applies_only_non_none():
    cfg = PipelineConfig()
    out = cfg.merged({"n_superpixels": 42, "lr": None, "seed": 7})
    assert out.n_superpixels == 42
    assert out.lr == cfg.lr
    assert out.seed == 7
    assert cfg.n_superpixels == 600  # original untouched


def test_merged_rejects_unknown_key():
    with pytest.raises(KeyError):
        PipelineConfig().merged({"n_superpixelz": 5})


def test_resolve_precedence(tmp_path):
    path = tmp_path / "file.json"
    PipelineConfig(n_superpixels=300, iterations=4).save(path)
    cfg = PipelineConfig.resolve(path, {"n_superpixels": 200, "iterations": None})
    assert cfg.n_superpixels == 200  # flag beats file
    assert cfg.iterations == 4      # file beats default
    assert cfg.compactness == 10.0  # default survives


def test_stage_views_map_fields():
    cfg = PipelineConfig(lr=0.01, momentum=0.5, max_iterations=12, batch_size=8,
                         seed=3, scan_trees=5, cascade_folds=2, cascade_trees=9)
    tc = cfg.train_config()
    assert (tc.lr, tc.momentum, tc.max_iterations, tc.batch_size, tc.seed) == \
        (0.01, 0.5, 12, 8, 3)
    gc = cfg.gc_config()
    assert gc.scan.n_trees == 5
    assert gc.cascade.n_folds == 2
    assert gc.cascade.n_trees == 9
    assert gc.seed == 3


def test_write_sidecar_names_file(tmp_path):
    artifact = tmp_path / "model.bin"
    artifact.write_bytes(b"x")
    write_sidecar(PipelineConfig(seed=9), artifact)
    side = tmp_path / "model.bin.config.json"
    assert side.is_file()
    assert json.loads(side.read_text())["seed"] == 9


# -- CLI end to end -----------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run the whole pipeline once on three small synthetic tiles."""
    ws = tmp_path_factory.mktemp("ws")
    w = str(ws)

    def run(*argv):
        assert cli.main(list(argv)) == 0

    run("synth", "-w", w, "--tiles", "3", "--tile-size", "128",
        "--thick-blobs", "2", "--cirrus-halos", "2", "--buildings", "4")
    run("edges", "-w", w)
    run("segment", "-w", w, "--n-superpixels", "40", "--iterations", "2")
    run("label-from-gt", "-w", w)
    run("build-dataset", "-w", w)
    run("split", "-w", w, "--test-fraction", "0.25", "--seed", "1")
    run("train-hfcnn", "-w", w, "--max-iterations", "8", "--batch-size", "16")
    run("train-forest", "-w", w, "--scan-trees", "3", "--scan-max-per-class", "300",
        "--cascade-trees", "5", "--cascade-folds", "2", "--cascade-max-levels", "1")
    run("predict", "-w", w)
    run("refine", "-w", w)
    run("evaluate", "-w", w, "--baseline", "--csv")
    return ws


def test_cli_writes_expected_artifacts(workspace):
    ws = workspace
    for tid in ("t000", "t001", "t002"):
        assert (ws / "tiles" / tid / "meta.json").is_file()
        assert (ws / "tiles" / tid / "gt.png").is_file()
        assert (ws / "edges" / f"{tid}.png").is_file()
        assert (ws / "maps" / f"{tid}.spxm").is_file()
        assert (ws / "labels" / f"{tid}.json").is_file()
        assert (ws / "predictions" / f"{tid}.jsonl").is_file()
        assert (ws / "predictions" / f"{tid}.npz").is_file()
        assert (ws / "predictions" / f"{tid}.refined.jsonl").is_file()
        assert (ws / "masks" / f"{tid}.png").is_file()
    assert (ws / "dataset" / "manifest.jsonl").is_file()
    assert (ws / "dataset" / "train.jsonl").is_file()
    assert (ws / "dataset" / "test.jsonl").is_file()
    assert (ws / "models" / "hfcnn.bin").is_file()
    assert (ws / "models" / "gcforest.bin").is_file()


def test_cli_sidecars_record_flags(workspace):
    side = json.loads((workspace / "maps" / "t000.spxm.config.json").read_text())
    assert side["n_superpixels"] == 40
    assert side["iterations"] == 2
    side = json.loads((workspace / "models" / "gcforest.bin.config.json").read_text())
    assert side["cascade_folds"] == 2
    assert side["scan_trees"] == 3


def test_cli_models_load_and_predict(workspace):
    cnn = hfcnn.load_model(workspace / "models" / "hfcnn.bin")
    assert cnn.iterations == 8
    forest = gcforest.load_model(workspace / "models" / "gcforest.bin")
    probe = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    probs, _ = gcforest.predict_gcforest(forest, probe)
    assert probs.shape == (2, 4)


def test_cli_predictions_cover_all_regions(workspace):
    spmap = superpixel.load_map(workspace / "maps" / "t000.spxm")
    preds = refine.load_predictions(workspace / "predictions" / "t000.jsonl")
    assert [p.region_id for p in preds] == list(range(spmap.n_regions))
    refined = refine.load_predictions(
        workspace / "predictions" / "t000.refined.jsonl")
    assert len(refined) == len(preds)


def test_cli_report_loads(workspace):
    report = metrics.load_report(workspace / "reports" / "eval.json")
    assert set(report.per_tile) == {"t000", "t001", "t002"}
    m = report.micro_average
    assert 0.0 <= m.precision <= 1.0 and 0.0 <= m.recall <= 1.0
    assert (workspace / "reports" / "eval.csv").is_file()
    base = metrics.load_report(workspace / "reports" / "baseline_eval.json")
    assert set(base.per_tile) == {"t000", "t001", "t002"}


def test_cli_unrefined_evaluation(workspace):
    assert cli.main(["evaluate", "-w", str(workspace), "--no-refined",
                     "--out", "raw.json"]) == 0
    report = metrics.load_report(workspace / "reports" / "raw.json")
    assert set(report.per_tile) == {"t000", "t001", "t002"}


def test_cli_segment_with_external_edges(workspace):
    assert cli.main(["segment", "-w", str(workspace), "--tile", "t000",
                     "--edge-detector", "external",
                     "--n-superpixels", "30", "--iterations", "1"]) == 0
    spmap = superpixel.load_map(workspace / "maps" / "t000.spxm")
    assert spmap.n_regions <= 30
    # restore the standard segmentation for any later assertions
    assert cli.main(["segment", "-w", str(workspace), "--tile", "t000",
                     "--n-superpixels", "40", "--iterations", "2"]) == 0


def test_cli_dataset_matches_label_files(workspace):
    manifest = patchset.Manifest.load(workspace / "dataset" / "manifest.jsonl")
    tile_id, labels = patchset.load_label_file(workspace / "labels" / "t000.json")
    assert tile_id == "t000"
    entries = [e for e in manifest.entries if e.tile_id == "t000"]
    assert {e.region_id for e in entries} == set(labels)
    for e in entries:
        assert e.label == labels[e.region_id]


def test_cli_errors_on_missing_prerequisites(tmp_path):
    bare = str(tmp_path / "empty_ws")
    with pytest.raises(SystemExit):
        cli.main(["edges", "-w", bare])
    assert cli.main(["synth", "-w", bare, "--tiles", "1", "--tile-size", "96",
                     "--thick-blobs", "1", "--cirrus-halos", "1",
                     "--buildings", "2"]) == 0
    with pytest.raises(SystemExit):
        cli.main(["predict", "-w", bare])  # no segmentation yet
    with pytest.raises(SystemExit):
        cli.main(["build-dataset", "-w", bare])  # no labels yet
