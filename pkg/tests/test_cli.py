import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from maskclip import cli, formats
from maskclip.pipeline import EmbeddingTable, PanopticMap


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--seed", 3, "--n-samples", 2, "--out-dir", root) == 0
    return root


def _tree_bytes(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_byte_deterministic(data, tmp_path):
    assert run("gen-data", "--seed", 3, "--n-samples", 2, "--out-dir", tmp_path) == 0
    assert _tree_bytes(tmp_path) == _tree_bytes(data)


def test_gen_data_without_samples_still_writes_table(tmp_path):
    assert run("gen-data", "--seed", 0, "--n-samples", 0, "--out-dir", tmp_path) == 0
    table = EmbeddingTable.load(tmp_path / "table.jsonl")
    assert len(table) == 6
    assert not (tmp_path / "samples").exists()


def test_generated_masks_partition_pixels(data):
    for d in cli.sample_dirs(data):
        gts, _ = formats.read_masks(d / "gt_masks.mcm")
        assert np.array_equal(gts.sum(axis=0), np.ones(gts.shape[1:]))


def _segment(data, sample, out, *extra):
    d = data / sample
    return run("segment", "--image", d / "image.ppm", "--weights", data / "weights.mcw",
               "--table", data / "table.jsonl", "--out", out, *extra)


def test_segment_self_prototype(data, tmp_path):
    proto = data / "prototypes" / "proto_000"
    assert _segment(data, "prototypes/proto_000", tmp_path / "p", "--masks", proto / "gt_masks.mcm") == 0
    names = json.loads((proto / "gt.json").read_text())["categories"]
    scores = json.loads((tmp_path / "p" / "scores.json").read_text())
    got = [scores["categories"][int(np.argmax(r))] for r in scores["scores"]]
    assert got == names


def test_segment_is_byte_reproducible(data, tmp_path):
    for out in ("a", "b"):
        assert _segment(data, "samples/sample_000", tmp_path / out, "--masks",
                        data / "samples" / "sample_000" / "masks.mcm") == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_segment_propose_one_square(data, tmp_path):
    from maskclip.mask_tokens import encode_with_mask_tokens
    from maskclip.pipeline import TableEntry, propose_masks

    img = np.zeros((3, 64, 64))
    img[:, 20:40, 10:30] = 1.0
    formats.write_image(tmp_path / "sq.ppm", img)
    # a table holding the two regions' own features, so labels are distinct by construction
    weights = formats.load_weights(data / "weights.mcw")
    feats, _, _ = encode_with_mask_tokens(img, propose_masks("synthetic", image=img), weights)
    EmbeddingTable([TableEntry("square", True, feats[0]), TableEntry("ground", False, feats[1])]).save(
        tmp_path / "t.jsonl")
    code = run("segment", "--image", tmp_path / "sq.ppm", "--propose", "--weights", data / "weights.mcw",
               "--table", tmp_path / "t.jsonl", "--out", tmp_path / "o")
    assert code == 0
    pan = PanopticMap.load(tmp_path / "o" / "panoptic")
    assert len(pan.segments) == 2
    assert (pan.segment_id[20:40, 10:30] == pan.segment_id[25, 15]).all()


def test_baseline_runs(data, tmp_path):
    d = data / "samples" / "sample_000"
    code = run("baseline", "--image", d / "image.ppm", "--masks", d / "masks.mcm", "--weights",
               data / "weights.mcw", "--table", data / "table.jsonl", "--out", tmp_path / "b")
    assert code == 0 and (tmp_path / "b" / "panoptic.pgm").exists()


def test_eval_prediction_equal_to_ground_truth(data, tmp_path, capsys):
    table = EmbeddingTable.load(data / "table.jsonl")
    for d in cli.sample_dirs(data / "samples"):
        cli.gt_panoptic(d, table).save(tmp_path / d.name / "panoptic", table)
    capsys.readouterr()
    assert run("eval", "--pred", tmp_path, "--gt", data / "samples", "--table", data / "table.jsonl") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["pq"] == 100.0 and rep["miou"] == 1.0 and rep["ap"] == 100.0
    for key in ("pq", "sq", "rq", "pq_th", "pq_st", "miou", "ap", "ap50", "ap75"):
        assert key in rep


def test_flops_prints_ratio(capsys):
    assert run("flops", "--num-masks", 100) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ratio"] >= 10 and 0.1 <= rep["tflops"] <= 0.9


def test_train_with_zero_lr_keeps_params_file(data, tmp_path):
    common = ["--data", data / "samples", "--weights", data / "weights.mcw", "--table", data / "table.jsonl"]
    assert run("train-toy", *common, "--steps", 1, "--lr", 1e-4, "--rma-layers", "4,8", "--out", tmp_path / "a") == 0
    assert run("train-toy", *common, "--steps", 2, "--lr", 0, "--rma", tmp_path / "a" / "rma.mcw",
               "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "rma.mcw").read_bytes() == (tmp_path / "b" / "rma.mcw").read_bytes()
    losses = json.loads((tmp_path / "a" / "losses.json").read_text())
    assert losses["rma_layers"] == [4, 8] and len(losses["losses"]) == 2


def test_errors_are_one_line_with_nonzero_exit(data, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "maskclip.cli", "segment", "--image", tmp_path / "missing.ppm", "--propose",
         "--weights", data / "weights.mcw", "--table", data / "table.jsonl", "--out", tmp_path / "x"],
        capture_output=True, text=True,
    )
    assert proc.returncode != 0
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: segment: ")
    assert not (tmp_path / "x").exists()


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as err:
        run("flops", "--bogus", 1)
    assert err.value.code != 0
