from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from erclm.cli import main
from erclm.pipeline_io import read_results, save_image

TINY = {"n_rounds": 5, "rotations": [0.0], "n_exemplars": 2, "negatives": 2}


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    """Synthetic corpus plus a deliberately tiny trained model."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "faces", "--count", "36", "--seed", "1", "--out", str(root / "corpus")]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--annotations", str(root / "corpus" / "annotations.jsonl"),
                 "--config", str(root / "cfg.json"), "--out", str(root / "model.rclm")]) == 0
    boxes = (root / "corpus" / "boxes.txt").read_text().splitlines()
    (root / "corpus" / "one.txt").write_text(boxes[0] + "\n")
    return root


@pytest.fixture(scope="session")
def aligned(workdir):
    out = workdir / "res.jsonl"
    rc = main(["align", "--model", str(workdir / "model.rclm"), "--boxes", str(workdir / "corpus" / "one.txt"),
               "--max-iter", "200", "--seed", "3", "--out", str(out)])
    return rc, out


def test_train_writes_container_and_sidecar(workdir):
    meta = json.loads((workdir / "model.rclm.json").read_text())
    assert meta["n_modes"] == 6 and meta["config"]["train"]["n_rounds"] == 5


def test_align_then_eval(workdir, aligned):
    rc, res = aligned
    assert rc in (0, 4)
    (rec,) = read_results(res)
    assert rec.image == "images/00000.png"
    if rec.success:
        assert rec.points.shape == (68, 2) and rec.occluded.shape == (68,)
    rep = workdir / "report.json"
    assert main(["eval", "--results", str(res), "--annotations", str(workdir / "corpus" / "annotations.jsonl"),
                 "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert "failure_rate" in report and report["n_images"] == 36
    assert (workdir / "report.ced.csv").read_text().startswith("threshold,fraction")


def test_eval_subset_51(workdir, aligned, tmp_path):
    _, res = aligned
    ann = str(workdir / "corpus" / "annotations.jsonl")
    for subset in ("68", "51"):
        assert main(["eval", "--results", str(res), "--annotations", ann, "--subset", subset,
                     "--out", str(tmp_path / f"r{subset}.json")]) == 0
    r68 = json.loads((tmp_path / "r68.json").read_text())
    r51 = json.loads((tmp_path / "r51.json").read_text())
    assert r51["subset"] == 51 and r68["subset"] == 68
    if r68["per_image"][0] is not None:
        assert r51["per_image"][0] != r68["per_image"][0]


def test_align_repeat_byte_identical(workdir, aligned, tmp_path):
    rc, first = aligned
    again = tmp_path / "again.jsonl"
    assert main(["align", "--model", str(workdir / "model.rclm"), "--boxes", str(workdir / "corpus" / "one.txt"),
                 "--max-iter", "200", "--seed", "3", "--out", str(again)]) == rc
    assert again.read_bytes() == first.read_bytes()


def test_synth_and_eval_repeat_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"s{k}.jsonl"
        assert main(["synth", "--count", "3", "--occlusion-rate", "0.4", "--seed", "5", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert len(lines) == 3 and sum(1 - v for v in json.loads(lines[0])["visible"]) == 27


def test_blank_image_reports_failure(workdir, tmp_path):
    save_image(tmp_path / "blank.png", np.full((256, 256), 128, np.uint8))
    (tmp_path / "boxes.txt").write_text("blank.png 60 60 140 140\n")
    out = tmp_path / "r.jsonl"
    rc = main(["align", "--model", str(workdir / "model.rclm"), "--boxes", str(tmp_path / "boxes.txt"),
               "--max-iter", "100", "--out", str(out)])
    assert rc == 4
    (rec,) = read_results(out)
    assert not rec.success and rec.message


def test_ablate_csv(tmp_path):
    out = tmp_path / "a.csv"
    assert main(["ablate", "--strategy", "greedy", "--count", "2", "--max-iter", "100", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("strategy,budget") and rows[1].startswith("greedy,100,2,")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval", "--no-such-flag"]) == 2
    assert main([]) == 2


def test_missing_files_nonzero(tmp_path):
    assert main(["eval", "--results", str(tmp_path / "nope"), "--annotations", str(tmp_path / "nope2")]) == 3
    assert main(["align", "--model", str(tmp_path / "nope.rclm"), "--boxes", str(tmp_path / "b.txt")]) == 3
    assert main(["align", "--boxes", str(tmp_path / "b.txt")]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "erclm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "align" in proc.stdout
