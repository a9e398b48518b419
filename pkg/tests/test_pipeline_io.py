from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erclm.appearance import AdaboostDetector
from erclm.ensemble import ModelEnsemble
from erclm.errors import (ChecksumError, ContainerError, DimensionError, ParseError,
                          TruncatedContainerError, VersionError)
from erclm.pipeline_io import (MAGIC, AnnotationRecord, FaceBox, ResultRecord, annotation_line,
                               format_face_boxes, format_pts, load_annotations, load_image,
                               load_model, load_model_file, parse_face_boxes, parse_pts, read_results,
                               save_image, save_model, save_model_file, write_results)
from erclm.shape_model import SimilarityTransform


def _detector(rng, landmark, tag=-1, rounds=4):
    return AdaboostDetector(rng.integers(0, 1796, rounds), rng.normal(size=(rounds, 511)),
                            rng.random(rounds), landmark, tag, rng.random(rounds) * 0.5)


def _ensemble(mode, n_poses=5, n_expr=2, seed=0):
    rng = np.random.default_rng(seed)
    modes, detectors = [], {}
    for p in range(n_poses):
        for e in range(n_expr):
            keys = [[(p, i, -1)] for i in range(mode.pdm.n_points)]
            modes.append(dataclasses.replace(
                mode, pose=p, expression=e, detector_keys=keys,
                box_prior=SimilarityTransform(1.0 + 0.1 * p, 0.01 * e, np.array([p, -e], float))))
        for i in range(mode.pdm.n_points):
            detectors[(p, i, -1)] = _detector(rng, i)
    return ModelEnsemble(modes, detectors, {"seed": seed, "note": "test"})


@pytest.fixture(scope="module")
def small_ensemble(frontal_mode):
    return _ensemble(frontal_mode, n_poses=2, n_expr=1)


def _assert_same(a: ModelEnsemble, b: ModelEnsemble):
    assert a.n_modes == b.n_modes and a.config == b.config
    for ma, mb in zip(a.modes, b.modes):
        assert ma.mode_id == mb.mode_id and ma.scheme == mb.scheme
        assert ma.search_radius == mb.search_radius and ma.detector_keys == mb.detector_keys
        pa, pb = ma.pdm, mb.pdm
        for name in ("mean", "basis", "eigenvalues", "landmark_cov", "kinds"):
            x, y = getattr(pa, name), getattr(pb, name)
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes(), name
        assert pa.anchors == pb.anchors and pa.contours == pb.contours
        assert ma.dense.weights.tobytes() == mb.dense.weights.tobytes()
        assert ma.dense.group.tobytes() == mb.dense.group.tobytes()
        assert ma.exemplars.centers.tobytes() == mb.exemplars.centers.tobytes()
        assert ma.exemplars.radius == mb.exemplars.radius
        assert ma.box_prior.scale == mb.box_prior.scale and ma.box_prior.angle == mb.box_prior.angle
        assert np.asarray(ma.box_prior.translation).tobytes() == np.asarray(mb.box_prior.translation).tobytes()
    assert sorted(a.detectors) == sorted(b.detectors)
    for k, da in a.detectors.items():
        db = b.detectors[k]
        for name in ("positions", "luts", "alphas", "errors"):
            assert getattr(da, name).tobytes() == getattr(db, name).tobytes()
        assert (da.landmark, da.tag) == (db.landmark, db.tag)


# ---------------------------------------------------------------------------
# container


def test_container_round_trip_bit_exact(small_ensemble):
    data = save_model(small_ensemble)
    assert data.startswith(MAGIC)
    back = load_model(data)
    _assert_same(small_ensemble, back)
    assert save_model(back) == data


def test_ten_modes_reported(frontal_mode):
    ens = load_model(save_model(_ensemble(frontal_mode, 5, 2)))
    assert ens.n_modes == 10
    assert ens.poses == [0, 1, 2, 3, 4]
    assert all(ens.expressions(p) == [0, 1] for p in ens.poses)
    assert ens.has_detectors()


@pytest.mark.parametrize("cut", [3, 7, 40, -50, -1])
def test_truncated_container_rejected(small_ensemble, cut):
    data = save_model(small_ensemble)
    with pytest.raises(TruncatedContainerError):
        load_model(data[:cut])


def test_checksum_error(small_ensemble):
    data = bytearray(save_model(small_ensemble))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(ContainerError):
        load_model(bytes(data))
    # flipping a byte inside the meta payload specifically trips the checksum
    raw = bytes(save_model(small_ensemble))
    i = raw.index(b'"n_poses"')
    bad = bytearray(raw)
    bad[i + 1] ^= 0x01
    with pytest.raises(ChecksumError):
        load_model(bytes(bad))


def test_version_and_magic(small_ensemble):
    data = save_model(small_ensemble)
    with pytest.raises(VersionError):
        load_model(data[:5] + struct.pack("<H", 99) + data[7:])
    with pytest.raises(ContainerError):
        load_model(b"XXXXX" + data[5:])


def test_file_and_sidecar(tmp_path, small_ensemble):
    path = tmp_path / "m.rclm"
    save_model_file(small_ensemble, path)
    _assert_same(small_ensemble, load_model_file(path))
    meta = json.loads((tmp_path / "m.rclm.json").read_text())
    assert meta["n_modes"] == 2 and meta["modes"][0]["n_points"] == 68


def test_inconsistent_dimensions_rejected(frontal_mode):
    mode = frontal_mode
    pdm = dataclasses.replace(mode.pdm, eigenvalues=mode.pdm.eigenvalues[:-1])
    broken = dataclasses.replace(mode, dense=dataclasses.replace(mode.dense, base=pdm))
    with pytest.raises(DimensionError):
        load_model(save_model(ModelEnsemble([broken])))


# ---------------------------------------------------------------------------
# annotations


def _pts_text(points, declared=None):
    body = "\n".join(f"{x} {y}" for x, y in points)
    return f"version: 1\nn_points: {declared or len(points)}\n{{\n{body}\n}}\n"


def test_parse_pts_68():
    pts = np.arange(136, dtype=float).reshape(68, 2)
    out = parse_pts(_pts_text(pts))
    assert out.shape == (68, 2)
    np.testing.assert_array_equal(out, pts)


def test_parse_pts_count_mismatch():
    pts = np.zeros((67, 2))
    with pytest.raises(ParseError, match="declared 68"):
        parse_pts(_pts_text(pts, declared=68))


def test_parse_pts_malformed_line_number():
    text = "version: 1\nn_points: 2\n{\n1 2\n3 x\n}\n"
    with pytest.raises(ParseError) as info:
        parse_pts(text)
    assert info.value.line == 5


@pytest.mark.parametrize("text", ["n_points: 1\n{\n1 2\n}\n", "version: 1\nn_points: 1\n1 2\n",
                                  "version: 1\nn_points: 1\n{\n1 2\n", "version: 1\nn_points: 1\n{\nnan 2\n}\n",
                                  "version: 1\nn_points: 1\n{\n1 2 3\n}\n"])
def test_parse_pts_rejects(text):
    with pytest.raises(ParseError):
        parse_pts(text)


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=70))
@settings(max_examples=50, deadline=None)
def test_pts_full_precision(points):
    back = parse_pts(format_pts(points))
    np.testing.assert_array_equal(back, np.array(points, dtype=float).reshape(-1, 2))


def test_annotation_sizes():
    AnnotationRecord("a.png", np.zeros((40, 2)))
    AnnotationRecord("a.png", np.zeros((29, 2)))
    with pytest.raises(DimensionError):
        AnnotationRecord("a.png", np.zeros((67, 2)))


def test_annotation_manifest(tmp_path):
    pts = np.random.default_rng(0).random((68, 2)) * 100
    (tmp_path / "a.pts").write_text(format_pts(pts))
    rec = AnnotationRecord("b.png", pts, np.zeros(68), 1, 0, (1.0, 2.0, 3.0, 4.0))
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(json.dumps({"image": "a.png", "pts": "a.pts"}) + "\n" + annotation_line(rec) + "\n")
    a, b = load_annotations(manifest)
    np.testing.assert_array_equal(a.points, pts)
    assert a.image == str(tmp_path / "a.png")
    np.testing.assert_array_equal(b.points, pts)
    assert (b.pose, b.expression, b.box) == (1, 0, (1.0, 2.0, 3.0, 4.0))
    manifest.write_text('{"image": "a.png", "points": [[0, 0]]}\n')
    with pytest.raises(ParseError):
        load_annotations(manifest)


# ---------------------------------------------------------------------------
# face boxes


def test_box_round_trip():
    boxes = [FaceBox("img one.png", 1.5, 2.25, 100.0, 120.125)]
    assert parse_face_boxes(format_face_boxes(boxes)) == boxes


def test_box_zero_width_rejected():
    with pytest.raises(ParseError, match="positive width"):
        parse_face_boxes("a.png 0 0 0 10\n")
    with pytest.raises(ParseError):
        parse_face_boxes("a.png 0 0 -5 10\n")
    with pytest.raises(ParseError):
        parse_face_boxes("a.png 0 0 10\n")


def test_multiple_faces_in_order():
    text = "a.png 0 0 10 10\nb.png 1 1 5 5\n# comment\na.png 50 50 20 20\n"
    boxes = parse_face_boxes(text)
    assert [b.image for b in boxes] == ["a.png", "b.png", "a.png"]
    assert [b.rect for b in boxes if b.image == "a.png"] == [(0, 0, 10, 10), (50, 50, 20, 20)]


# ---------------------------------------------------------------------------
# images and results


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (20, 30), dtype=np.uint8)
    save_image(tmp_path / "x.png", img)
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)


def test_color_image_luma(tmp_path):
    from PIL import Image

    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    assert load_image(tmp_path / "c.png")[0, 0] == 76  # 0.299 * 255


def test_result_record_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ok = ResultRecord("a.png", True, rng.normal(size=(68, 2)) * 1e3, rng.integers(0, 2, 68).astype(np.uint8),
                      (1, 0), 0.123456789012345, 40, 1.0 / 3.0,
                      [{"mode": [2, 1], "points": rng.normal(size=(68, 2)).tolist()}], (1.0, 2.0, 3.0, 4.0), "")
    bad = ResultRecord("b.png", False, box=(0.0, 0.0, 1.0, 1.0), message="no face")
    path = tmp_path / "r.jsonl"
    write_results(path, [ok, bad])
    back = read_results(path)
    assert back == [ok, bad]
    np.testing.assert_array_equal(back[0].points, ok.points)
    assert back[0].d == ok.d and back[0].E == ok.E
    assert back[1].d == float("inf")
