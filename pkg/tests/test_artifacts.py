import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from syncsampler import artifacts
from syncsampler.experiments import ExperimentReport, MetricSeries


def test_floats_are_written_round_trippable(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5e17, np.float64(np.pi)]
    path = artifacts.write_csv(tmp_path / "a.csv", ["v"], [[v] for v in vals])
    rows = artifacts.read_csv(path)
    assert rows[0] == ["v"]
    assert [float(r[0]) for r in rows[1:]] == [float(v) for v in vals]


def test_cell_formatting_of_non_floats(tmp_path):
    path = artifacts.write_csv(tmp_path / "b.csv", ["a", "b", "c", "d"],
                               [[True, None, 3, "x,y"], [np.bool_(False), 1.0, -1, ""]])
    assert artifacts.read_csv(path)[1:] == [["true", "", "3", "x,y"], ["false", "1.0", "-1", ""]]
    assert b"\r" not in open(path, "rb").read()


def test_metric_csv_header_and_rows(tmp_path):
    rep = ExperimentReport("exp", {}, series=[MetricSeries("err", "v", 7, [(0, 900.0, 0.5)])])
    rows = artifacts.read_csv(artifacts.write_metrics_csv(rep, tmp_path / "m.csv"))
    assert tuple(rows[0]) == artifacts.METRIC_HEADER
    assert rows[1] == ["exp", "v", "7", "0", "900.0", "err", "0.5"]


def test_table_columns_are_union_in_first_seen_order(tmp_path):
    table = [{"a": 1, "b": 2.0}, {"a": 3, "c": "z"}]
    rows = artifacts.read_csv(artifacts.write_table_csv(table, tmp_path / "t.csv"))
    assert rows == [["a", "b", "c"], ["1", "2.0", ""], ["3", "", "z"]]


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, rgb):
    path = str(tmp_path_factory.mktemp("ppm") / "x.ppm")
    artifacts.write_ppm(path, rgb)
    assert np.array_equal(artifacts.read_ppm(path), rgb)


def test_read_ppm_rejects_other_formats(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        artifacts.read_ppm(str(p))


def test_normalize_examples():
    img, lo, hi = artifacts.normalize(np.array([[-1.0, 0.0, 1.0]]))
    assert img.tolist() == [[0, 128, 255]] and (lo, hi) == (-1.0, 1.0)
    flat, lo, hi = artifacts.normalize(np.full((2, 2), 4.0))
    assert not flat.any() and lo == hi == 4.0


def test_as_image_layouts():
    assert artifacts.as_image(np.arange(5.0)).shape == (1, 5, 3)
    assert artifacts.as_image(np.zeros((4, 6))).shape == (4, 6, 3)
    assert artifacts.as_image(np.zeros((4, 6, 3))).shape == (4, 6, 3)
    grey = artifacts.as_image(np.arange(8.0).reshape(2, 2, 2))
    assert np.array_equal(grey[..., 0], grey[..., 2])
    assert np.array_equal(grey[..., 0], [[0.0, 2.0], [4.0, 6.0]])


def test_image_sidecar_records_range(tmp_path):
    arr = np.linspace(-2, 3, 12).reshape(3, 4)
    ppm, side = artifacts.write_image(str(tmp_path / "img"), arr)
    meta = json.load(open(side))
    assert meta == {"min": -2.0, "max": 3.0, "mapping": "linear", "shape": [3, 4]}
    px = artifacts.read_ppm(ppm)[..., 0].astype(float)
    # undo the mapping: every pixel is within half a grey level of the data
    back = meta["min"] + px / 255 * (meta["max"] - meta["min"])
    assert np.max(np.abs(back - arr)) <= 0.5 / 255 * 5 + 1e-12


def test_manifest_lists_checksums_and_status(tmp_path):
    (tmp_path / "a.txt").write_text("alpha")
    os.makedirs(tmp_path / "sub")
    (tmp_path / "sub" / "b.txt").write_text("beta")
    (tmp_path / "trace.csv").write_text("changes every run")
    path = artifacts.write_manifest(str(tmp_path))
    status, sums = artifacts.read_manifest(path)
    assert status == "complete"
    assert set(sums) == {"a.txt", "sub/b.txt", "trace.csv"}
    assert sums["a.txt"] == artifacts.sha256_file(str(tmp_path / "a.txt"))
    assert sums["trace.csv"] == "volatile"
    # rewriting does not checksum the manifest itself
    assert artifacts.read_manifest(artifacts.write_manifest(str(tmp_path)))[1] == sums


def test_partial_manifest_keeps_error(tmp_path):
    path = artifacts.write_manifest(str(tmp_path), complete=False, error="Boom: bad")
    text = open(path).read().splitlines()
    assert text[:2] == ["status: partial", "error: Boom: bad"]
    assert artifacts.read_manifest(path) == ("partial", {})
