import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faug.errors import ReportIOError
from faug.evaluation import AblationResult, TransferMatrix
from faug.report import (
    MATRIX_HEADER,
    dumps_json,
    emit_report,
    load_matrix,
    read_csv,
    read_csv_meta,
    to_plain,
)

META = {"master_seed": 7, "config": {"attack": {"epsilon": 16 / 255}}}


def _matrix(rates, unfiltered=None):
    n = rates.shape[0]
    names = [f"m{i}" for i in range(n)]
    return TransferMatrix(names, names, rates, rates if unfiltered is None else unfiltered, np.eye(n, dtype=bool),
                          {"seed": 3, "hook_policy": "faug"})


@pytest.fixture
def matrix():
    return _matrix(np.random.default_rng(0).random((4, 4)), np.random.default_rng(1).random((4, 4)))


def test_json_round_trip(matrix, tmp_path):
    path = emit_report(matrix, "json", tmp_path / "m.json", META)
    assert load_matrix(path) == matrix
    doc = json.loads(path.read_text())
    assert doc["master_seed"] == 7 and doc["config"] == META["config"]


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_json_round_trip_is_exact(n, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    m = _matrix(rng.random((n, n)), rng.random((n, n)))
    path = emit_report(m, "json", tmp_path_factory.mktemp("r") / "m.json")
    back = load_matrix(path)
    assert back.rates.tobytes() == m.rates.tobytes() and back.unfiltered.tobytes() == m.unfiltered.tobytes()


def test_csv_rows_and_meta(matrix, tmp_path):
    path = emit_report(matrix, "csv", tmp_path / "m.csv", META)
    rows = read_csv(path)
    assert len(rows) == 16
    assert tuple(rows[0]) == MATRIX_HEADER
    assert read_csv_meta(path) == META
    assert float(rows[1]["rate"]) == matrix.rates[0, 1]
    assert [r["white_box"] for r in rows[:4]] == ["1", "0", "0", "0"]
    assert float(rows[5]["unfiltered_rate"]) == matrix.unfiltered[1, 1]


def test_xy_pairs(tmp_path):
    path = emit_report([(0.0, 0.5), (0.1, 0.625)], "csv", tmp_path / "xy.csv", META)
    assert read_csv(path) == [{"x": "0.0", "y": "0.5"}, {"x": "0.1", "y": "0.625"}]


def test_ablation_csv_is_plot_data(tmp_path):
    res = AblationResult("sigma", [0.0, 0.3], [{}, {}], [0.4, 0.5], 0.3, "cnn_a")
    rows = read_csv(emit_report(res, "csv", tmp_path / "a.csv"))
    assert [(r["x"], float(r["y"])) for r in rows] == [("0.0", 0.4), ("0.3", 0.5)]


def test_unknown_format(matrix, tmp_path):
    with pytest.raises(ReportIOError):
        emit_report(matrix, "xml", tmp_path / "m.xml")


def test_no_csv_layout(tmp_path):
    with pytest.raises(ReportIOError):
        emit_report({"a": 1}, "csv", tmp_path / "d.csv")


def test_unwritable_path(matrix, tmp_path):
    (tmp_path / "file").write_text("")
    with pytest.raises(ReportIOError):
        emit_report(matrix, "json", tmp_path / "file" / "m.json")


def test_to_plain_converts_numpy():
    out = to_plain({1: np.float32(0.5), "b": (np.int64(2), np.bool_(True)), "c": np.arange(2)})
    assert out == {"1": 0.5, "b": [2, True], "c": [0, 1]}
    assert dumps_json({"x": float("nan")}).strip().endswith("}")
