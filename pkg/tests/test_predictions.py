import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from retinastack.predictions import PredictionError, PredictionMatrix


def test_validation():
    with pytest.raises(PredictionError):
        PredictionMatrix("m", ["a"], ["x"], [[1.5]])
    with pytest.raises(PredictionError):
        PredictionMatrix("m", ["a", "a"], ["x"], [[0.1], [0.2]])
    with pytest.raises(PredictionError):
        PredictionMatrix("m", ["a"], ["x", "y"], [[0.1]])
    p = PredictionMatrix("m", ["a", "b"], ["x"], [0.2, 0.3])
    assert p.values.shape == (2, 1)
    with pytest.raises(ValueError):
        p.values[0, 0] = 0.5


def test_rows_and_select():
    p = PredictionMatrix("m", ["a", "b", "c"], ["x", "y"], [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    assert p.rows(["c", "a"]).tolist() == [[0.5, 0.6], [0.1, 0.2]]
    assert p.column("y").tolist() == [0.2, 0.4, 0.6]
    assert p.select(["b"]).sample_ids == ("b",)
    with pytest.raises(PredictionError, match="missing"):
        p.rows(["q"])
    with pytest.raises(PredictionError):
        p.column("z")


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_csv_roundtrip_exact(vals):
    p = PredictionMatrix("m", [f"s{i}" for i in range(len(vals))], ["x"], np.array(vals)[:, None])
    back = PredictionMatrix.from_csv(p.to_csv(), "m")
    assert np.array_equal(back.values, p.values)
    assert back.sample_ids == p.sample_ids


def test_read_uses_file_stem(tmp_path):
    p = PredictionMatrix("ignored", ["a"], ["x"], [[0.25]])
    p.write(tmp_path / "detector-a-f0.csv")
    assert PredictionMatrix.read(tmp_path / "detector-a-f0.csv").model_id == "detector-a-f0"
    with pytest.raises(PredictionError):
        PredictionMatrix.from_csv("id,x\na,0.1\n", "m")
