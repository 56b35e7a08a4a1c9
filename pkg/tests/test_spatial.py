import json

import numpy as np
import pytest

import oracles
from deepauto import spatial
from deepauto.dataprep import KpiSeries
from deepauto.errors import DataError, ShapeError


def series(cell, load, ue=None, step=900):
    load = np.asarray(load, dtype=np.float64)
    if ue is None:
        ue = np.zeros_like(load)
    values = np.stack([load, np.asarray(ue, dtype=np.float64)], axis=1)
    return KpiSeries(cell_id=cell, start_ts=0, step_seconds=step,
                     channels=["load", "ue"], values=values,
                     missing_mask=np.zeros_like(values, dtype=bool))


def test_identical_series_weight_one():
    x = np.sin(np.linspace(0, 10, 50)) * 0.3 + 0.5
    g = spatial.build_graph({"a": series("a", x), "b": series("b", x)}, "load")
    assert g.weight("a", "b") == pytest.approx(1.0, abs=1e-12)
    assert g.weight("a", "a") == 0.0  # diagonal forced to zero


def test_negated_series_weight_one():
    """Absolute correlation: perfectly anti-correlated cells are neighbors."""
    x = np.sin(np.linspace(0, 10, 50)) * 0.3 + 0.5
    g = spatial.build_graph({"a": series("a", x), "b": series("b", 1 - x)}, "load")
    assert g.weight("a", "b") == pytest.approx(1.0, abs=1e-12)


def test_weights_match_pearson_oracle():
    rng = np.random.default_rng(3)
    data = {c: rng.uniform(size=40) for c in ("a", "b", "c", "d")}
    g = spatial.build_graph({c: series(c, x) for c, x in data.items()}, "load")
    for i, a in enumerate(g.cells):
        for j, b in enumerate(g.cells):
            if i == j:
                continue
            expected = abs(oracles.pearson_scalar(list(data[a]), list(data[b])))
            assert g.weight(a, b) == pytest.approx(expected, abs=1e-12)
    np.testing.assert_array_equal(g.weights, g.weights.T)


def test_zero_variance_cell_gets_zero_weights():
    x = np.sin(np.linspace(0, 10, 30))
    g = spatial.build_graph(
        {"a": series("a", x), "flat": series("flat", np.full(30, 0.4))}, "load")
    assert g.weight("a", "flat") == 0.0


def test_train_range_limits_the_slice():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=60)
    y = x.copy()
    y[40:] = rng.uniform(size=20)  # diverge only after the training cut
    full = spatial.build_graph({"a": series("a", x), "b": series("b", y)}, "load")
    cut = spatial.build_graph({"a": series("a", x), "b": series("b", y)},
                              "load", train_range=(0, 40))
    assert cut.weight("a", "b") == pytest.approx(1.0, abs=1e-12)
    assert full.weight("a", "b") < 1.0


def test_build_graph_errors():
    x = np.arange(10.0)
    with pytest.raises(DataError):
        spatial.build_graph({"a": series("a", x)}, "load")
    with pytest.raises(ShapeError):
        spatial.build_graph({"a": series("a", x),
                             "b": series("b", np.arange(12.0))}, "load")


def test_topk_ordering_and_ties():
    cells = ["A", "B", "C", "D"]
    w = np.zeros((4, 4))
    # A's row: B and D tie at 0.8, C at 0.9
    pairs = {("A", "C"): 0.9, ("A", "B"): 0.8, ("A", "D"): 0.8, ("B", "C"): 0.1}
    for (a, b), v in pairs.items():
        i, j = cells.index(a), cells.index(b)
        w[i, j] = w[j, i] = v
    g = spatial.SpatialGraph(cells=cells, weights=w)
    assert spatial.topk_neighbors(g, "A", 3) == ["C", "B", "D"]
    assert spatial.topk_neighbors(g, "A", 2) == ["C", "B"]  # tie -> lexicographic
    assert spatial.topk_neighbors(g, "A", 0) == []
    assert spatial.topk_neighbors(g, "A", 99) == ["C", "B", "D"]  # k > available
    with pytest.raises(ShapeError):
        spatial.topk_neighbors(g, "A", -1)
    with pytest.raises(DataError):
        spatial.topk_neighbors(g, "nope", 1)


def test_augment_inputs_bit_exact():
    rng = np.random.default_rng(7)
    a = series("a", rng.uniform(size=20), ue=rng.integers(0, 100, 20))
    b = series("b", rng.uniform(size=20), ue=rng.integers(0, 100, 20))
    c = series("c", rng.uniform(size=20), ue=rng.integers(0, 100, 20))
    out = spatial.augment_inputs(a, [b, c])
    assert out.channels == ["load", "ue", "nb1_load", "nb1_ue", "nb2_load", "nb2_ue"]
    assert out.values.shape == (20, 6)
    assert out.values[:, 0:2].tobytes() == a.values.tobytes()
    assert out.values[:, 2:4].tobytes() == b.values.tobytes()
    assert out.values[:, 4:6].tobytes() == c.values.tobytes()
    assert out.cell_id == "a" and out.step_seconds == a.step_seconds


def test_augment_length_mismatch():
    a = series("a", np.arange(10.0))
    b = series("b", np.arange(11.0))
    with pytest.raises(ShapeError):
        spatial.augment_inputs(a, [b])


def test_graph_json_roundtrip():
    x = np.sin(np.linspace(0, 10, 30)) * 0.2 + 0.5
    g = spatial.build_graph(
        {"a": series("a", x), "b": series("b", x),
         "flat": series("flat", np.full(30, 0.4))}, "load")
    adj = json.loads(g.to_json())
    assert set(adj) == {"a", "b", "flat"}
    assert adj["a"]["b"] == pytest.approx(1.0)
    assert adj["flat"] == {}  # zero-weight edges omitted
