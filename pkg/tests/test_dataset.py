from fractions import Fraction

import numpy as np
import pytest
from conftest import DATA_DIR
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtrl.dataset import (
    RawDataset,
    gen_toy,
    load_csv,
    normalize,
    normalize_array,
    write_csv,
)
from dtrl.errors import (
    EmptyDatasetError,
    InvalidDatasetError,
    MissingFileError,
    MissingLabelColumnError,
    NoFeatureColumnsError,
    NonNumericFeatureError,
)
from dtrl.tree import DecisionTree, evaluate_tree


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_preserves_order_and_shape(tmp_path):
    path = _write(tmp_path, "a,b,y\n1,2,x\n3,4,z\n5,6,x\n")
    raw = load_csv(path, "y")
    assert raw.features.shape == (3, 2)
    assert raw.labels == ("x", "z", "x")
    assert raw.feature_names == ("a", "b")
    np.testing.assert_array_equal(raw.features[:, 0], [1, 3, 5])


def test_label_column_may_be_anywhere(tmp_path):
    raw = load_csv(_write(tmp_path, "y,a\nx,1\nz,2\n"), "y")
    assert raw.feature_names == ("a",)


@pytest.mark.parametrize(
    "text, exc",
    [
        ("y\nx\n", NoFeatureColumnsError),
        ("a,y\n", EmptyDatasetError),
        ("", EmptyDatasetError),
        ("a,y\nfoo,x\n1,z\n", NonNumericFeatureError),
        ("a,b\n1,2\n", MissingLabelColumnError),
    ],
)
def test_load_errors_are_distinct(tmp_path, text, exc):
    with pytest.raises(exc):
        load_csv(_write(tmp_path, text), "y")


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_csv(tmp_path / "absent.csv", "y")


def test_no_feature_columns_message(tmp_path):
    with pytest.raises(NoFeatureColumnsError, match="no feature columns"):
        load_csv(_write(tmp_path, "y\nx\n"), "y")


def test_single_label_rejected():
    with pytest.raises(InvalidDatasetError):
        RawDataset(np.zeros((2, 1)), ("a", "a"), ("f",))


def test_nonfinite_rejected():
    with pytest.raises(InvalidDatasetError):
        RawDataset(np.array([[np.nan], [1.0]]), ("a", "b"), ("f",))


def test_normalize_affine_and_constant():
    raw = RawDataset(np.array([[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]), ("a", "b", "a"), ("f", "g"))
    ds = normalize(raw)
    np.testing.assert_array_equal(ds.samples[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(ds.samples[:, 1], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(ds.scaler[1], [5.0, 5.0])


def test_labels_follow_first_occurrence():
    raw = RawDataset(np.arange(4.0)[:, None], ("z", "a", "z", "m"), ("f",))
    ds = normalize(raw)
    assert ds.class_names == ("z", "a", "m")
    np.testing.assert_array_equal(ds.labels, [0, 1, 0, 2])


matrices = arrays(
    np.float64,
    st.tuples(st.integers(2, 12), st.integers(1, 4)),
    elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_normalize_properties(x):
    labels = tuple("ab"[i % 2] for i in range(len(x)))
    ds = normalize(RawDataset(x, labels, tuple(f"f{k}" for k in range(x.shape[1]))))
    assert np.all((ds.samples >= 0) & (ds.samples <= 1))
    # bijective label map
    assert sorted(set(ds.labels.tolist())) == list(range(ds.n_classes))
    # idempotent
    again, _ = normalize_array(ds.samples)
    varying = np.ptp(x, axis=0) > 0
    np.testing.assert_allclose(again[:, varying], ds.samples[:, varying], atol=1e-12)
    # scaler round trip
    back = ds.denormalize(ds.samples)
    scale = np.maximum(1.0, np.abs(x).max())
    np.testing.assert_allclose(back[:, varying], x[:, varying], atol=1e-12 * scale)


def test_csv_round_trip(tmp_path):
    raw = gen_toy(3).raw
    path = tmp_path / "toy.csv"
    write_csv(path, raw)
    back = load_csv(path, "label")
    np.testing.assert_array_equal(back.features, raw.features)
    assert back.labels == raw.labels


@pytest.mark.parametrize("seed", range(5))
def test_toy_invariants(seed):
    task = gen_toy(seed)
    ds = task.dataset
    assert (ds.n_samples, ds.n_features, ds.n_classes) == (16, 2, 2)
    assert evaluate_tree(task.truth_tree, ds).accuracy == 1.0
    assert task.truth_tree.decision_node_count == 3 and task.truth_tree.depth == 2
    # 8/8 balance: a single leaf gets exactly half right
    for h in range(2):
        assert evaluate_tree(DecisionTree.single_leaf(h, ds.class_names, ds.feature_names), ds).accuracy == 0.5
    # every depth-1 grid split at 0.5 is stuck at 0.5 < 0.75 (XOR)
    for k in range(2):
        for lo in range(2):
            for hi in range(2):
                t = DecisionTree.empty(ds.class_names, ds.feature_names)
                t.root = t.add_split(k, Fraction(1, 2), 0.5, t.add_leaf(lo), t.add_leaf(hi))
                assert evaluate_tree(t, ds).accuracy <= 0.75
    # samples stay inside the cell interiors
    assert np.all(np.abs(ds.samples - 0.5) >= 0.05 - 1e-12)
    for node in task.truth_tree.nodes:
        if hasattr(node, "threshold"):
            assert node.threshold == Fraction(1, 2)


def test_toy_tasks_are_distinct_and_deterministic():
    samples = [gen_toy(s).dataset.samples for s in range(5)]
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.array_equal(samples[i], samples[j])
    np.testing.assert_array_equal(gen_toy(2).dataset.samples, samples[2])


def test_wine_shape():
    path = DATA_DIR / "wine.csv"
    if not path.exists():
        pytest.skip("wine.csv not present")
    raw = load_csv(path, "class")
    ds = normalize(raw)
    assert (ds.n_samples, ds.n_features, ds.n_classes) == (178, 13, 3)
    assert np.all((ds.samples >= 0) & (ds.samples <= 1))
