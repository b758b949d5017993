import numpy as np
import pytest

from manlab.datasets import (
    Dataset,
    DatasetConfigError,
    TableParseError,
    gen_blobs,
    gen_rings,
    load_table,
    minmax_normalize,
    save_table,
    stratified_split,
)
from manlab.models import predict
from manlab.training import TrainConfig, train


def in_unit_box(x):
    return np.all((x >= 0) & (x <= 1))


def test_blobs_shape_range_and_split():
    data = gen_blobs(4, 2, 100, 0.03, seed=3)
    assert len(data.train) == 320 and len(data.test) == 80
    for part in (data.train, data.test):
        assert in_unit_box(part.x)
        assert set(np.unique(part.y)) == {0, 1, 2, 3}
        counts = np.bincount(part.y)
        assert counts.max() - counts.min() <= 1


def test_blobs_deterministic():
    a, b = gen_blobs(seed=9), gen_blobs(seed=9)
    assert a.train.x.tobytes() == b.train.x.tobytes()
    assert a.test.y.tobytes() == b.test.y.tobytes()
    assert gen_blobs(seed=10).train.x.tobytes() != a.train.x.tobytes()


def test_blobs_infeasible_geometry():
    with pytest.raises(DatasetConfigError):
        gen_blobs(40, 2, 10, spread=0.03, radius=0.15)
    with pytest.raises(DatasetConfigError):
        gen_blobs(1, 2, 10)


def test_blobs_higher_dim_uses_simplex():
    data = gen_blobs(3, 5, 50, 0.03, seed=0)
    assert data.dim == 5 and in_unit_box(data.train.x)


def test_point_classes_are_linearly_separable():
    data = gen_blobs(4, 2, 50, 0.0, seed=1)
    target, _, _ = train(TrainConfig(regime="natural", epochs=40), data, hidden=(), eval_every=0)
    assert np.mean(predict(target, None, data.test.x) == data.test.y) == 1.0


def test_blobs_mlp_accuracy():
    data = gen_blobs(4, 2, 500, 0.03, seed=0)
    target, _, _ = train(TrainConfig(regime="natural", epochs=20), data, eval_every=0)
    assert np.mean(predict(target, None, data.test.x) == data.test.y) >= 0.98


def test_rings_noise_free_radii_separable():
    data = gen_rings(200, noise=0.0, seed=0)
    x = np.concatenate([data.train.x, data.test.x])
    y = np.concatenate([data.train.y, data.test.y])
    r = np.linalg.norm(x - 0.5, axis=1)
    assert r[y == 0].max() < r[y == 1].min()


def test_rings_linear_model_near_chance():
    data = gen_rings(500, noise=0.02, seed=0)
    target, _, _ = train(TrainConfig(regime="natural", epochs=30), data, hidden=(), eval_every=0)
    acc = np.mean(predict(target, None, data.test.x) == data.test.y)
    assert abs(acc - 0.5) <= 0.05


def test_rings_mlp_accuracy():
    data = gen_rings(500, noise=0.02, seed=0)
    target, _, _ = train(TrainConfig(regime="natural", epochs=60), data, eval_every=0)
    assert np.mean(predict(target, None, data.test.x) == data.test.y) >= 0.95


def test_minmax_constant_column_is_zero():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]])
    out = minmax_normalize(x)
    np.testing.assert_array_equal(out[:, 1], 0.0)
    np.testing.assert_array_equal(out[:, 0], [0.0, 1.0, 0.5])


def test_stratified_split_proportions():
    y = np.repeat([0, 1, 2], [50, 30, 21])
    data = Dataset(np.random.default_rng(0).uniform(0, 1, (len(y), 2)), y, 3)
    split = stratified_split(data, 0.2, seed=1)
    for c, n in zip(range(3), (50, 30, 21)):
        assert abs(np.sum(split.test.y == c) - 0.2 * n) <= 1


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_single_row(tmp_path):
    d = load_table(write(tmp_path, "a,b,label\n3.5,-2,0\n"), "label")
    assert len(d) == 1 and in_unit_box(d.x)


def test_load_constant_column_zero(tmp_path):
    d = load_table(write(tmp_path, "a,b,label\n1,7,0\n2,7,1\n3,7,0\n"), "label")
    np.testing.assert_array_equal(d.x[:, 1], 0.0)
    assert d.n_classes == 2


def test_table_round_trip(tmp_path):
    full = gen_blobs(3, 4, 30, 0.03, seed=2)
    x = np.concatenate([full.train.x, full.test.x])
    y = np.concatenate([full.train.y, full.test.y])
    data = Dataset(minmax_normalize(x), y, 3)
    path = tmp_path / "rt.csv"
    save_table(data, path, label_column="cls")
    loaded = load_table(path, "cls")
    assert np.max(np.abs(loaded.x - data.x)) <= 1e-12
    np.testing.assert_array_equal(loaded.y, data.y)


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("a,label\n1,0\n2\n", r":3: expected 2 cells"),
        ("a,label\n1,0\nfoo,1\n", r":3: non-numeric"),
        ("a,label\n1,0\n2,2\n", r"missing \[1\]"),
        ("a,label\n1,0\n2,0.5\n", r":3: label"),
        ("a,label\n1,0\nnan,1\ninf,1\n", r"lines \[3, 4\]"),
        ("a,b\n1,0\n", r"no column named 'label'"),
    ],
)
def test_load_errors_report_location(tmp_path, text, pattern):
    with pytest.raises(TableParseError, match=pattern):
        load_table(write(tmp_path, text), "label")
