import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedora_vfl.data import (PartitionResult, UnlearnRequest, gen_images, gen_tabular, load_csv, noniid_perturb,
                             split_unlearn, stratified_split, vertical_partition)
from fedora_vfl.exceptions import IngestionError, ValidationError
from fedora_vfl.vfl import PartySpec, even_party_specs


def test_tabular_shape_and_balance():
    data = gen_tabular(5, 100, 10, 2.0, seed=0)
    assert data.matrix().shape == (500, 10)
    assert np.bincount(data.labels).tolist() == [100] * 5


def test_tabular_seeded():
    a, b = gen_tabular(3, 20, 4, 1.0, seed=7), gen_tabular(3, 20, 4, 1.0, seed=7)
    assert a.matrix().tobytes() == b.matrix().tobytes()
    assert not np.array_equal(a.matrix(), gen_tabular(3, 20, 4, 1.0, seed=8).matrix())


@pytest.mark.parametrize("n_classes,n_features", [(5, 10), (6, 3)])
def test_tabular_class_means_are_separated(n_classes, n_features):
    data = gen_tabular(n_classes, 4000, n_features, 3.0, seed=1)
    x = data.matrix()
    means = np.stack([x[data.labels == c].mean(axis=0) for c in range(n_classes)])
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(n_classes) for j in range(i)]
    assert min(gaps) == pytest.approx(3.0, abs=0.15)


def test_images_range_and_shape():
    data = gen_images(4, 10, seed=0)
    x = data.matrix()
    assert x.shape == (40, 256) and data.image_shape == (16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0
    with pytest.raises(ValidationError):
        gen_images(4, 10, height=4, width=4)


def test_generator_argument_checks():
    with pytest.raises(ValidationError):
        gen_tabular(1, 10, 4, 1.0)
    with pytest.raises(ValidationError):
        gen_tabular(3, 0, 4, 1.0)


def test_csv_numeric_and_onehot(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,color,label\n1,red,yes\n3,blue,no\n5,red,yes\n")
    data = load_csv(path, "label")
    assert data.feature_names == ("a", "color=blue", "color=red")
    x = data.matrix()
    np.testing.assert_allclose(x[:, 0], [-1.224744871391589, 0.0, 1.224744871391589])
    np.testing.assert_array_equal(x[:, 1:], [[0, 1], [1, 0], [0, 1]])
    np.testing.assert_array_equal(data.labels, [1, 0, 1])
    raw = load_csv(path, "label", standardize=False)
    np.testing.assert_array_equal(raw.matrix()[:, 0], [1, 3, 5])


def test_csv_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "missing.csv", "y")
    bad = tmp_path / "bad.csv"
    bad.write_text("a,y\n1,0\n2\n")
    with pytest.raises(IngestionError, match="row 2"):
        load_csv(bad, "y")
    mixed = tmp_path / "mixed.csv"
    mixed.write_text("a,y\n1,0\nx,1\n")
    with pytest.raises(IngestionError, match="row 2"):
        load_csv(mixed, "y")
    with pytest.raises(ValidationError):
        load_csv(mixed, "nolabel")
    empty = tmp_path / "empty.csv"
    empty.write_text("a,y\n")
    with pytest.raises(IngestionError):
        load_csv(empty, "y")


def test_partition_round_trip():
    data = gen_tabular(3, 10, 9, 1.0, seed=0)
    specs = even_party_specs(9, 3)
    parted = vertical_partition(data, specs)
    assert parted.widths == [3, 3, 3]
    assert parted.matrix().tobytes() == data.matrix().tobytes()


def test_partition_uses_spec_slices():
    data = gen_tabular(2, 5, 5, 1.0, seed=0)
    specs = [PartySpec(1, "active", (2, 5)), PartySpec(0, "passive", (0, 2))]
    parted = vertical_partition(data, specs)
    np.testing.assert_array_equal(parted.features[0], data.matrix()[:, :2])
    np.testing.assert_array_equal(parted.features[1], data.matrix()[:, 2:])


def test_split_unlearn_counts():
    data = gen_tabular(5, 100, 4, 1.0, seed=0)
    part = split_unlearn(data, UnlearnRequest((0, 1), 0.5), seed=3)
    assert len(part.unlearn_ids) == 100 and len(part.remain_ids) == 400
    labels = data.labels[part.unlearn_ids]
    assert np.bincount(labels, minlength=5).tolist() == [50, 50, 0, 0, 0]


def test_split_unlearn_floor_and_modes():
    data = gen_tabular(3, 7, 4, 1.0, seed=0)
    assert len(split_unlearn(data, UnlearnRequest((2,), 0.5)).unlearn_ids) == 3
    assert UnlearnRequest((2,), 1.0).mode == "label"
    assert UnlearnRequest((2,), 0.3).mode == "sample"
    full = split_unlearn(data, UnlearnRequest((2,), 1.0))
    assert set(data.labels[full.unlearn_ids]) == {2} and len(full.unlearn_ids) == 7


def test_split_unlearn_restricted_pool():
    data = gen_tabular(2, 50, 4, 1.0, seed=0)
    pool = np.arange(40)
    part = split_unlearn(data, UnlearnRequest((0,), 1.0), rows=pool)
    assert set(part.unlearn_ids) | set(part.remain_ids) == set(pool.tolist())


def test_request_and_partition_validation():
    with pytest.raises(ValidationError):
        UnlearnRequest((), 0.5)
    with pytest.raises(ValidationError):
        UnlearnRequest((1, 1), 0.5)
    with pytest.raises(ValidationError):
        UnlearnRequest((1,), 0.0)
    with pytest.raises(ValidationError):
        PartitionResult(np.array([1, 2]), np.array([2, 3]))
    data = gen_tabular(2, 5, 4, 1.0, seed=0)
    with pytest.raises(ValidationError):
        split_unlearn(data, UnlearnRequest((0, 1), 1.0))
    with pytest.raises(ValidationError):
        split_unlearn(data, UnlearnRequest((4,), 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(2, 30), st.floats(0.05, 1.0), st.integers(0, 10_000), st.data())
def test_split_unlearn_disjoint_and_covering(n_classes, per_class, fraction, seed, draw):
    data = gen_tabular(n_classes, per_class, 3, 1.0, seed=seed)
    classes = draw.draw(st.lists(st.integers(0, n_classes - 1), min_size=1, max_size=n_classes - 1, unique=True))
    part = split_unlearn(data, UnlearnRequest(tuple(classes), fraction), seed=seed)
    u, r = set(part.unlearn_ids.tolist()), set(part.remain_ids.tolist())
    assert not u & r
    assert u | r == set(range(data.n_samples))
    expected = len(classes) * int(np.floor(round(fraction * per_class, 9)))
    assert len(u) == expected


def test_stratified_split():
    data = gen_tabular(4, 50, 3, 1.0, seed=0)
    train, test = stratified_split(data, 0.2, seed=0)
    assert len(test) == 40 and not set(train) & set(test)
    assert np.bincount(data.labels[test]).tolist() == [10] * 4


def test_noniid_noise_touches_one_party():
    data = vertical_partition(gen_tabular(2, 5000, 6, 1.0, seed=0), even_party_specs(6, 2))
    noisy = noniid_perturb(data, 1, 0.5, seed=0)
    np.testing.assert_array_equal(noisy.features[0], data.features[0])
    diff = noisy.features[1] - data.features[1]
    assert diff.var() == pytest.approx(0.25, rel=0.03)
    assert noniid_perturb(data, 0, 0.0) is data
    with pytest.raises(ValidationError):
        noniid_perturb(data, 2, 0.1)
    with pytest.raises(ValidationError):
        noniid_perturb(data, 0, -0.1)
