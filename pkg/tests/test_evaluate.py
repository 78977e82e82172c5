import numpy as np
import pytest

from univip.evaluate import (
    InstanceSet,
    instance_set,
    knn_accuracy,
    linear_probe,
    split_by_scene,
)


def _labels(n=400, seed=0):
    return np.random.default_rng(seed).integers(0, 4, size=n)


def _mask(n, frac=0.8):
    m = np.zeros(n, dtype=bool)
    m[: int(n * frac)] = True
    return m


def test_probe_one_hot_features_is_perfect():
    y = _labels()
    res = linear_probe(np.eye(4)[y], y, _mask(len(y)))
    assert res.accuracy == 100.0 and (res.n_train, res.n_test) == (320, 80)


def test_probe_constant_features_is_chance():
    y = _labels(2000, 1)
    res = linear_probe(np.ones((2000, 3)), y, _mask(2000))
    assert 15 <= res.accuracy <= 35


def test_knn_k1_on_reference_set_is_perfect():
    y = _labels(60, 2)
    f = np.random.default_rng(3).normal(size=(60, 5))
    # test rows duplicate the reference rows, so each one's nearest neighbour is itself
    feats = np.concatenate([f, f])
    labels = np.concatenate([y, y])
    mask = np.r_[np.ones(60, bool), np.zeros(60, bool)]
    assert knn_accuracy(feats, labels, mask, k=1) == 100.0


def test_knn_k_out_of_range():
    y = _labels(10)
    with pytest.raises(ValueError):
        knn_accuracy(np.eye(4)[y], y, _mask(10), k=9)
    with pytest.raises(ValueError):
        knn_accuracy(np.eye(4)[y], y, _mask(10), k=0)


def test_knn_tie_goes_to_nearest():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    labels = np.array([0, 1, 0])
    mask = np.array([True, True, False])
    assert knn_accuracy(feats, labels, mask, k=2) == 100.0


def test_split_keeps_scenes_whole():
    ds = InstanceSet(np.zeros((7, 3, 2, 2)), np.zeros(7), np.array([0, 0, 1, 2, 2, 3, 4]))
    train, test = split_by_scene(ds)
    assert set(ds.scene[train]) == {0, 1, 2, 3} and set(ds.scene[test]) == {4}


def test_instance_set_from_dataset(tiny_dataset):
    man = tiny_dataset[0]
    ds = instance_set(man, 24, limit=3)
    assert ds.crops.shape[1:] == (3, 24, 24)
    assert len(ds.crops) == len(ds.labels) == len(ds.scene)
    assert set(ds.scene) == {0, 1, 2}
