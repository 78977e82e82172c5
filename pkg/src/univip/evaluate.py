"""Frozen-encoder evaluation: linear probe and kNN on ground-truth instance crops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .imaging import crop, resize_bilinear
from .model import ModelState
from .synth import read_sample


@dataclass
class InstanceSet:
    crops: np.ndarray  # (N, 3, s, s)
    labels: np.ndarray  # (N,)
    scene: np.ndarray  # (N,) source image index, used for the split


def instance_set(manifest, size, limit=0) -> InstanceSet:
    """Every ground-truth box of the dataset, cropped and resized to ``size``."""
    n = manifest.count if not limit else min(limit, manifest.count)
    crops, labels, scene = [], [], []
    for i in range(n):
        img, boxes, labs = read_sample(manifest, i)
        for box, lab in zip(boxes, labs):
            patch = resize_bilinear(crop(img, box), size, size)
            crops.append(np.transpose(patch, (2, 0, 1)))
            labels.append(lab)
            scene.append(i)
    return InstanceSet(np.asarray(crops, dtype=np.float32), np.asarray(labels),
                       np.asarray(scene))


def split_by_scene(ds: InstanceSet, train_frac=0.8):
    """Scenes are kept whole on one side so no image feeds both splits."""
    scenes = np.unique(ds.scene)
    cut = scenes[int(round(len(scenes) * train_frac)) - 1] if len(scenes) else -1
    train = ds.scene <= cut
    return train, ~train


def extract_features(state: ModelState, crops, batch=256, which="online"):
    out = [state.encode_frozen(crops[i:i + batch], which) for i in range(0, len(crops), batch)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, state.arch.feat_dim))


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int


def linear_probe(features, labels, train_mask, seed=0, C=1.0) -> ProbeResult:
    """Multinomial logistic regression on standardized frozen features; accuracy in %."""
    scaler = StandardScaler().fit(features[train_mask])
    xtr = scaler.transform(features[train_mask])
    xte = scaler.transform(features[~train_mask])
    clf = LogisticRegression(C=C, max_iter=2000, random_state=seed)
    clf.fit(xtr, labels[train_mask])
    acc = float(np.mean(clf.predict(xte) == labels[~train_mask])) * 100.0
    return ProbeResult(acc, int(train_mask.sum()), int((~train_mask).sum()))


def knn_accuracy(features, labels, train_mask, k=20) -> float:
    """Cosine kNN with majority vote (ties to the nearest neighbour's class); accuracy in %."""
    f = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    xtr, ytr = f[train_mask], labels[train_mask]
    xte, yte = f[~train_mask], labels[~train_mask]
    if not 1 <= k <= len(xtr):
        raise ValueError(f"k={k} outside [1, {len(xtr)}] (reference set size)")
    correct = 0
    classes = np.unique(ytr)
    for start in range(0, len(xte), 512):
        sims = xte[start:start + 512] @ xtr.T
        nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for row, idx in enumerate(nn):
            votes = np.array([(ytr[idx] == c).sum() for c in classes])
            best = classes[votes == votes.max()]
            pred = best[0] if len(best) == 1 else next(ytr[j] for j in idx if ytr[j] in best)
            correct += pred == yte[start + row]
    return 100.0 * correct / max(len(xte), 1)


def probe_state(state: ModelState, ds: InstanceSet, seed=0, train_frac=0.8) -> ProbeResult:
    train_mask, _ = split_by_scene(ds, train_frac)
    return linear_probe(extract_features(state, ds.crops), ds.labels, train_mask, seed)


def knn_state(state: ModelState, ds: InstanceSet, k=20, train_frac=0.8) -> float:
    train_mask, _ = split_by_scene(ds, train_frac)
    return knn_accuracy(extract_features(state, ds.crops), ds.labels, train_mask, k)
