"""Unsupervised box proposals: graph segmentation followed by hierarchical grouping.

A reduced selective search: one colour space, two similarity cues (colour
histogram intersection and size complementarity), one segmentation scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .boxes import Box, FilterConfig, filter_proposals
from .profiles import DESK

N_BINS = 8


def graph_segment(image, scale_k, min_size, rng, sigma=0.8):
    """Felzenszwalb-Huttenlocher style oversegmentation. Returns an (H, W) label map.

    Labels are consecutive from 0 in raster order of first appearance. ``rng``
    only breaks ties between equal-weight edges, so a fixed seed is fully
    deterministic.
    """
    img = np.asarray(image, dtype=np.float64) * 255.0
    h, w = img.shape[:2]
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest", truncate=4.0)
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:], img[:, :-1], img[:, 1:]),
        (idx[:-1, :], idx[1:, :], img[:-1, :], img[1:, :]),
        (idx[:-1, :-1], idx[1:, 1:], img[:-1, :-1], img[1:, 1:]),
        (idx[1:, :-1], idx[:-1, 1:], img[1:, :-1], img[:-1, 1:]),
    ]
    ea = np.concatenate([p[0].ravel() for p in pairs])
    eb = np.concatenate([p[1].ravel() for p in pairs])
    ew = np.concatenate([np.sqrt(((p[2] - p[3]) ** 2).sum(axis=-1)).ravel() for p in pairs])
    tiebreak = rng.random(ew.size)
    order = np.lexsort((tiebreak, ew))
    roots = kernels.segment_edges(h * w, ea[order], eb[order], ew[order], scale_k, min_size)
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first)] = np.arange(first.size)
    return rank[inverse].reshape(h, w)


@dataclass
class Region:
    label: int
    box: Box
    hist: np.ndarray  # (3, N_BINS), each row sums to 1
    size: int
    neighbors: frozenset = frozenset()


def regions_from_labels(image, labels, bins=N_BINS):
    image = np.asarray(image, dtype=np.float64)
    n = int(labels.max()) + 1
    flat = labels.ravel()
    size = np.bincount(flat, minlength=n)
    ys, xs = np.indices(labels.shape)
    y0 = ndimage.minimum(ys, labels, index=np.arange(n)).astype(int)
    y1 = ndimage.maximum(ys, labels, index=np.arange(n)).astype(int)
    x0 = ndimage.minimum(xs, labels, index=np.arange(n)).astype(int)
    x1 = ndimage.maximum(xs, labels, index=np.arange(n)).astype(int)
    binned = np.minimum((image * bins).astype(int), bins - 1).reshape(-1, 3)
    hist = np.zeros((n, 3, bins))
    for c in range(3):
        hist[:, c, :] = np.bincount(flat * bins + binned[:, c], minlength=n * bins).reshape(n, bins)
    hist /= size[:, None, None]
    adj = {i: set() for i in range(n)}
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        for p, q in set(zip(a[diff].tolist(), b[diff].tolist())):
            adj[p].add(q)
            adj[q].add(p)
    return [
        Region(i, Box(x0[i], y0[i], x1[i] - x0[i] + 1, y1[i] - y0[i] + 1), hist[i],
               int(size[i]), frozenset(adj[i]))
        for i in range(n)
    ]


def _similarity(r1, r2, total):
    colour = np.minimum(r1.hist, r2.hist).sum() / 3.0
    size = 1.0 - (r1.size + r2.size) / total
    return colour + size


def _union_box(a, b):
    x, y = min(a.x, b.x), min(a.y, b.y)
    return Box(x, y, max(a.x2, b.x2) - x, max(a.y2, b.y2) - y)


def hierarchical_group(regions, return_tree=False):
    """Greedily merge the most similar adjacent pair until one region is left.

    Emits the box of every node of the merge tree: the N input regions first,
    then the N-1 merged regions in merge order. With ``return_tree`` also
    returns ``children``: for each merged node (index >= N) its two child indices.
    Ties go to the pair with the smaller combined size.
    """
    regions = list(regions)
    if not regions:
        raise ValueError("hierarchical_group needs at least one region")
    total = float(sum(r.size for r in regions))
    label_to_node = {r.label: i for i, r in enumerate(regions)}
    nodes = [Region(i, r.box, r.hist, r.size,
                    frozenset(label_to_node[l] for l in r.neighbors if l in label_to_node))
             for i, r in enumerate(regions)]
    active = set(range(len(nodes)))
    neigh = {i: set(n.neighbors) for i, n in enumerate(nodes)}
    sims = {}
    for i in active:
        for j in neigh[i]:
            if i < j:
                sims[(i, j)] = _similarity(nodes[i], nodes[j], total)
    children = {}

    def key(pair):
        i, j = pair
        return (sims[pair], -(nodes[i].size + nodes[j].size), -i, -j)

    while len(active) > 1:
        if not sims:
            # disconnected input: fall back to the most similar pair overall
            for i in active:
                for j in active:
                    if i < j:
                        sims[(i, j)] = _similarity(nodes[i], nodes[j], total)
        i, j = max(sims, key=key)
        a, b = nodes[i], nodes[j]
        size = a.size + b.size
        hist = (a.hist * a.size + b.hist * b.size) / size
        new = len(nodes)
        nodes.append(Region(new, _union_box(a.box, b.box), hist, size))
        children[new] = (i, j)
        nb = (neigh.pop(i) | neigh.pop(j)) - {i, j}
        active -= {i, j}
        sims = {p: s for p, s in sims.items() if i not in p and j not in p}
        for k in nb:
            neigh[k] -= {i, j}
            neigh[k].add(new)
            sims[(k, new)] = _similarity(nodes[k], nodes[new], total)
        neigh[new] = nb
        active.add(new)
    boxes = [n.box for n in nodes]
    if return_tree:
        return boxes, children
    return boxes


@dataclass(frozen=True)
class ProposalConfig:
    scale_k: float = DESK.seg_k
    min_size: int = DESK.seg_min_size
    sigma: float = DESK.seg_sigma
    max_proposals: int = 64

    @classmethod
    def for_profile(cls, profile):
        return cls(scale_k=profile.seg_k, min_size=profile.seg_min_size, sigma=profile.seg_sigma)


def generate_proposals(image, cfg: FilterConfig, rng, proposal_cfg: ProposalConfig | None = None):
    """Segment, group, then filter; at most ``max_proposals`` boxes, largest first."""
    pc = proposal_cfg or ProposalConfig()
    labels = graph_segment(image, pc.scale_k, pc.min_size, rng, pc.sigma)
    regions = regions_from_labels(image, labels)
    candidates = list(dict.fromkeys(hierarchical_group(regions)))
    kept = filter_proposals(candidates, cfg)
    if len(kept) > pc.max_proposals:
        kept = sorted(kept, key=lambda b: -b.area)[: pc.max_proposals]
    return kept
