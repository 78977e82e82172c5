"""Overlapping scene views with K instances inside the overlap, plus augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, contains, intersect, iou
from .imaging import crop, gaussian_blur, grayscale, hsv_to_rgb, resize_bilinear, rgb_to_hsv, solarize
from .profiles import DESK

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewConfig:
    crop_scale: tuple = (0.4, 1.0)  # fraction of source area
    crop_ratio: tuple = (3 / 4, 4 / 3)
    min_scale: int = DESK.min_scale  # naive boxes
    aspect_min: float = 1 / 3
    aspect_max: float = 3.0
    max_iou: float = 0.5
    attempt_cap: int = 100  # naive-box draws per box
    pair_tries: int = 100  # crop-pair draws per attempt


@dataclass
class ViewPair:
    s1: Box
    s2: Box
    overlap: Box
    instance_boxes: list
    fallback_used: bool
    iterations_used: int
    naive_count: int = 0  # trailing entries of instance_boxes drawn by naive_boxes
    iou_relaxed: bool = False

    def to_dict(self):
        return {
            "s1": self.s1.as_tuple(),
            "s2": self.s2.as_tuple(),
            "overlap": self.overlap.as_tuple(),
            "instance_boxes": [b.as_tuple() for b in self.instance_boxes],
            "fallback_used": self.fallback_used,
            "iterations_used": self.iterations_used,
            "naive_count": self.naive_count,
            "iou_relaxed": self.iou_relaxed,
        }


class ViewError(ValueError):
    pass


def random_resized_crop(rng, width, height, scale=(0.4, 1.0), ratio=(3 / 4, 4 / 3)):
    """Sample a crop box by area fraction and log-uniform aspect ratio."""
    area = width * height
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        r = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * r)))
        h = int(round(math.sqrt(target / r)))
        if 1 <= w <= width and 1 <= h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return Box(x, y, w, h)
    # fall back to the largest centred crop inside the ratio bounds
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return Box((width - w) // 2, (height - h) // 2, w, h)


def _grid_step(min_scale):
    # boxes of side s offset by >= s/3 along an axis have IoU <= 0.5
    return max(1, math.ceil(min_scale / 3))


def grid_capacity(overlap: Box, min_scale):
    """How many mutually compatible min-scale squares a grid packs into ``overlap``."""
    if overlap.w < min_scale or overlap.h < min_scale:
        return 0
    step = _grid_step(min_scale)
    nx = (overlap.w - min_scale) // step + 1
    ny = (overlap.h - min_scale) // step + 1
    return nx * ny


def _random_box(rng, overlap, cfg):
    lo = cfg.min_scale
    if overlap.w < lo or overlap.h < lo:
        return None
    w = int(rng.integers(lo, overlap.w + 1))
    h_lo = max(lo, math.ceil(w / cfg.aspect_max))
    h_hi = min(overlap.h, math.floor(w / cfg.aspect_min))
    if h_lo > h_hi:
        return None
    h = int(rng.integers(h_lo, h_hi + 1))
    x = overlap.x + int(rng.integers(0, overlap.w - w + 1))
    y = overlap.y + int(rng.integers(0, overlap.h - h + 1))
    return Box(x, y, w, h)


def _grid_boxes(rng, overlap, min_scale):
    step = _grid_step(min_scale)
    xs = range(overlap.x, overlap.x2 - min_scale + 1, step)
    ys = range(overlap.y, overlap.y2 - min_scale + 1, step)
    cands = [Box(x, y, min_scale, min_scale) for y in ys for x in xs]
    order = rng.permutation(len(cands)) if cands else []
    return [cands[i] for i in order]


def naive_boxes(overlap: Box, need, rng, cfg: ViewConfig = ViewConfig(), existing=()):
    """Random boxes inside ``overlap`` obeying min scale, aspect and IoU limits.

    Each box gets ``attempt_cap`` random draws; failing that, min-scale squares
    on a compatible grid are tried. Only if both fail is the IoU ceiling raised
    in 0.1 steps (never past 0.9). Returns ``(boxes, relaxed)``.
    """
    if need <= 0:
        return [], False
    existing = list(existing)
    out: list[Box] = []
    ceiling = cfg.max_iou
    relaxed = False
    while len(out) < need:
        placed = None
        taken = existing + out
        for _ in range(cfg.attempt_cap):
            b = _random_box(rng, overlap, cfg)
            if b is not None and all(iou(b, o) <= ceiling for o in taken):
                placed = b
                break
        if placed is None:
            for b in _grid_boxes(rng, overlap, cfg.min_scale):
                if all(iou(b, o) <= ceiling for o in taken):
                    placed = b
                    break
        if placed is None and not relaxed and out:
            # random boxes may block the grid; grid squares never block each other
            grid = [b for b in _grid_boxes(rng, overlap, cfg.min_scale)
                    if all(iou(b, o) <= ceiling for o in existing)]
            if len(grid) >= need:
                return grid[:need], False
        if placed is None:
            if ceiling >= 0.9 - 1e-9:
                raise ViewError(f"cannot fit {need} boxes of side {cfg.min_scale} in {overlap}")
            ceiling = min(0.9, ceiling + 0.1)
            relaxed = True
            log.warning("naive_boxes: relaxing IoU ceiling to %.1f inside %s", ceiling, overlap)
            continue
        out.append(placed)
    return out, relaxed


def _sample_pair(rng, width, height, K, cfg):
    for _ in range(cfg.pair_tries):
        s1 = random_resized_crop(rng, width, height, cfg.crop_scale, cfg.crop_ratio)
        s2 = random_resized_crop(rng, width, height, cfg.crop_scale, cfg.crop_ratio)
        ov = intersect(s1, s2)
        if ov is not None and grid_capacity(ov, cfg.min_scale) >= K:
            return s1, s2, ov
    raise ViewError(f"no crop pair with room for {K} instances in a {width}x{height} image")


def create_overlapping_views(image, boxes, K, iters, rng, cfg: ViewConfig = ViewConfig()):
    """Sample two scene crops whose overlap holds K instance boxes.

    Up to ``iters + 1`` crop pairs are tried; ``iterations_used`` is the index of
    the accepting attempt, or ``iters + 1`` when the fallback ran. An attempt succeeds when at least
    K proposals lie inside the overlap; the K largest are kept. If no attempt
    succeeds, the attempt with the most contained proposals is kept and the
    shortfall is filled with naive boxes.
    """
    if K < 1 or iters < 1:
        raise ValueError("need K >= 1 and iters >= 1")
    height, width = np.shape(image)[:2]
    if min(width, height) < cfg.min_scale:
        raise ViewError(f"image {width}x{height} smaller than minimum crop {cfg.min_scale}")
    boxes = list(boxes)
    best = None
    for i in range(iters + 1):
        s1, s2, ov = _sample_pair(rng, width, height, K, cfg)
        inside = [b for b in boxes if contains(ov, b)]
        if len(inside) >= K:
            order = sorted(range(len(inside)), key=lambda j: (-inside[j].area, j))
            chosen = [inside[j] for j in order[:K]]
            return ViewPair(s1, s2, ov, chosen, False, i)
        if best is None or len(inside) > len(best[3]):
            best = (s1, s2, ov, inside)
    s1, s2, ov, inside = best
    kept = sorted(inside, key=lambda b: -b.area)
    extra, relaxed = naive_boxes(ov, K - len(kept), rng, cfg, existing=kept)
    return ViewPair(s1, s2, ov, kept + extra, True, iters + 1, len(extra), relaxed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    scene_size: int = DESK.scene_size
    instance_size: int = DESK.instance_size
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: tuple = (1.0, 0.1)  # per view
    blur_sigma: tuple = (0.1, 2.0)  # at 224 px; scaled with output size
    solarize_p: tuple = (0.0, 0.2)
    solarize_threshold: float = 0.5

    def __post_init__(self):
        probs = [self.flip_p, self.jitter_p, self.gray_p, *self.blur_p, *self.solarize_p]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.scene_size < 8 or self.instance_size < 8:
            raise ValueError("output sizes must be >= 8")

    @classmethod
    def disabled(cls, **kw):
        return cls(flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=(0.0, 0.0),
                   solarize_p=(0.0, 0.0), **kw)


def _jitter(img, cfg, rng):
    if cfg.brightness:
        img = img * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    if cfg.contrast:
        m = grayscale(img).mean()
        img = (img - m) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + m
    img = np.clip(img, 0.0, 1.0)
    if cfg.saturation:
        g = grayscale(img)
        img = np.clip((img - g) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation) + g, 0, 1)
    if cfg.hue:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue, cfg.hue)) % 1.0
        img = hsv_to_rgb(hsv)
    return img


def augment(img, cfg: AugmentConfig, rng, view=0, out_size=None):
    """Flip -> colour jitter -> grayscale -> blur -> solarize on an (H, W, 3) patch."""
    size = out_size or img.shape[0]
    if rng.random() < cfg.flip_p:
        img = img[:, ::-1]
    if rng.random() < cfg.jitter_p:
        img = _jitter(img, cfg, rng)
    if rng.random() < cfg.gray_p:
        img = grayscale(img)
    if rng.random() < cfg.blur_p[view]:
        lo, hi = cfg.blur_sigma
        img = gaussian_blur(img, rng.uniform(lo, hi) * size / 224.0)
    if rng.random() < cfg.solarize_p[view]:
        img = solarize(img, cfg.solarize_threshold)
    return np.clip(img, 0.0, 1.0)


def _to_chw(img):
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


def augment_scene(image, crop_box: Box, cfg: AugmentConfig, rng, view=0):
    patch = resize_bilinear(crop(image, crop_box), cfg.scene_size, cfg.scene_size)
    return _to_chw(augment(patch, cfg, rng, view, cfg.scene_size))


def crop_resize_instance(image, box: Box, cfg: AugmentConfig, rng, view=0):
    patch = resize_bilinear(crop(image, box), cfg.instance_size, cfg.instance_size)
    return _to_chw(augment(patch, cfg, rng, view, cfg.instance_size))


@dataclass
class TrainingSample:
    scenes: np.ndarray  # (2, 3, S, S)
    instances_online: np.ndarray  # (K, 3, s, s), view-1 augmentation
    instances_target: np.ndarray  # (K, 3, s, s), view-2 augmentation
    views: ViewPair
    seed: int = 0
    extra: dict = field(default_factory=dict)


def build_sample(image, proposals, K, iters, aug: AugmentConfig, rng, view_cfg=ViewConfig(),
                 seed=0, with_instances=True):
    vp = create_overlapping_views(image, proposals, K, iters, rng, view_cfg)
    scenes = np.stack([augment_scene(image, vp.s1, aug, rng, 0),
                       augment_scene(image, vp.s2, aug, rng, 1)])
    if with_instances:
        on = np.stack([crop_resize_instance(image, b, aug, rng, 0) for b in vp.instance_boxes])
        tg = np.stack([crop_resize_instance(image, b, aug, rng, 1) for b in vp.instance_boxes])
    else:
        s = aug.instance_size
        on = tg = np.zeros((0, 3, s, s))
    return TrainingSample(scenes, on, tg, vp, seed)


def view_config_for(profile, **kw):
    return ViewConfig(min_scale=profile.min_scale, **kw)


def augment_config_for(profile, **kw):
    return AugmentConfig(scene_size=profile.scene_size, instance_size=profile.instance_size, **kw)


__all__ = [
    "AugmentConfig", "TrainingSample", "ViewConfig", "ViewError", "ViewPair",
    "augment", "augment_scene", "build_sample", "create_overlapping_views",
    "crop_resize_instance", "grid_capacity", "naive_boxes", "random_resized_crop",
]
