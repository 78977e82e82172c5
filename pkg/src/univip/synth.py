"""Seeded synthetic multi-instance scenes, PPM/box-file I/O and dataset manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, BoxFormatError, intersect, read_boxes, write_boxes
from .imaging import hsv_to_rgb, resize_bilinear
from .profiles import DESK, get_profile

CLASSES = ("circle", "square", "triangle", "cross")
MANIFEST_NAME = "manifest.json"
_SUPERSAMPLE = 4


class DataError(Exception):
    """Missing, malformed or inconsistent dataset files."""


class PlacementError(DataError):
    pass


@dataclass
class SceneConfig:
    canvas: int = DESK.canvas
    min_shapes: int = 2
    max_shapes: int = 6
    shape_min: int = DESK.shape_min
    shape_max: int = DESK.shape_max
    max_overlap: float = 0.15  # intersection / smaller-box area
    classes: tuple = CLASSES
    n_shapes: int | None = None  # fixes the count when set

    @classmethod
    def for_profile(cls, profile, **kw):
        p = get_profile(profile) if isinstance(profile, str) else profile
        return cls(canvas=p.canvas, shape_min=p.shape_min, shape_max=p.shape_max, **kw)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float64, multiples of 1/255
    boxes: list
    labels: list
    masks: list = field(default_factory=list, repr=False)  # per-shape coverage


def _coverage(kind, w, h):
    s = _SUPERSAMPLE
    u = (np.arange(w * s) + 0.5) / (w * s)
    v = (np.arange(h * s) + 0.5) / (h * s)
    U, V = np.meshgrid(u, v)
    if kind == "circle":
        inside = (U - 0.5) ** 2 + (V - 0.5) ** 2 <= 0.25
    elif kind == "square":
        inside = np.ones_like(U, dtype=bool)
    elif kind == "triangle":
        inside = np.abs(U - 0.5) <= V / 2
    elif kind == "cross":
        inside = (np.abs(U - 0.5) <= 1 / 6) | (np.abs(V - 0.5) <= 1 / 6)
    else:
        raise ValueError(f"unknown shape class {kind!r}")
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _background(rng, canvas):
    coarse = rng.uniform(0.3, 0.7, size=(4, 4, 3))
    bg = resize_bilinear(coarse, canvas, canvas)
    bg += rng.normal(0.0, 0.015, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _pick_color(rng, region_mean):
    for _ in range(50):
        hsv = np.array([rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)])
        color = hsv_to_rgb(hsv)
        if np.abs(color - region_mean).sum() >= 0.5:
            return color
    return color


def _place(rng, cfg, frames, max_tries):
    for attempt in range(2 * max_tries):
        # second half of the budget only tries the smallest sizes
        hi = cfg.shape_max if attempt < max_tries else cfg.shape_min + 2
        w = int(rng.integers(cfg.shape_min + 1, max(hi, cfg.shape_min + 1) + 1))
        h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), cfg.shape_min + 1, max(hi, cfg.shape_min + 1)))
        x = int(rng.integers(0, cfg.canvas - w + 1))
        y = int(rng.integers(0, cfg.canvas - h + 1))
        frame = Box(x, y, w, h)
        for other in frames:
            inter = intersect(frame, other)
            if inter is not None and inter.area > cfg.max_overlap * min(frame.area, other.area):
                break
        else:
            return frame
    return None


def generate_scene(rng, config: SceneConfig | None = None, max_tries=100, restarts=20) -> Scene:
    """Render 2-6 anti-aliased shapes over a low-frequency background.

    Shapes are placed sequentially (later ones occlude earlier ones); a scene
    whose shapes cannot be packed is redrawn, up to ``restarts`` times.
    """
    cfg = config or SceneConfig()
    if cfg.shape_max > cfg.canvas:
        raise PlacementError("shape_max exceeds canvas")
    n = cfg.n_shapes if cfg.n_shapes is not None else int(
        rng.integers(cfg.min_shapes, cfg.max_shapes + 1)
    )
    kinds = [cfg.classes[int(rng.integers(len(cfg.classes)))] for _ in range(n)]
    for _ in range(restarts):
        frames = []
        for _ in range(n):
            frame = _place(rng, cfg, frames, max_tries)
            if frame is None:
                break
            frames.append(frame)
        if len(frames) == n:
            break
    else:
        raise PlacementError(f"could not place {n} shapes on a {cfg.canvas}px canvas")

    img = _background(rng, cfg.canvas)
    boxes, masks = [], []
    for kind, frame in zip(kinds, frames):
        x, y, w, h = frame.as_tuple()
        cov = _coverage(kind, w, h)
        ys, xs = np.nonzero(cov > 0)
        boxes.append(Box(x + int(xs.min()), y + int(ys.min()),
                         int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
        region = img[y:y + h, x:x + w]
        color = _pick_color(rng, region.reshape(-1, 3).mean(axis=0))
        img[y:y + h, x:x + w] = region * (1 - cov[..., None]) + color * cov[..., None]
        full = np.zeros((cfg.canvas, cfg.canvas))
        full[y:y + h, x:x + w] = cov
        masks.append(full)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Scene(image=img, boxes=boxes, labels=kinds, masks=masks)


def sample_rng(seed, index):
    """Independent per-sample generator derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img) -> bytes:
    arr = to_uint8(img)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def decode_ppm(data: bytes, name="<bytes>"):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{name}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{name}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{name}: bad PPM header {tokens[1:]!r}") from None
    if maxval != 255:
        raise DataError(f"{name}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{name}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_ppm(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return decode_ppm(data, str(path))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    count: int
    seed: int
    profile: str
    samples: list  # [{"image": rel, "boxes": rel}]

    def to_json(self):
        body = {
            "root": ".",
            "count": self.count,
            "seed": self.seed,
            "profile": self.profile,
            "samples": self.samples,
        }
        return json.dumps(body, indent=1, sort_keys=True) + "\n"


def write_dataset(root, count, seed, profile="desk", scene_config=None) -> DatasetManifest:
    """Generate ``count`` scenes under ``root`` and write ``manifest.json`` there."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "boxes"), exist_ok=True)
    cfg = scene_config or SceneConfig.for_profile(profile)
    samples = []
    for i in range(count):
        scene = generate_scene(sample_rng(seed, i), cfg)
        img_rel = f"images/{i:06d}.ppm"
        box_rel = f"boxes/{i:06d}.txt"
        write_ppm(os.path.join(root, img_rel), scene.image)
        write_boxes(os.path.join(root, box_rel), scene.boxes, scene.labels)
        samples.append({"image": img_rel, "boxes": box_rel})
    manifest = DatasetManifest(str(root), count, int(seed), profile, samples)
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest.to_json())
    return manifest


def load_manifest(path) -> DatasetManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            body = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        root = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), body["root"]))
        manifest = DatasetManifest(root, int(body["count"]), int(body["seed"]),
                                   str(body["profile"]), list(body["samples"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc
    if len(manifest.samples) != manifest.count:
        raise DataError(f"{path}: count {manifest.count} != {len(manifest.samples)} samples")
    return manifest


def read_sample(manifest: DatasetManifest, index):
    """Return ``(image, boxes, labels)`` for sample ``index``."""
    if not 0 <= index < manifest.count:
        raise IndexError(f"sample {index} out of range for {manifest.count} samples")
    entry = manifest.samples[index]
    img = read_ppm(os.path.join(manifest.root, entry["image"]))
    box_path = os.path.join(manifest.root, entry["boxes"])
    try:
        boxes, labels = read_boxes(box_path)
    except OSError as exc:
        raise DataError(f"cannot read boxes {box_path}: {exc}") from exc
    except BoxFormatError as exc:
        raise DataError(f"{box_path}: {exc}") from exc
    return img, boxes, labels
