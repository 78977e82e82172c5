"""Size profiles. Pixel thresholds are absolute, so they shrink with the canvas."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Profile:
    name: str
    canvas: int  # synthetic source image side
    scene_size: int  # scene crop output side
    instance_size: int  # instance crop output side
    min_scale: int  # proposal filter and naive-box minimum side
    shape_min: int
    shape_max: int
    seg_k: float  # graph segmentation scale, on 0..255 intensities
    seg_min_size: int
    seg_sigma: float


DESK = Profile(
    name="desk",
    canvas=64,
    scene_size=48,
    instance_size=24,
    min_scale=16,
    shape_min=16,
    shape_max=26,
    seg_k=20.0,
    seg_min_size=8,
    seg_sigma=0.3,
)

PAPER = Profile(
    name="paper",
    canvas=300,
    scene_size=224,
    instance_size=96,
    min_scale=64,
    shape_min=64,
    shape_max=104,
    seg_k=300.0,
    seg_min_size=200,
    seg_sigma=0.8,
)

PROFILES = {p.name: p for p in (DESK, PAPER)}


def get_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
