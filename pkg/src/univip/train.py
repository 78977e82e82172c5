"""Training loop: SGD with warm-up + cosine decay, EMA target, JSONL metrics, checkpoints."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .boxes import Box, FilterConfig
from .losses import LossSwitches, OTConfig, univip_objective
from .model import ArchConfig, ModelState, ema_update, momentum_schedule, save_checkpoint
from .profiles import get_profile
from .proposals import ProposalConfig, generate_proposals
from .synth import DataError, load_manifest, read_sample
from .tensor import NumericError
from .views import AugmentConfig, ViewConfig, build_sample

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; the offending batch is dumped next to the metrics."""


# section -> keys; every key is also a flat TrainConfig field
CONFIG_SECTIONS = {
    "data": ("manifest", "profile", "max_samples"),
    "views": ("K", "iters", "crop_scale_min"),
    "model": ("channels", "proj_hidden", "proj_dim", "pred_hidden"),
    "losses": ("use_scene", "use_scene_instance", "use_instance"),
    "sinkhorn": ("sinkhorn_epsilon", "sinkhorn_max_iter", "sinkhorn_tol", "sinkhorn_newton_steps"),
    "train": ("seed", "epochs", "warmup_epochs", "batch_size", "base_lr", "weight_decay",
              "sgd_momentum", "m0", "out_dir", "workers", "augment"),
}


@dataclass
class TrainConfig:
    manifest: str = ""
    profile: str = "desk"
    max_samples: int = 0  # 0 = whole dataset
    K: int = 4
    iters: int = 20
    crop_scale_min: float = 0.4
    channels: str = "16,32,64,64"
    proj_hidden: int = 64
    proj_dim: int = 32
    pred_hidden: int = 64
    use_scene: bool = True
    use_scene_instance: bool = True
    use_instance: bool = True
    sinkhorn_epsilon: float = 0.05
    sinkhorn_max_iter: int = 200
    sinkhorn_tol: float = 1e-6
    sinkhorn_newton_steps: int = 50
    seed: int = 0
    epochs: int = 20
    warmup_epochs: int = 1
    batch_size: int = 32
    base_lr: float = 0.05
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    m0: float = 0.99
    out_dir: str = "runs/default"
    workers: int = 0
    augment: bool = True

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.sinkhorn_epsilon <= 0:
            raise ValueError("rates must be positive")
        if not 0 <= self.m0 < 1:
            raise ValueError("m0 must be in [0, 1)")
        get_profile(self.profile)
        return self

    @property
    def arch(self):
        chans = tuple(int(c) for c in str(self.channels).split(","))
        return ArchConfig(chans, self.proj_hidden, self.proj_dim, self.pred_hidden, self.K)

    @property
    def switches(self):
        return LossSwitches(self.use_scene, self.use_scene_instance, self.use_instance)

    @property
    def ot(self):
        return OTConfig(self.sinkhorn_epsilon, self.sinkhorn_max_iter, self.sinkhorn_tol,
                        self.sinkhorn_newton_steps)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(field_type, raw):
    if field_type in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        val = str(raw).strip().lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if field_type in (int, "int"):
        return int(raw)
    if field_type in (float, "float"):
        return float(raw)
    return str(raw)


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    for key, raw in overrides.items():
        name = key.replace("-", "_")
        if name not in types:
            raise KeyError(f"unknown config key {key!r}")
        kw[name] = _coerce(types[name], raw)
    return cfg.replace(**kw)


def load_config(path) -> TrainConfig:
    """Read a ``key = value`` INI file with one section per module."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    flat = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise KeyError(f"{path}: unknown section [{section}]")
        for key, val in parser.items(section):
            if key.replace("-", "_") not in CONFIG_SECTIONS[section]:
                raise KeyError(f"{path}: key {key!r} does not belong in [{section}]")
            flat[key] = val
    return apply_overrides(TrainConfig(), flat)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    values = dataclasses.asdict(cfg)
    for section, keys in CONFIG_SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {values[k]}" for k in keys)
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------


def learning_rate(step, total_steps, warmup_steps, base_lr):
    """Linear warm-up over ``warmup_steps`` then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0), span) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _proposal_key(profile, filter_cfg, prop_cfg, n):
    blob = json.dumps([profile.name, dataclasses.asdict(filter_cfg),
                       dataclasses.asdict(prop_cfg), n], sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def dataset_proposals(manifest, images, profile, seed=0):
    """Filtered proposals for every image, cached under ``<root>/cache``."""
    filter_cfg = FilterConfig(min_scale=profile.min_scale)
    prop_cfg = ProposalConfig.for_profile(profile)
    key = _proposal_key(profile, filter_cfg, prop_cfg, len(images))
    cache_dir = os.path.join(manifest.root, "cache")
    path = os.path.join(cache_dir, f"proposals_{key}_{seed}.json")
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
        if len(rows) == len(images):
            return [[Box(*b) for b in row] for row in rows]
    out = []
    for i, img in enumerate(images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 7]))
        out.append(generate_proposals(img, filter_cfg, rng, prop_cfg))
    try:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = path + f".tmp{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump([[b.as_tuple() for b in row] for row in out], fh)
        os.replace(tmp, path)
    except OSError as exc:
        log.warning("could not cache proposals: %s", exc)
    return out


def load_images(manifest, limit=0):
    n = manifest.count if not limit else min(limit, manifest.count)
    images, boxes, labels = [], [], []
    for i in range(n):
        img, b, lab = read_sample(manifest, i)
        images.append(img.astype(np.float32))
        boxes.append(b)
        labels.append(lab)
    return images, boxes, labels


def _sample_job(args):
    image, props, K, iters, aug, view_cfg, seed_seq, with_inst = args
    rng = np.random.default_rng(seed_seq)
    return build_sample(image, props, K, iters, aug, rng, view_cfg, with_instances=with_inst)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: ModelState
    out_dir: str
    metrics_path: str
    checkpoint_path: str
    steps: int


def _fmt(record):
    return json.dumps(record, sort_keys=True, allow_nan=False)


def train(cfg: TrainConfig, images=None, proposals=None) -> TrainResult:
    """Run self-supervised pre-training. Deterministic for a fixed config and seed.

    ``images``/``proposals`` may be passed to skip loading (used by tests and
    by multi-arm experiments sharing one dataset).
    """
    cfg.validate()
    profile = get_profile(cfg.profile)
    if images is None:
        if not cfg.manifest:
            raise DataError("no dataset manifest configured")
        manifest = load_manifest(cfg.manifest)
        images, _, _ = load_images(manifest, cfg.max_samples)
        if proposals is None:
            proposals = dataset_proposals(manifest, images, profile)
    if proposals is None:
        raise ValueError("proposals are required when images are passed directly")
    if not images:
        raise DataError("dataset is empty")

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    timing_path = os.path.join(cfg.out_dir, "timing.jsonl")

    arch = cfg.arch
    state = ModelState.create(arch, np.random.default_rng([cfg.seed, 1]), np.float32, cfg.m0)
    opt = SGD(state.online, cfg.sgd_momentum, cfg.weight_decay)
    aug = AugmentConfig(scene_size=profile.scene_size, instance_size=profile.instance_size)
    if not cfg.augment:
        aug = AugmentConfig.disabled(scene_size=profile.scene_size,
                                     instance_size=profile.instance_size)
    view_cfg = ViewConfig(crop_scale=(cfg.crop_scale_min, 1.0), min_scale=profile.min_scale)
    switches = cfg.switches

    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    ckpt = os.path.join(cfg.out_dir, "ckpt_epoch000.uvip")
    save_checkpoint(ckpt, state)

    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    step = 0
    t0 = time.perf_counter()
    try:
        with open(metrics_path, "w", encoding="utf-8", newline="\n") as mfh, \
                open(timing_path, "w", encoding="utf-8", newline="\n") as tfh:
            for epoch in range(cfg.epochs):
                order = np.random.default_rng([cfg.seed, epoch, 2]).permutation(n)
                for start in range(0, n, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    jobs = [(images[i], proposals[i], cfg.K, cfg.iters, aug, view_cfg,
                             np.random.SeedSequence([cfg.seed, epoch, int(i)]),
                             switches.needs_instances) for i in idx]
                    samples = list(pool.map(_sample_job, jobs)) if pool else [_sample_job(j) for j in jobs]
                    lr = learning_rate(step, total_steps, warmup_steps, cfg.base_lr)
                    m = momentum_schedule(step + 1, total_steps, cfg.m0)
                    try:
                        losses, info = univip_objective(
                            state,
                            np.stack([s.scenes for s in samples]),
                            np.stack([s.instances_online for s in samples]),
                            np.stack([s.instances_target for s in samples]),
                            switches, cfg.ot,
                        )
                        opt.zero_grad()
                        losses.total.backward()
                    except NumericError as exc:
                        _dump_failure(cfg, step, epoch, idx, exc)
                        raise TrainingAborted(f"step {step}: {exc}") from exc
                    opt.step(lr)
                    state.momentum = m
                    ema_update(state, m)
                    step += 1
                    state.step = step
                    rec = {"step": step, "epoch": epoch, "lr": lr, "m": m}
                    rec.update(losses.values())
                    rec["fallback_rate"] = float(np.mean([s.views.fallback_used for s in samples]))
                    solved = info["sinkhorn_solved"]
                    rec["sinkhorn_converged_rate"] = (
                        info["sinkhorn_converged"] / solved if solved else None)
                    mfh.write(_fmt(rec) + "\n")
                    mfh.flush()
                    tfh.write(_fmt({"step": step, "wall_clock": time.perf_counter() - t0}) + "\n")
                ckpt = os.path.join(cfg.out_dir, f"ckpt_epoch{epoch + 1:03d}.uvip")
                save_checkpoint(ckpt, state)
                log.info("epoch %d done, step %d, %.1fs", epoch + 1, step, time.perf_counter() - t0)
    finally:
        if pool:
            pool.shutdown()
    final = os.path.join(cfg.out_dir, "final.uvip")
    save_checkpoint(final, state)
    return TrainResult(state, cfg.out_dir, metrics_path, final, step)


def _dump_failure(cfg, step, epoch, idx, exc):
    dump = {
        "step": step,
        "epoch": epoch,
        "seed": cfg.seed,
        "sample_indices": [int(i) for i in idx],
        "sample_seeds": [[cfg.seed, epoch, int(i)] for i in idx],
        "error": str(exc),
    }
    with open(os.path.join(cfg.out_dir, "failure.json"), "w", encoding="utf-8") as fh:
        json.dump(dump, fh, indent=1)
