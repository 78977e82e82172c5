"""Online/target siamese networks, instance fusion, EMA update and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, conv2d, matmul, mean, relu, reshape

CKPT_MAGIC = b"UVIP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple = (16, 32, 64, 64)
    proj_hidden: int = 64
    proj_dim: int = 32
    pred_hidden: int = 64
    K: int = 4
    in_channels: int = 3

    @property
    def feat_dim(self):
        return self.channels[-1]


def _uniform(rng, shape, fan_in, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_online(arch: ArchConfig, rng, dtype=np.float32):
    """Fresh online parameters: encoder, projection, predictor and fusion."""
    p = {}
    c_in = arch.in_channels
    relu_gain = math.sqrt(2.0)
    for i, c_out in enumerate(arch.channels):
        fan = c_in * 9
        p[f"enc.conv{i}.w"] = _uniform(rng, (c_out, c_in, 3, 3), fan, relu_gain)
        p[f"enc.conv{i}.b"] = np.zeros((c_out, 1, 1))
        c_in = c_out
    dims = [
        ("proj.fc1", arch.feat_dim, arch.proj_hidden, relu_gain),
        ("proj.fc2", arch.proj_hidden, arch.proj_dim, 1.0),
        ("pred.fc1", arch.proj_dim, arch.pred_hidden, relu_gain),
        ("pred.fc2", arch.pred_hidden, arch.proj_dim, 1.0),
    ]
    for name, n_in, n_out, gain in dims:
        p[f"{name}.w"] = _uniform(rng, (n_in, n_out), n_in, gain)
        p[f"{name}.b"] = np.zeros(n_out)
    d, K = arch.proj_dim, arch.K
    # start near block averaging so the fused vector begins as the mean instance feature
    p["fuse.w"] = np.tile(np.eye(d) / K, (K, 1)) + rng.normal(0.0, 0.01 / K, size=(K * d, d))
    p["fuse.b"] = np.zeros(d)
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}


TARGET_PREFIXES = ("enc.", "proj.")


def is_shared(name):
    return name.startswith(TARGET_PREFIXES)


def copy_target(online):
    return {k: Tensor(v.data.copy()) for k, v in online.items() if is_shared(k)}


def encode(params, x, arch: ArchConfig):
    """Conv stack (3x3, stride 2, ReLU) then global average pooling."""
    h = x
    for i in range(len(arch.channels)):
        h = relu(conv2d(h, params[f"enc.conv{i}.w"], stride=2, padding=1) + params[f"enc.conv{i}.b"])
    return mean(h, axis=(2, 3))


def _mlp(params, prefix, x):
    h = relu(matmul(x, params[f"{prefix}.fc1.w"]) + params[f"{prefix}.fc1.b"])
    return matmul(h, params[f"{prefix}.fc2.w"]) + params[f"{prefix}.fc2.b"]


def project(params, h):
    return _mlp(params, "proj", h)


def predict(params, z):
    return _mlp(params, "pred", z)


@dataclass
class ModelState:
    arch: ArchConfig
    online: dict
    target: dict
    momentum: float = 0.99
    step: int = 0

    @classmethod
    def create(cls, arch: ArchConfig, rng, dtype=np.float32, momentum=0.99):
        online = init_online(arch, rng, dtype)
        return cls(arch, online, copy_target(online), momentum, 0)

    @property
    def dtype(self):
        return next(iter(self.online.values())).dtype

    def as_input(self, x):
        return Tensor(np.asarray(x, dtype=self.dtype))

    # -- forward paths ------------------------------------------------------

    def forward_online_scene(self, s):
        x = self.as_input(s) if not isinstance(s, Tensor) else s
        self._check_input(x)
        return predict(self.online, project(self.online, encode(self.online, x, self.arch)))

    def forward_online_projection(self, s):
        x = self.as_input(s) if not isinstance(s, Tensor) else s
        self._check_input(x)
        return project(self.online, encode(self.online, x, self.arch))

    def forward_target_scene(self, s):
        x = self.as_input(s) if not isinstance(s, Tensor) else s
        self._check_input(x)
        out = project(self.target, encode(self.target, x, self.arch))
        return Tensor(out.data)  # detached

    # instances run through the same networks as scenes, only smaller
    forward_online_instance = forward_online_scene
    forward_target_instance = forward_target_scene

    def encode_frozen(self, x, which="online"):
        params = self.online if which == "online" else self.target
        return encode(params, self.as_input(x), self.arch).data

    def fuse_instances(self, O):
        """``I = f_linear(concat(o_1..o_K))`` for O of shape (K, d) or (B, K, d)."""
        K, d = self.arch.K, self.arch.proj_dim
        if O.shape[-2:] != (K, d):
            raise ValueError(f"fuse_instances expects (..., {K}, {d}) features, got {O.shape}")
        flat = reshape(O, (-1, K * d))
        out = matmul(flat, self.online["fuse.w"]) + self.online["fuse.b"]
        return reshape(out, (d,)) if O.ndim == 2 else out

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ValueError(f"expected (B, {self.arch.in_channels}, H, W) input, got {x.shape}")

    # -- parameter handling -------------------------------------------------

    def online_params(self):
        return self.online

    def zero_grad(self):
        for p in self.online.values():
            p.zero_grad()


def ema_update(state: ModelState, m=None):
    """``xi <- m * xi + (1 - m) * theta`` for every target parameter."""
    m = state.momentum if m is None else m
    if set(state.target) != {k for k in state.online if is_shared(k)}:
        raise ValueError("online and target parameter sets differ")
    for name, tgt in state.target.items():
        src = state.online[name].data
        if src.shape != tgt.data.shape:
            raise ValueError(f"shape mismatch for {name}: {src.shape} vs {tgt.data.shape}")
        tgt.data = (m * tgt.data + (1.0 - m) * src).astype(tgt.data.dtype, copy=False)


def momentum_schedule(step, total_steps, m0=0.99):
    """Cosine ramp of the EMA momentum from ``m0`` at step 0 to 1 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= m0 < 1:
        raise ValueError("m0 must lie in [0, 1)")
    if total_steps == 0:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# checkpoint file
#
#   "UVIP" | u32 version | u64 step | f64 momentum | u32 meta_len | meta (utf-8 JSON)
#   | u32 n | n x (u16 name_len | name | u8 ndim | ndim x u32 dims | u64 offset)
#   | data: little-endian float32 arrays, offsets relative to the data start
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: ModelState, extra=None):
    arrays = {f"online/{k}": v.data for k, v in state.online.items()}
    arrays.update({f"target/{k}": v.data for k, v in state.target.items()})
    meta = {"arch": asdict(state.arch)}
    if extra:
        meta["extra"] = extra
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = [CKPT_MAGIC, struct.pack("<IQdI", CKPT_VERSION, state.step, state.momentum, len(meta_b)),
            meta_b, struct.pack("<I", len(arrays))]
    blobs, offset = [], 0
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        fh.write(b"".join(blobs))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=np.float32) -> ModelState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, step, momentum, meta_len = struct.unpack_from("<IQdI", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 4 + struct.calcsize("<IQdI")
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            (off,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            table.append((name, shape, off))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    arch_d = meta["arch"]
    arch_d["channels"] = tuple(arch_d["channels"])
    arch = ArchConfig(**arch_d)
    online, target = {}, {}
    for name, shape, off in table:
        count = int(np.prod(shape)) if shape else 1
        start = pos + off
        if start + 4 * count > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(dtype)
        branch, key = name.split("/", 1)
        if branch == "online":
            online[key] = Tensor(arr, requires_grad=True)
        else:
            target[key] = Tensor(arr)
    state = ModelState(arch, online, target, float(momentum), int(step))
    ref = init_online(arch, np.random.default_rng(0), dtype)
    for k, v in ref.items():
        if k not in online or online[k].shape != v.shape:
            raise CheckpointError(f"{path}: parameter {k} missing or mis-shaped")
    return state
