"""Scene, scene-instance and instance losses and their equally weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ot import cost_matrix, marginal_weights, sinkhorn
from .tensor import Tensor, cosine, getitem, l2_normalize, mul, reshape, stopgrad, tsum


def neg_cosine(p, z):
    """Negative cosine along the last axis; ``z`` is expected to be detached already."""
    return -cosine(p, z)


@dataclass
class SceneFeatures:
    f_o1: Tensor  # online predictions, view 1
    f_o2: Tensor
    f_t1: Tensor  # target projections (detached), view 1
    f_t2: Tensor

    def swapped(self):
        return SceneFeatures(self.f_o2, self.f_o1, self.f_t2, self.f_t1)


def scene_loss(f: SceneFeatures):
    """Symmetrised BYOL term: each view's prediction against the other view's target."""
    return neg_cosine(f.f_o1, f.f_t2) + neg_cosine(f.f_o2, f.f_t1)


def affinity_loss(I, f: SceneFeatures):
    """Fused instance vector against both target scene projections."""
    return neg_cosine(I, f.f_t1) + neg_cosine(I, f.f_t2)


def batched_instance_loss(O, T, plans):
    """``-sum_mn cos(o_m, t_n) plan_mn`` per sample for O, T of shape (B, K, d)."""
    On = l2_normalize(O)
    Tn = Tensor(l2_normalize(stopgrad(T)).data)
    B, K, d = O.shape
    sim = tsum(mul(reshape(On, (B, K, 1, d)), reshape(Tn, (B, 1, K, d))), axis=-1)
    weights = Tensor(np.asarray(plans, dtype=O.dtype))
    return -tsum(mul(sim, weights), axis=(1, 2))


@dataclass(frozen=True)
class LossSwitches:
    scene: bool = True
    scene_instance: bool = True
    instance: bool = True

    @property
    def needs_instances(self):
        return self.scene_instance or self.instance

    @classmethod
    def scene_only(cls):
        return cls(True, False, False)


@dataclass
class LossBreakdown:
    scene: Tensor
    scene_instance: Tensor
    instance: Tensor
    total: Tensor

    def values(self):
        s, si, inst = float(self.scene.data), float(self.scene_instance.data), float(self.instance.data)
        return {"scene": s, "scene_instance": si, "instance": inst, "total": s + si + inst}


def total_loss(scene=None, scene_instance=None, instance=None, dtype=np.float64):
    """Equal-weight sum of whichever terms are given; missing terms count as 0."""
    zero = Tensor(np.zeros((), dtype=dtype))
    scene = zero if scene is None else scene
    scene_instance = zero if scene_instance is None else scene_instance
    instance = zero if instance is None else instance
    return LossBreakdown(scene, scene_instance, instance, (scene + scene_instance) + instance)


@dataclass(frozen=True)
class OTConfig:
    epsilon: float = 0.05
    max_iter: int = 200
    tol: float = 1e-6
    newton_steps: int = 50


def solve_plans(O, T, f: SceneFeatures, ot_cfg: OTConfig):
    """One Sinkhorn plan per sample from detached features. Returns (plans, n_converged)."""
    O_d, T_d = O.data.astype(np.float64), T.data.astype(np.float64)
    fo1, fo2 = f.f_o1.data.astype(np.float64), f.f_o2.data.astype(np.float64)
    ft1, ft2 = f.f_t1.data.astype(np.float64), f.f_t2.data.astype(np.float64)
    plans, converged = [], 0
    for b in range(O_d.shape[0]):
        C = cost_matrix(O_d[b], T_d[b]).data
        marg = marginal_weights(O_d[b], T_d[b], fo1[b], fo2[b], ft1[b], ft2[b])
        tp = sinkhorn(C, marg.a, marg.b, ot_cfg.epsilon, ot_cfg.max_iter, ot_cfg.tol,
                      ot_cfg.newton_steps)
        plans.append(tp.plan)
        converged += tp.converged
    return np.stack(plans), converged


def univip_objective(state, scenes, inst_online=None, inst_target=None,
                     switches: LossSwitches = LossSwitches(), ot_cfg: OTConfig = OTConfig(),
                     fixed_plans=None):
    """Batch objective: mean over samples of the three loss terms.

    ``scenes`` is (B, 2, 3, S, S); instance stacks are (B, K, 3, s, s).
    ``fixed_plans`` (B, K, K) bypasses Sinkhorn, which keeps the objective a
    smooth function of the parameters for finite-difference checks.
    Returns ``(LossBreakdown, info)``.
    """
    scenes = np.asarray(scenes)
    B = scenes.shape[0]
    both = np.concatenate([scenes[:, 0], scenes[:, 1]], axis=0)
    f_o = state.forward_online_scene(both)
    f_t = state.forward_target_scene(both)
    feats = SceneFeatures(getitem(f_o, slice(0, B)), getitem(f_o, slice(B, 2 * B)),
                          getitem(f_t, slice(0, B)), getitem(f_t, slice(B, 2 * B)))
    info = {"plans": None, "sinkhorn_converged": 0, "sinkhorn_solved": 0}
    l_scene = l_si = l_inst = None
    if switches.scene:
        l_scene = scene_loss(feats).mean()
    if switches.needs_instances:
        inst_online = np.asarray(inst_online)
        inst_target = np.asarray(inst_target)
        _, K = inst_online.shape[:2]
        d = state.arch.proj_dim
        o = state.forward_online_instance(inst_online.reshape((B * K,) + inst_online.shape[2:]))
        t = state.forward_target_instance(inst_target.reshape((B * K,) + inst_target.shape[2:]))
        O = reshape(o, (B, K, d))
        T = reshape(t, (B, K, d))
        if switches.scene_instance:
            l_si = affinity_loss(state.fuse_instances(O), feats).mean()
        if switches.instance:
            if fixed_plans is None:
                plans, conv = solve_plans(O, T, feats, ot_cfg)
                info["sinkhorn_converged"] = conv
                info["sinkhorn_solved"] = B
            else:
                plans = np.asarray(fixed_plans)
            info["plans"] = plans
            l_inst = batched_instance_loss(O, T, plans).mean()
    return total_loss(l_scene, l_si, l_inst, dtype=state.dtype), info
