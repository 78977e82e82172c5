"""Finite-difference checks for every differentiable op and the full objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import finite_diff_check
from .losses import SceneFeatures, affinity_loss, batched_instance_loss, scene_loss, univip_objective
from .model import ArchConfig, ModelState, encode
from .ot import cost_matrix, instance_loss


def _param(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:  # keeps relu inputs off the kink
        x = np.sign(x) * (np.abs(x) + 0.1)
    return T.Tensor(x, requires_grad=True)


def _weighted(out, w):
    """Scalar read-out ``sum(out * w)`` with fixed random weights."""
    return T.tsum(T.mul(out, T.Tensor(w)))


def op_cases(rng):
    """name -> (f, params). Each f rebuilds its graph from the current param values."""
    cases = {}

    def unary(name, fn, shape, away=False):
        x = _param(rng, *shape, away_from_zero=away)
        w = rng.normal(size=np.shape(fn(T.Tensor(x.data)).data))
        cases[name] = (lambda: _weighted(fn(x), w), {"x": x})

    def binary(name, fn, sa, sb):
        a, b = _param(rng, *sa), _param(rng, *sb)
        w = rng.normal(size=np.shape(fn(T.Tensor(a.data), T.Tensor(b.data)).data))
        cases[name] = (lambda: _weighted(fn(a, b), w), {"a": a, "b": b})

    binary("add", T.add, (3, 4), (3, 4))
    binary("add_broadcast", T.add, (2, 3, 4), (4,))
    binary("sub", T.sub, (3, 4), (1, 4))
    binary("mul", T.mul, (3, 4), (3, 1))
    binary("matmul", T.matmul, (3, 5), (5, 2))
    unary("scale", lambda x: T.scale(x, -1.7), (4, 3))
    unary("neg", T.neg, (5,))
    unary("relu", T.relu, (4, 5), away=True)
    unary("transpose", T.transpose, (3, 4))
    unary("sum_all", lambda x: T.tsum(x), (3, 4))
    unary("sum_axis", lambda x: T.tsum(x, axis=1, keepdims=True), (3, 4, 2))
    unary("mean_axes", lambda x: T.mean(x, axis=(2, 3)), (2, 3, 4, 4))
    unary("reshape", lambda x: T.reshape(x, (6, 2)), (3, 4))
    unary("getitem", lambda x: T.getitem(x, (slice(1, 3), [0, 2, 2])), (4, 3))
    unary("l2_normalize", T.l2_normalize, (3, 5))
    binary("cosine", T.cosine, (3, 5), (3, 5))
    binary("concat", lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))
    binary("stack", lambda a, b: T.stack([a, b], axis=0), (2, 3), (2, 3))
    binary("conv2d_s1_p0", lambda x, w: T.conv2d(x, w), (2, 3, 5, 5), (4, 3, 3, 3))
    binary("conv2d_s2_p1", lambda x, w: T.conv2d(x, w, stride=2, padding=1), (2, 2, 6, 6), (3, 2, 3, 3))
    binary("cost_matrix", cost_matrix, (3, 4), (3, 4))

    O, Tt = _param(rng, 3, 4), _param(rng, 3, 4)
    plan = rng.random((3, 3))
    plan /= plan.sum()
    cases["instance_loss"] = (lambda: instance_loss(O, Tt, plan), {"O": O})

    fo1, fo2 = _param(rng, 2, 4), _param(rng, 2, 4)
    ft1, ft2 = T.Tensor(rng.normal(size=(2, 4))), T.Tensor(rng.normal(size=(2, 4)))
    cases["scene_loss"] = (lambda: T.tsum(scene_loss(SceneFeatures(fo1, fo2, ft1, ft2))),
                           {"f_o1": fo1, "f_o2": fo2})
    I = _param(rng, 2, 4)
    cases["affinity_loss"] = (lambda: T.tsum(affinity_loss(I, SceneFeatures(fo1, fo2, ft1, ft2))),
                              {"I": I})
    Ob = _param(rng, 2, 3, 4)
    Tb = rng.normal(size=(2, 3, 4))
    plans = rng.random((2, 3, 3))
    plans /= plans.sum(axis=(1, 2), keepdims=True)
    cases["batched_instance_loss"] = (lambda: T.tsum(batched_instance_loss(Ob, T.Tensor(Tb), plans)),
                                      {"O": Ob})
    return cases


GRAD_ARCH = ArchConfig(channels=(3, 4), proj_hidden=6, proj_dim=5, pred_hidden=6, K=2)


def _kink_margin(state, *stacks, heads=("proj", "pred")):
    """Smallest |pre-activation| over every online ReLU for the given inputs."""
    params, arch, margin = state.online, state.arch, np.inf
    for x in stacks:
        h = x.reshape((-1,) + x.shape[-3:])
        for i in range(len(arch.channels)):
            pre = T.conv2d(T.Tensor(h), params[f"enc.conv{i}.w"], stride=2, padding=1).data
            pre = pre + params[f"enc.conv{i}.b"].data
            margin = min(margin, np.abs(pre).min())
            h = np.maximum(pre, 0)
        z = h.mean(axis=(2, 3))
        for prefix in heads:
            pre = z @ params[f"{prefix}.fc1.w"].data + params[f"{prefix}.fc1.b"].data
            margin = min(margin, np.abs(pre).min())
            z = np.maximum(pre, 0) @ params[f"{prefix}.fc2.w"].data + params[f"{prefix}.fc2.b"].data
    return margin


def _lift_biases(state, rng):
    # zero biases put every all-dead window exactly on the kink
    for name, v in state.online.items():
        if name.endswith(".b"):
            v.data = v.data + rng.normal(0.0, 0.1, v.shape)


def objective_case(rng, arch=GRAD_ARCH, scene_size=8, instance_size=6, batch=2, margin=2e-4,
                   tries=200):
    """Full three-term objective on a ``batch``-sample, K-instance problem.

    The Sinkhorn plans are solved once and then held fixed: the plan is a
    constant in the loss, so this is exactly the gradient training uses.
    Inputs are redrawn until no online ReLU sits within ``margin`` of its kink,
    where a central difference would straddle the corner.
    """
    state = ModelState.create(arch, rng, np.float64)
    for v in state.target.values():  # distinct target so both branches matter
        v.data = v.data + rng.normal(0.0, 0.05, v.shape)
    _lift_biases(state, rng)
    K = arch.K
    for _ in range(tries):
        scenes = rng.random((batch, 2, 3, scene_size, scene_size))
        inst_o = rng.random((batch, K, 3, instance_size, instance_size))
        inst_t = rng.random((batch, K, 3, instance_size, instance_size))
        if _kink_margin(state, scenes, inst_o) > margin:
            break
    else:
        raise RuntimeError("could not draw inputs away from ReLU kinks")
    _, info = univip_objective(state, scenes, inst_o, inst_t)
    plans = info["plans"]
    f = lambda: univip_objective(state, scenes, inst_o, inst_t, fixed_plans=plans)[0].total  # noqa: E731
    return f, state.online


def encoder_case(rng, arch=GRAD_ARCH, margin=2e-4, tries=200):
    state = ModelState.create(arch, rng, np.float64)
    _lift_biases(state, rng)
    for _ in range(tries):
        x = rng.random((2, 3, 8, 8))
        if _kink_margin(state, x, heads=()) > margin:
            break
    else:
        raise RuntimeError("could not draw inputs away from ReLU kinks")
    w = rng.normal(size=(2, arch.feat_dim))
    return (lambda: _weighted(encode(state.online, T.Tensor(x), arch), w),
            {k: v for k, v in state.online.items() if k.startswith("enc.")})


def run_gradient_suite(seed=0, h=1e-5, tol=1e-4):
    """Returns ``{case name: GradCheckReport}`` covering ops, encoder and the full objective."""
    rng = np.random.default_rng(seed)
    reports = {}
    for name, (f, params) in op_cases(rng).items():
        reports[name] = finite_diff_check(f, params, h, tol)
    f, params = encoder_case(rng)
    reports["encoder"] = finite_diff_check(f, params, h, tol)
    f, params = objective_case(rng)
    reports["objective"] = finite_diff_check(f, params, h, tol)
    return reports
