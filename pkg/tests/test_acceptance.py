"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line."""

import statistics
import time

import numpy as np
import pytest

from univip.boxes import FilterConfig, contains, intersect, iou
from univip.evaluate import instance_set, probe_state
from univip.gradsuite import run_gradient_suite
from univip.losses import SceneFeatures, affinity_loss, scene_loss, total_loss
from univip.model import ArchConfig, ModelState, ema_update, load_checkpoint, save_checkpoint
from univip.ot import best_permutation_cost, cost_matrix, instance_loss, marginal_violation, sinkhorn
from univip.profiles import DESK, PAPER
from univip.proposals import ProposalConfig, generate_proposals
from univip.synth import SceneConfig, generate_scene, load_manifest, sample_rng, write_dataset
from univip.tensor import Tensor
from univip.train import TrainConfig, dataset_proposals, load_images, train
from univip.views import ViewConfig, create_overlapping_views


def test_gradient_suite(report):
    t0 = time.perf_counter()
    reports = run_gradient_suite(seed=0, h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [name for name, rep in reports.items() if not rep.passed]
    worst = max(rep.worst for rep in reports.values())
    ok = not failed and elapsed < 120
    report(1, "gradient suite", ok,
           f"{len(reports)} cases, worst rel err {worst:.2e}, {elapsed:.1f}s, failed={failed}")
    assert ok


def test_sinkhorn_feasibility(report):
    rng = np.random.default_rng(2024)
    worst, converged = 0.0, 0
    for _ in range(500):
        k = int(rng.integers(1, 9))
        C = rng.uniform(0, 2, size=(k, k))
        a, b = rng.random(k) + 1e-3, rng.random(k) + 1e-3
        a, b = a / a.sum(), b / b.sum()
        tp = sinkhorn(C, a, b, epsilon=0.05)
        converged += tp.converged
        worst = max(worst, marginal_violation(tp, a, b))
    ok = converged == 500 and worst < 1e-6
    report(2, "Sinkhorn feasibility", ok, f"converged {converged}/500, max violation {worst:.2e}")
    assert ok


def test_sinkhorn_near_optimal(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 6))
        C = rng.uniform(0, 2, size=(k, k))
        u = np.full(k, 1.0 / k)
        ratio = sinkhorn(C, u, u, epsilon=0.01).cost(C) / best_permutation_cost(C)
        worst = max(worst, ratio)
    ok = worst <= 1.01
    report(3, "Sinkhorn near-optimality", ok, f"worst cost ratio {worst:.5f} over 200 matrices")
    assert ok


def test_ema_closed_form(report):
    arch = ArchConfig()
    state = ModelState.create(arch, np.random.default_rng(0), np.float64)
    xi0 = {k: v.data.copy() for k, v in state.target.items()}
    theta = {k: v.data + np.random.default_rng(1).normal(size=v.shape) for k, v in state.target.items()}
    for k, v in theta.items():
        state.online[k].data = v
    m, n = 0.99, 100
    for _ in range(n):
        ema_update(state, m)
    dev = max(np.abs(state.target[k].data - (m**n * xi0[k] + (1 - m**n) * theta[k])).max()
              for k in theta)
    ok = dev < 1e-12
    report(4, "EMA closed form", ok, f"max deviation {dev:.2e}")
    assert ok


def test_overlapping_view_properties(report):
    K, iters = 4, 20
    cfg = ViewConfig(min_scale=DESK.min_scale)
    scene_cfg = SceneConfig.for_profile(DESK, min_shapes=K)
    prop_cfg = ProposalConfig.for_profile(DESK)
    filt = FilterConfig(min_scale=DESK.min_scale)
    problems, fallbacks = [], 0
    for i in range(1000):
        rng = sample_rng(11, i)
        sc = generate_scene(rng, scene_cfg)
        props = generate_proposals(sc.image, filt, rng, prop_cfg)
        vp = create_overlapping_views(sc.image, props, K, iters, rng, cfg)
        if vp.overlap != intersect(vp.s1, vp.s2):
            problems.append((i, "overlap"))
        if len(vp.instance_boxes) != K or not all(contains(vp.overlap, b) for b in vp.instance_boxes):
            problems.append((i, "containment"))
        if vp.fallback_used:
            fallbacks += 1
            naive = vp.instance_boxes[K - vp.naive_count:]
            for j, b in enumerate(naive):
                if min(b.w, b.h) < cfg.min_scale or not 1 / 3 <= b.w / b.h <= 3:
                    problems.append((i, "naive shape"))
                others = vp.instance_boxes[:K - vp.naive_count + j]
                if any(iou(b, o) > 0.5 for o in others):
                    problems.append((i, "naive iou"))
    rate = fallbacks / 1000
    ok = not problems and rate < 0.5
    report(5, "overlapping view properties", ok,
           f"1000 scenes, fallback rate {rate:.3f}, violations {problems[:5]}")
    assert ok


def test_loss_bounds(report):
    rng = np.random.default_rng(5)
    lo, hi, worst_sym, sum_ok = np.inf, -np.inf, 0.0, True
    for _ in range(1000):
        d, k = int(rng.integers(2, 33)), int(rng.integers(1, 9))
        f = SceneFeatures(*(Tensor(rng.normal(size=d)) for _ in range(4)))
        ls = scene_loss(f)
        la = affinity_loss(Tensor(rng.normal(size=d)), f)
        O, T = rng.normal(size=(k, d)), rng.normal(size=(k, d))
        u = np.full(k, 1.0 / k)
        li = instance_loss(O, T, sinkhorn(cost_matrix(O, T), u, u))
        worst_sym = max(worst_sym, abs(scene_loss(f.swapped()).item() - ls.item()))
        lo = min(lo, ls.item(), la.item())
        hi = max(hi, ls.item(), la.item())
        br = total_loss(ls, la, li)
        sum_ok &= br.total.item() == (ls.item() + la.item()) + li.item()
    ok = -2 <= lo and hi <= 2 and worst_sym == 0.0 and sum_ok
    report(6, "loss bounds", ok,
           f"range [{lo:.4f}, {hi:.4f}], swap asymmetry {worst_sym:.1e}, total=sum {sum_ok}")
    assert ok


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    write_dataset(root, 2000, 0, "desk")
    man = load_manifest(root)
    images, _, _ = load_images(man)
    return man, images, dataset_proposals(man, images, DESK)


@pytest.mark.slow
def test_directional_training_claim(report, desk_data, tmp_path):
    man, images, props = desk_data
    ds = instance_set(man, DESK.instance_size)
    arms = {"full": {}, "scene-only": {"use_scene_instance": False, "use_instance": False}}
    acc = {name: [] for name in arms}
    cpu = {name: [] for name in arms}
    for seed in range(3):
        for name, switches in arms.items():
            cfg = TrainConfig(manifest=man.root, seed=seed, out_dir=str(tmp_path / f"{name}{seed}"),
                              **switches)
            t0 = time.process_time()
            res = train(cfg, images, props)
            cpu[name].append(time.process_time() - t0)
            acc[name].append(probe_state(res.state, ds).accuracy)
    init = ModelState.create(TrainConfig().arch, np.random.default_rng([0, 1]))
    random_acc = probe_state(init, ds).accuracy
    med_full, med_scene = statistics.median(acc["full"]), statistics.median(acc["scene-only"])
    directional = med_full >= med_scene
    margin = acc["full"][0] >= random_acc + 10
    budget = max(max(v) for v in cpu.values()) < 30 * 60
    ok = directional and margin and budget
    report(7, "directional training claim", ok,
           f"full {acc['full']} median {med_full:.2f}; scene-only {acc['scene-only']} median "
           f"{med_scene:.2f}; random init {random_acc:.2f}; seed-0 margin "
           f"{acc['full'][0] - random_acc:+.2f}; max CPU per arm {max(max(v) for v in cpu.values()):.0f}s")
    assert ok


def test_determinism(report, desk_data, tmp_path):
    man, images, props = desk_data
    sub_i, sub_p = images[:96], props[:96]
    streams = []
    for run in ("a", "b"):
        cfg = TrainConfig(manifest=man.root, epochs=2, seed=3, out_dir=str(tmp_path / run))
        res = train(cfg, sub_i, sub_p)
        streams.append(open(res.metrics_path, "rb").read())
    same = streams[0] == streams[1] and len(streams[0]) > 0
    path = tmp_path / "rt.uvip"
    save_checkpoint(path, res.state)
    back = load_checkpoint(path)
    x = np.stack([np.transpose(img[:48, :48], (2, 0, 1)) for img in images[:8]])
    exact = all(getattr(res.state, fwd)(x).data.tobytes() == getattr(back, fwd)(x).data.tobytes()
                for fwd in ("forward_online_scene", "forward_target_scene"))
    ok = same and exact
    report(8, "determinism", ok, f"metrics streams identical {same}, checkpoint forward bit-exact {exact}")
    assert ok


def test_proposal_recall(report):
    cfg = SceneConfig.for_profile(PAPER)
    filt = FilterConfig(min_scale=PAPER.min_scale)
    prop_cfg = ProposalConfig.for_profile(PAPER)
    hit = total = 0
    for i in range(500):
        rng = sample_rng(21, i)
        sc = generate_scene(rng, cfg)
        props = generate_proposals(sc.image, filt, rng, prop_cfg)
        for gt in sc.boxes:
            if min(gt.w, gt.h) < 64:
                continue
            total += 1
            hit += any(iou(p, gt) >= 0.5 for p in props)
    recall = hit / total
    ok = recall >= 0.8
    report(9, "proposal recall", ok, f"recall {recall:.3f} over {total} shapes in 500 scenes")
    assert ok
