"""Fast invariant checks run by ``metavo selfcheck``.

``mutate="align-sign"`` swaps in an alignment blend with a flipped sign so
the suite can demonstrate that it catches that fault.
"""
from __future__ import annotations

import math
import time
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from . import feature_alignment as fa
from .adaptation import gradient_alignment, meta_objective, naive_online_step
from .evaluation import accumulate, ate, kitti_drift, rpe, scale_align
from .geometry import Intrinsics, PoseSE3, backproject_warp, euler_to_rotation, pixel_grid, synthesize_view
from .losses import LossWeights, total_loss
from .synthetic import SyntheticSceneConfig, generate_synthetic, motion_script

MUTATIONS = ("align-sign",)


class CheckResult(NamedTuple):
    name: str
    passed: bool
    wall_ms: float
    detail: str


def _flipped_align(prev, cur, beta):
    out = fa.FeatureStats()
    for name, p in prev.items():
        c = cur[name]
        out[name] = fa.LayerStats((1 - beta) * p.mu - beta * c.mu, (1 - beta) * p.sigma2 + beta * c.sigma2)
    return out


def check_warp_identity(ctx):
    K = Intrinsics(20.0, 20.0, 15.5, 7.5, 32, 16)
    depth = torch.rand(16, 32, dtype=torch.float64) + 1.0
    flow = backproject_warp(depth, PoseSE3.identity(), K)
    dev = float((flow.coords - pixel_grid(16, 32)).abs().max())
    return dev < 1e-9, f"max deviation {dev:.2e}"


def check_round_trip(ctx):
    cfg = SyntheticSceneConfig(motion=motion_script("lateral", 4, seed=1), height=16, width=32, seed=2)
    ds = generate_synthetic(cfg)
    worst = 0.0
    for k, rel in enumerate(ds.relative_poses(), start=1):
        src = torch.from_numpy(ds.frame(k - 1)).permute(2, 0, 1)[None]
        out, valid = synthesize_view(src, torch.from_numpy(ds.depths[k])[None], rel, ds.K)
        tgt = torch.from_numpy(ds.frame(k)).permute(2, 0, 1)[None]
        worst = max(worst, float(((out - tgt).abs().amax(1) * valid).max()))
    return worst < 1e-3, f"max reconstruction error {worst:.2e}"


def check_pose_gradients(ctx):
    g = torch.Generator().manual_seed(0)
    K = Intrinsics(20.0, 20.0, 15.5, 7.5, 32, 16)
    src = torch.rand(1, 3, 16, 32, dtype=torch.float64, generator=g)
    tgt = torch.rand(1, 3, 16, 32, dtype=torch.float64, generator=g) + 0.5
    depth = torch.rand(1, 16, 32, dtype=torch.float64, generator=g) + 2.0
    mask = torch.full((1, 16, 32), 0.7, dtype=torch.float64)

    def f(e, t):
        R = euler_to_rotation(e[:, 0], e[:, 1], e[:, 2])
        I_hat, valid = synthesize_view(src, depth, (R, t), K)
        return total_loss(I_hat, tgt, mask, valid, depth, LossWeights())

    e = torch.tensor([[0.01, -0.02, 0.015]], dtype=torch.float64, requires_grad=True)
    t = torch.tensor([[0.03, 0.01, -0.02]], dtype=torch.float64, requires_grad=True)
    ok = torch.autograd.gradcheck(f, (e, t), eps=1e-7, atol=1e-6, rtol=1e-3, raise_exception=False)
    return ok, "euler and translation gradients vs finite differences"


def check_meta_step(ctx):
    sq = lambda p, sign: sign * p["theta"] ** 2
    theta = {"theta": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
    step = naive_online_step(sq, theta, 1.0, 0.1).params["theta"].item()
    obj, _ = meta_objective(sq, theta, 1.0, 1.0, 0.1, second_order=True)
    g2 = torch.autograd.grad(obj, theta["theta"])[0].item()
    obj1, _ = meta_objective(sq, theta, 1.0, 1.0, 0.1, second_order=False)
    g1 = torch.autograd.grad(obj1, theta["theta"])[0].item()
    inner, _ = gradient_alignment(sq, theta, 1.0, -1.0)
    # 0.8 * 0.8 rounds to one ulp above the literal 0.64 in double precision
    exact_obj = obj.item() == 0.8 * 0.8 and abs(obj.item() - 0.64) <= math.ulp(0.64)
    ok = step == 0.8 and exact_obj and abs(g2 - 1.28) < 1e-9 and abs(g1 - 1.6) < 1e-9 and inner == -4.0
    return ok, f"step={step} objective={obj.item()} d2={g2} d1={g1} alignment={inner}"


def check_align_stats(ctx):
    align = ctx["align_stats"]
    prev = fa.FeatureStats({"a": fa.LayerStats(1.0, 2.0), "b": fa.LayerStats(-3.0, 0.5)})
    cur = fa.FeatureStats({"a": fa.LayerStats(3.0, 4.0), "b": fa.LayerStats(1.0, 1.5)})
    expect = {0.0: prev, 1.0: cur, 0.5: {"a": fa.LayerStats(2.0, 3.0), "b": fa.LayerStats(-1.0, 1.0)}}
    for beta, want in expect.items():
        got = align(prev, cur, beta)
        for k in want:
            if (got[k].mu, got[k].sigma2) != (want[k].mu, want[k].sigma2):
                return False, f"beta={beta} layer {k}: got {got[k]}, want {want[k]}"
    return True, "beta in {0, 0.5, 1}"


def check_collect_stats(ctx):
    x = torch.randn(2, 3, 4, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    vals = x.flatten().tolist()
    m = sum(vals) / len(vals)
    v = sum((a - m) ** 2 for a in vals) / len(vals)
    mu, s2 = fa.collect_stats(x)
    y = fa.normalize(x, mu, s2, 1.0, 0.0, 1e-5)
    ok = abs(mu - m) < 1e-10 and abs(s2 - v) < 1e-10 and abs(float(y.mean())) < 1e-6 and abs(float(y.var(unbiased=False)) - 1) < 1e-3
    return ok, f"mu={mu:.6f} sigma2={s2:.6f}"


def check_metrics(ctx):
    rel = motion_script("wander", 30, seed=3)
    gt = accumulate(rel, np.arange(31) / 10.0)
    ok = kitti_drift(gt, gt, (0.5, 1.0)) == (0.0, 0.0) and rpe(gt, gt, 10) == 0.0 and ate(gt, gt) == 0.0
    half = accumulate([PoseSE3(p.rotation, 0.5 * p.translation) for p in rel])
    s = scale_align(half, gt).scale
    return ok and abs(s - 2.0) < 1e-12, f"scale={s}"


CHECKS: List[tuple] = [
    ("warp identity", check_warp_identity),
    ("synthetic round trip", check_round_trip),
    ("pose gradients", check_pose_gradients),
    ("meta step", check_meta_step),
    ("align_stats", check_align_stats),
    ("collect_stats", check_collect_stats),
    ("metric identities", check_metrics),
]


def run_selfcheck(mutate: Optional[str] = None) -> List[CheckResult]:
    if mutate is not None and mutate not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutate!r}")
    ctx = {"align_stats": _flipped_align if mutate == "align-sign" else fa.align_stats}
    out = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(ctx)
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append(CheckResult(name, bool(ok), 1000 * (time.perf_counter() - t0), detail))
    return out


def format_report(results: List[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.wall_ms:9.1f} ms  {r.detail}" for r in results]
    n = sum(r.passed for r in results)
    lines.append(f"{n}/{len(results)} checks passed")
    return "\n".join(lines)
