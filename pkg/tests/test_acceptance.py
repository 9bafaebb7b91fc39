"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

import copy
import math
import time

import numpy as np
import pytest
import torch

from pcenhance.critic import Critic, CriticConfig
from pcenhance.distortion import QP_LADDER, DistortionProfile, bitrate_proxy, distort
from pcenhance.generator import Generator, GeneratorConfig, GroupedPatch, collate, prepare_patch
from pcenhance.metrics import RDCurve, bd_metrics, psnr
from pcenhance.objectives import generator_loss, gradient_penalty
from pcenhance.patches import (
    Patch,
    coverage,
    farthest_point_sampling,
    fuse_patches,
    generate_patches,
    group_patches,
    knn,
)
from pcenhance.pointcloud_io import PointCloud
from pcenhance.synthetic import textured_corpus
from pcenhance.trainer import TrainConfig, build_dataset, enhance_cloud, train

from conftest import ACCEPTANCE_LINES, random_cloud
from gradcheck_util import check_parameter_gradients, finite_difference, relative_error
from oracles import fps_bruteforce, knn_bruteforce


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number:02d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_ac01_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for trial in range(200):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, min(8, n) + 1))
        m = int(rng.integers(1, min(8, n) + 1))
        # half the instances on a coarse integer grid, where exact ties are common
        pts = rng.integers(0, 5, size=(n, 3)).astype(float) if trial % 2 else rng.normal(size=(n, 3))
        if farthest_point_sampling(pts, m).tolist() != fps_bruteforce(pts.tolist(), m):
            mismatches += 1
        if knn(pts, pts, k).tolist() != knn_bruteforce(pts.tolist(), pts.tolist(), k):
            mismatches += 1
    elapsed = time.perf_counter() - start
    report(1, "FPS/KNN oracle equivalence", mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches over 200 instances, {elapsed:.2f} s (limit 5 s)")


# 2 ---------------------------------------------------------------------------

def test_ac02_fusion_contract():
    pc = random_cloud(4096, seed=7, integer=False)
    m, ol = 16, 2
    patches = generate_patches(pc, m, ol)
    n = len(patches[0])
    rng = np.random.default_rng(0)
    enhanced = [(p.indices, rng.uniform(0, 255, len(p))) for p in patches]
    fallback = rng.uniform(0, 255, 4096)
    fused = fuse_patches(enhanced, 4096, fallback)

    per_point = [[] for _ in range(4096)]
    for idx, vals in enhanced:
        for i, v in zip(idx, vals):
            per_point[i].append(v)
    covered = np.array([len(v) > 0 for v in per_point])
    err = max(abs(fused[i] - sum(v) / len(v)) for i, v in enumerate(per_point) if v)
    uncovered_exact = np.array_equal(fused[~covered], fallback[~covered])
    multiplicity = int(coverage(patches, 4096).sum())
    ok = err <= 1e-6 and uncovered_exact and multiplicity == m * n
    report(2, "fusion contract", ok,
           f"max mean error {err:.2e}, {int((~covered).sum())} uncovered points exact={uncovered_exact}, "
           f"multiplicity {multiplicity} vs m*n={m * n}")


# 3 ---------------------------------------------------------------------------

def test_ac03_residual_identity():
    pc = textured_corpus(1, seed=3, side=32)[0]
    dist = distort(pc, DistortionProfile(40))
    torch.manual_seed(0)
    gens = {ch: Generator(GeneratorConfig(identity_init=False)).zero_output_layers() for ch in ("Y", "Cb", "Cr")}
    cfg = TrainConfig(n=256, k=20, ol=2, num_nei=6, batch_size=4)
    out = enhance_cloud(dist, gens, cfg)
    attrs_same = np.array_equal(out.attributes, dist.attributes)
    geo_same = np.array_equal(out.geometry, dist.geometry)
    report(3, "residual identity", attrs_same and geo_same and out == dist,
           f"attributes bit-identical={attrs_same}, geometry bit-identical={geo_same} (N={len(pc)}, default widths)")


# 4 ---------------------------------------------------------------------------

def _tiny_setup(dtype):
    gcfg = GeneratorConfig(k=4, dga_width=2, heads=2, attn_hidden=4, gfp_width=8, grb_width=8, fs_widths=(8, 4),
                           identity_init=False)
    ccfg = CriticConfig(k=4, widths=(4, 8), mlp_widths=(8,))
    pc = random_cloud(32, seed=21, integer=False)
    groups = group_patches(generate_patches(pc, 4, 2), 2)
    items = [prepare_patch(g, 0, 4) for g in groups[:2]]
    assert len(items[0].attribute) == 16
    batch = collate(items, dtype)
    target = batch.attribute + torch.as_tensor(np.random.default_rng(0).normal(0, 6, (2, 16)))
    return gcfg, ccfg, batch, target


def test_ac04_gradient_correctness():
    gcfg, ccfg, b32, target = _tiny_setup(torch.float32)
    b64 = b32.to(torch.float64)
    torch.manual_seed(4)
    gen32, critic32 = Generator(gcfg), Critic(ccfg)
    with torch.no_grad():
        critic32.attention.gamma.fill_(0.3)
    gen64, critic64 = copy.deepcopy(gen32).double(), copy.deepcopy(critic32).double()

    def lg(gen, critic, batch):
        def f():
            enhanced = gen(batch)
            return generator_loss(enhanced, target, critic(enhanced, batch.idx), omega=60.0)
        return f

    params64 = list(gen64.parameters()) + list(critic64.parameters())
    params32 = list(gen32.parameters()) + list(critic32.parameters())
    e_lg64, _, _ = check_parameter_gradients(lg(gen64, critic64, b64), params64, per_tensor=3)
    e_lg32, _, _ = check_parameter_gradients(lg(gen32, critic32, b32), params32,
                                             lg(gen64, critic64, b64), params64, per_tensor=3)

    # critic score gradient with respect to its input, as used by the penalty
    x64 = (b64.attribute + 10.0).clone().requires_grad_(True)
    (g64,) = torch.autograd.grad(critic64(x64, b64.idx).sum(), x64)
    fd = finite_difference(lambda: critic64(x64, b64.idx).sum(), [(x64, j) for j in range(x64.numel())], 1e-5)
    e_d64 = relative_error(g64.reshape(-1).numpy(), fd)
    x32 = x64.detach().float().requires_grad_(True)
    (g32,) = torch.autograd.grad(critic32(x32, b32.idx).sum(), x32)
    e_d32 = relative_error(g32.reshape(-1).numpy(), fd)

    # penalty parameter gradients (second order through the critic)
    u = torch.tensor([0.25, 0.7], dtype=torch.float64)
    fake = target + 15

    def gp(critic, dt):
        return lambda: gradient_penalty(critic, target.to(dt), fake.to(dt), b64.idx, u=u.to(dt))

    e_gp64, _, _ = check_parameter_gradients(gp(critic64, torch.float64), list(critic64.parameters()), per_tensor=3)
    e_gp32, _, _ = check_parameter_gradients(gp(critic32, torch.float32), list(critic32.parameters()),
                                             gp(critic64, torch.float64), list(critic64.parameters()), per_tensor=3)

    ok = max(e_lg64, e_d64, e_gp64) <= 1e-5 and max(e_lg32, e_d32, e_gp32) <= 1e-3
    report(4, "gradient correctness", ok,
           f"double: L_G {e_lg64:.1e}, dD/dx {e_d64:.1e}, dGP {e_gp64:.1e} (<=1e-5); "
           f"single: L_G {e_lg32:.1e}, dD/dx {e_d32:.1e}, dGP {e_gp32:.1e} (<=1e-3)")


# 5 ---------------------------------------------------------------------------

def test_ac05_gradient_penalty_calibration():
    rng = np.random.default_rng(5)
    w = torch.as_tensor(rng.normal(size=64))
    w = w / w.norm()
    real = torch.as_tensor(rng.uniform(0, 255, (6, 64)))
    fake = torch.as_tensor(rng.uniform(0, 255, (6, 64)))
    idx = torch.zeros(6, 64, 1, dtype=torch.long)
    linear = gradient_penalty(lambda x, _: x @ w, real, fake, idx).item()
    constant = gradient_penalty(lambda x, _: torch.full((x.shape[0],), 2.5, dtype=x.dtype), real, fake, idx).item()
    attached = gradient_penalty(lambda x, _: 0.0 * x.sum(dim=1) - 4.0, real, fake, idx).item()
    ok = linear <= 1e-10 and constant == 1.0 and attached == 1.0
    report(5, "gradient-penalty calibration", ok,
           f"unit-norm linear critic {linear:.1e} (<=1e-10), constant critic {constant!r} and {attached!r} (==1)")


# 6 ---------------------------------------------------------------------------

def _unique_distance_patch():
    rng = np.random.default_rng(6)
    pc = PointCloud(rng.uniform(0, 1, (512, 3)), rng.uniform(0, 255, (512, 3)))
    groups = group_patches(generate_patches(pc, 8, 2), 6)
    g = groups[3]
    d = np.sqrt(((g.center.geometry[:, None] - g.center.geometry[None]) ** 2).sum(-1))
    upper = d[np.triu_indices(len(d), 1)]
    assert len(np.unique(upper)) == len(upper), "patch distances are not unique"
    return g


def test_ac06_permutation():
    g = _unique_distance_patch()
    n = len(g.center)
    perm = np.concatenate([[0], 1 + np.random.default_rng(1).permutation(n - 1)])  # the seed stays first
    c = g.center
    g_perm = GroupedPatch(Patch(points=c.points[perm], indices=c.indices[perm], seed_index=c.seed_index), g.neighbors)
    a_item, b_item = prepare_patch(g, 0, 20), prepare_patch(g_perm, 0, 20)

    torch.manual_seed(6)
    gen = Generator(GeneratorConfig(identity_init=False)).eval()
    with torch.no_grad():
        da = gen.delta(collate([a_item]))[0]
        db = gen.delta(collate([b_item]))[0]
        ra = gen(collate([a_item]))[0]
        rb = gen(collate([b_item]))[0]
    gen_dev = (da[perm] - db).abs().max().item()
    raw_dev = (ra[perm] - rb).abs().max().item()

    critic = Critic(CriticConfig())
    with torch.no_grad():
        critic.attention.gamma.fill_(0.5)
        sa = critic(torch.as_tensor(a_item.attribute)[None], torch.as_tensor(a_item.idx)[None])
        sb = critic(torch.as_tensor(b_item.attribute)[None], torch.as_tensor(b_item.idx)[None])
    crit_dev = (sa - sb).abs().item()
    ok = gen_dev <= 1e-5 and crit_dev <= 1e-5
    report(6, "permutation equivariance/invariance", ok,
           f"generator output deviation {gen_dev:.1e} (normalized units; {raw_dev:.1e} in 0-255 units), "
           f"critic score deviation {crit_dev:.1e} (<=1e-5, float32, n={n})")


# 7 ---------------------------------------------------------------------------

def _random_monotone_curve(rng):
    rates = rng.uniform(0.02, 0.1) * np.cumprod(rng.uniform(1.2, 3.0, 4))
    psnrs = rng.uniform(22, 28) + np.cumsum(rng.uniform(0.5, 4.0, 4))
    return RDCurve(zip(rates, psnrs))


def test_ac07_bjontegaard_suite():
    base = RDCurve([(0.08, 27.1), (0.2, 30.8), (0.5, 34.6), (1.2, 38.0)])
    same = bd_metrics(base, base)
    doubled = bd_metrics(base, RDCurve([(2 * r, q) for r, q in base.points]))
    shifted = bd_metrics(base, RDCurve([(r, q + 0.5) for r, q in base.points]))
    rng = np.random.default_rng(7)
    worst_psnr, worst_rate, checked = 0.0, 0.0, 0
    while checked < 50:
        a, b = _random_monotone_curve(rng), _random_monotone_curve(rng)
        try:
            ab, ba = bd_metrics(a, b), bd_metrics(b, a)
        except ValueError:
            continue  # disjoint ranges; draw again
        worst_psnr = max(worst_psnr, abs(ab.bd_psnr_db + ba.bd_psnr_db))
        worst_rate = max(worst_rate, abs((1 + ab.bd_rate_percent / 100) * (1 + ba.bd_rate_percent / 100) - 1))
        checked += 1
    ok = (same.bd_rate_percent == 0.0 and same.bd_psnr_db == 0.0
          and abs(doubled.bd_rate_percent - 100) <= 1e-6 and abs(shifted.bd_psnr_db - 0.5) <= 1e-9
          and worst_psnr <= 1e-9 and worst_rate <= 1e-6)
    report(7, "Bjontegaard suite", ok,
           f"identical ({same.bd_rate_percent}%, {same.bd_psnr_db} dB), doubled rate {doubled.bd_rate_percent:.9f}%, "
           f"+0.5 dB shift {shifted.bd_psnr_db:.12f} dB, antisymmetry on 50 curves: "
           f"BD-PSNR {worst_psnr:.1e}, BD-rate product {worst_rate:.1e}")


# 8 ---------------------------------------------------------------------------

def _toy_shift_dataset(seed):
    rng = np.random.default_rng(seed)
    geo = rng.uniform(0, 1, (512, 3))
    real = PointCloud(geo, rng.uniform(0, 200, (512, 3)))
    fake = real.with_attributes(real.attributes + 32.0)
    return build_dataset(real, fake, n=64, ol=2, num_nei=2)


def test_ac08_wasserstein_separation():
    gaps = []
    for seed in (0, 1, 2):
        dataset = _toy_shift_dataset(seed)
        # identity generator with lr 0: its output is exactly real + 32 and never changes
        cfg = TrainConfig(epochs=100, batch_size=4, lr_generator=0.0, lr_discriminator=1e-4, k=20, n=64,
                          num_nei=2, seed=seed, max_steps=200, val_fraction=0.0)
        result = train(dataset, cfg)
        assert result.steps == 200
        items = [prepare_patch(g, 0, 20) for g, _ in dataset]
        batch = collate(items)
        real = torch.as_tensor(np.stack([t.attributes[:, 0] for _, t in dataset]))
        with torch.no_grad():
            fake = result.generator(batch)
            assert torch.equal(fake, real + 32.0)
            gaps.append((result.critic(real, batch.idx).mean() - result.critic(fake, batch.idx).mean()).item())
    report(8, "Wasserstein separation", all(g > 0 for g in gaps),
           "E[D(real)] - E[D(fake)] after 200 critic steps: " + ", ".join(f"seed {s}: {g:+.4f}" for s, g in enumerate(gaps)))


# 9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_ac09_desk_scale_smoke():
    start = time.perf_counter()
    torch.manual_seed(0)
    clouds = textured_corpus(6, seed=0, side=64)
    assert all(len(c) == 4096 for c in clouds)
    profile = DistortionProfile(40)
    distorted = [distort(c, profile) for c in clouds]
    dataset = []
    for o, d in zip(clouds[:5], distorted[:5]):
        dataset += build_dataset(o, d, n=512, ol=2, num_nei=6)
    cfg = TrainConfig(
        epochs=1000, batch_size=4, lr_generator=1e-3, lr_discriminator=1e-4, k=20, n=512, ol=2, num_nei=6,
        channel="Y", seed=0, max_steps=300, val_fraction=0.0,
        generator=GeneratorConfig(dga_width=16, heads=2, attn_hidden=16, gfp_width=32, grb_width=32, fs_widths=(32, 16)),
        critic=CriticConfig(widths=(16, 32), mlp_widths=(32, 16)),
    )
    result = train(dataset, cfg)
    enhanced = enhance_cloud(distorted[5], {"Y": result.generator}, cfg, channels=("Y",))
    base = psnr(distorted[5].attributes[:, 0], clouds[5].attributes[:, 0])
    after = psnr(enhanced.attributes[:, 0], clouds[5].attributes[:, 0])
    elapsed = time.perf_counter() - start
    ok = result.steps == 300 and after - base >= 0.1 and elapsed <= 15 * 60
    report(9, "desk-scale smoke", ok,
           f"held-out Y-PSNR {base:.3f} -> {after:.3f} dB (gain {after - base:+.3f}, need >= 0.1) "
           f"after {result.steps} generator steps, {elapsed / 60:.1f} min (limit 15)")


# 10 --------------------------------------------------------------------------

def test_ac10_rd_plumbing():
    pc = textured_corpus(1, seed=10, side=64)[0]
    points = []
    for qp in sorted(QP_LADDER, reverse=True):  # 51 down to 22: increasing rate
        prof = DistortionProfile(qp)
        out = distort(pc, prof)
        points.append((bitrate_proxy(out, prof), psnr(out.attributes, pc.attributes)))
    rates, quals = np.array(points).T
    monotone = bool(np.all(np.diff(rates) > 0) and np.all(np.diff(quals) > 0))
    curve = RDCurve(points)
    res = bd_metrics(curve, curve)
    better = bd_metrics(curve, RDCurve([(r * 0.9, q) for r, q in points]))
    ok = monotone and res.bd_rate_percent == 0.0 and math.isclose(better.bd_rate_percent, -10.0, abs_tol=1e-6)
    report(10, "RD plumbing", ok,
           f"ladder {sorted(QP_LADDER, reverse=True)} -> rates {np.round(rates, 3).tolist()} bpip, "
           f"PSNR {np.round(quals, 2).tolist()} dB, monotone={monotone}, BD self {res.bd_rate_percent}%, "
           f"10% cheaper {better.bd_rate_percent:.6f}%")
