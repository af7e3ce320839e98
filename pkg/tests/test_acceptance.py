"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line through the ``criterion`` fixture; the
lines are printed as they happen and repeated in the pytest terminal summary.
Criteria 6-8 are long end-to-end runs (minutes to about an hour each).
"""

import contextlib
import io
import math
import time

import numpy as np
import pytest
import torch

from oracles import oracle_self, oracle_uplift, oracle_upsample, random_knn
from splatavatar import cli
from splatavatar.attention import AttentionConfig, KnnSelfAttention, UpliftCrossAttention, UpsampleAttention
from splatavatar.diffcore import grad_check, grad_check_params
from splatavatar.diffusion import (
    DenoiserConfig,
    DenoiserNet,
    ParamStats,
    build_graphs,
    build_schedule,
    denormalize_params,
    encode_condition,
    normalize_params,
    random_attributes,
    train_step_loss,
)
from splatavatar.gaussians import GaussianSet
from splatavatar.geometry.camera import Camera
from splatavatar.heads import ConstraintRanges, GaussianHead, ShapeMLP, predict_shape, regress_gaussians
from splatavatar.losses import render_loss
from splatavatar.pipeline.config import RunConfig, dump_config
from splatavatar.pipeline.data import body_for, cameras, generate_dataset, ranges_from_config, render_params, subset_body
from splatavatar.pipeline.fitting import fit_gaussians, view_psnrs
from splatavatar.pipeline.sampling import alignment_prompts, alignment_study
from splatavatar.pipeline.training import FRONT, BACK, train_diffusion, train_text_twin, train_uplift, view_psnr_table
from splatavatar.rasterizer import ALPHA_CAP, DILATION, render

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------- 1. attention oracles


def test_criterion_01_attention_oracle_equivalence(criterion):
    worst, slowest = 0.0, 0.0
    for heads in (1, 2, 4):
        rng = np.random.default_rng(heads)
        torch.manual_seed(heads)

        up = UpliftCrossAttention(16, AttentionConfig(heads, 8, 3)).double()
        pts, cells = rng.uniform(-1, 1, (64, 3)), rng.normal(size=(49, 16))
        t = time.perf_counter()
        got = up(torch.tensor(pts), torch.tensor(cells)).detach().numpy()
        slowest = max(slowest, time.perf_counter() - t)
        worst = max(worst, np.abs(got - oracle_uplift(up, pts, cells)).max())

        ups = UpsampleAttention(16, AttentionConfig(heads, 8, 3)).double()
        coarse, feats = rng.uniform(-1, 1, (16, 3)), rng.normal(size=(16, 16))
        nbrs = random_knn(64, 16, 8, rng)
        t = time.perf_counter()
        got = ups(torch.tensor(pts), torch.tensor(coarse), torch.tensor(nbrs), torch.tensor(feats)).detach().numpy()
        slowest = max(slowest, time.perf_counter() - t)
        worst = max(worst, np.abs(got - oracle_upsample(ups, pts, coarse, nbrs, feats)).max())

        sa = KnnSelfAttention(16, AttentionConfig(heads, 16, 3)).double()
        feats = rng.normal(size=(64, 16))
        nbrs = random_knn(64, 64, 8, rng)
        t = time.perf_counter()
        got = sa(torch.tensor(pts), torch.tensor(feats), torch.tensor(nbrs)).detach().numpy()
        slowest = max(slowest, time.perf_counter() - t)
        worst = max(worst, np.abs(got - oracle_self(sa, pts, feats, nbrs)).max())
    ok = worst <= 1e-6 and slowest < 1.0
    assert criterion(1, "attention oracle equivalence", ok, f"max abs error {worst:.2e} (tol 1e-6), slowest op {slowest:.3f} s (limit 1 s)")


# ---------------------------------------------------------------- 2. shape chains


def test_criterion_02_shape_chains(criterion):
    n, m, c, h, d = 600, 256, 64, 2, 16
    tr = {}
    UpliftCrossAttention(c, AttentionConfig(h, d, 4))(torch.randn(n, 3), torch.randn(m, c), trace=tr)
    expect = {
        "query": (n, h, 1, d), "key_t": (1, h, d, m), "value": (1, h, m, c // h),
        "weights": (n, h, 1, m), "heads_out": (n, h, 1, c // h), "output": (n, c),
    }
    checks = [(f"uplift.{k}", tuple(tr[k].shape), v) for k, v in expect.items()]

    big, k, f = 2400, 8, 64
    tr = {}
    nbrs = torch.tensor(random_knn(big, n, k, np.random.default_rng(0)))
    UpsampleAttention(f, AttentionConfig(4, d, 4))(torch.randn(big, 3), torch.randn(n, 3), nbrs, torch.randn(n, f), trace=tr)
    expect = {
        "query": (big, 4, 1, d), "key_t": (big, 4, d, k), "value": (big, 4, k, f // 4),
        "weights": (big, 4, 1, k), "heads_out": (big, 4, 1, f // 4), "output": (big, f),
    }
    checks += [(f"upsample.{k_}", tuple(tr[k_].shape), v) for k_, v in expect.items()]

    sd = 32
    tr = {}
    nbrs = torch.tensor(random_knn(big, big, k, np.random.default_rng(1)))
    KnnSelfAttention(f, AttentionConfig(4, sd, 4))(torch.randn(big, 3), torch.randn(big, f), nbrs, trace=tr)
    expect = {
        "key_features": (big, 4, k, sd // 4), "expanded": (big, 4, 1, sd // 4),
        "expanded_neighbors": (big, 4, k, sd // 4), "keys": (big, 4, k, sd // 4),
    }
    checks += [(f"self.{k_}", tuple(tr[k_].shape), v) for k_, v in expect.items()]
    bad = [f"{name} {got} != {want}" for name, got, want in checks if got != want]
    assert criterion(2, "shape chains", not bad, f"{len(checks) - len(bad)}/{len(checks)} intermediate shapes exact" + (f"; {bad}" if bad else ""))


# ---------------------------------------------------------------- 3. gradients


def _gradient_reports():
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    out = {}

    def dbl(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    pts, cells = dbl(5, 3), dbl(6, 4)
    up = UpliftCrossAttention(4, AttentionConfig(2, 3, 2)).double()
    out["uplift/features"] = grad_check(lambda x: (up(pts, x) ** 2).sum(), cells)
    out["uplift/points"] = grad_check(lambda x: (up(x, cells) ** 2).sum(), pts)
    for name, rep in grad_check_params(lambda: (up(pts, cells) ** 2).sum(), up, ["query.linear.weight", "key.linear.weight"]).items():
        out[f"uplift/{name}"] = rep

    nbrs = torch.tensor([[0, 1], [1, 2], [2, 0], [0, 2], [1, 0]])
    ups = UpsampleAttention(4, AttentionConfig(2, 3, 2)).double()
    coarse, feats = dbl(3, 3), dbl(3, 4)
    out["upsample/features"] = grad_check(lambda x: (ups(pts, coarse, nbrs, x) ** 2).sum(), feats)
    for name, rep in grad_check_params(lambda: (ups(pts, coarse, nbrs, feats) ** 2).sum(), ups, ["query.linear.weight", "key.linear.weight"]).items():
        out[f"upsample/{name}"] = rep

    sa = KnnSelfAttention(4, AttentionConfig(2, 4, 2)).double()
    p6, f6 = dbl(6, 3), dbl(6, 4)
    knn6 = torch.tensor(random_knn(6, 6, 3, np.random.default_rng(0)))
    out["self/features"] = grad_check(lambda x: (sa(p6, x, knn6) ** 2).sum(), f6)
    out["self/points"] = grad_check(lambda x: (sa(x, f6, knn6) ** 2).sum(), p6)
    names = ["query.linear.weight", "key.linear.weight", "rel.expand.weight", "rel.mix.weight"]
    for name, rep in grad_check_params(lambda: (sa(p6, f6, knn6) ** 2).sum(), sa, names).items():
        out[f"self/{name}"] = rep

    ranges = ConstraintRanges()
    head = GaussianHead(4).double()
    regions = torch.tensor([0, 1, 2, 0, 0, 1])
    rot = torch.eye(3, dtype=torch.float64).expand(6, 3, 3)

    def heads_sum(x):
        gs = regress_gaussians(x, regions, ranges, head, p6, rot)
        return gs.displacement.sum() + gs.scale.sum() + gs.color.sum()

    out["heads/regress"] = grad_check(heads_sum, f6)
    mlp = ShapeMLP(4 + 6, hidden=5).double()
    w = dbl(10)
    out["heads/shape"] = grad_check(lambda x: (predict_shape(x, mlp) * w).sum(), dbl(2, 3, 4))

    cam = Camera((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, -1.0, 0.0), math.radians(60), 32, 32)
    base = torch.tensor([[0.013, -0.021, 2.0], [0.117, 0.052, 2.3], [-0.091, 0.083, 2.6]], dtype=torch.float64)
    sc0 = torch.tensor([[0.03, 0.04, 0.02], [0.05, 0.03, 0.04], [0.04, 0.04, 0.03]], dtype=torch.float64)
    col0 = torch.tensor([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.3, 0.3, 0.9]], dtype=torch.float64)
    rot3 = torch.eye(3, dtype=torch.float64).expand(3, 3, 3)
    target = torch.rand(32, 32, 3, generator=g, dtype=torch.float64)

    def rl(d=None, s=None, c=None):
        gs = GaussianSet(base, torch.zeros_like(base) if d is None else d, sc0 if s is None else s, col0 if c is None else c, rot3)
        return render_loss(render(gs, cam), target)

    out["render_loss/color"] = grad_check(lambda c: rl(c=c), col0)
    out["render_loss/displacement"] = grad_check(lambda d: rl(d=d), torch.zeros_like(base), eps=1e-6)
    out["render_loss/scale"] = grad_check(lambda s: rl(s=s), sc0, eps=1e-6)

    cfg = DenoiserConfig(widths=(16, 32), k=4, t_dim=16, heads=2, attn_dim=8, pe_frequencies=2)
    graphs = build_graphs(np.random.default_rng(0).uniform(-1, 1, (24, 3)), levels=2, k=4)
    for lv in range(2):
        graphs.points[lv] = graphs.points[lv].double()
    net = DenoiserNet(cfg).double()
    x0 = torch.rand(1, 24, 9, generator=g, dtype=torch.float64) * 2 - 1
    noise = dbl(1, 24, 9)
    cond = encode_condition(random_attributes(np.random.default_rng(0))).encoding.double()
    sched = build_schedule()
    names = ["out.weight", "cond_proj.weight", "enc.0.fc2.weight", "down_attn.0.key.linear.weight", "up_proj.0.weight"]
    for name, rep in grad_check_params(lambda: train_step_loss(x0, 300, noise, cond, net, graphs, sched, p_drop=0.0), net, names).items():
        out[f"train_step_loss/{name}"] = rep
    return out


def test_criterion_03_gradient_correctness(criterion):
    t = time.perf_counter()
    reports = _gradient_reports()
    elapsed = time.perf_counter() - t
    worst_name = max(reports, key=lambda k: reports[k].max_rel_error)
    worst = reports[worst_name].max_rel_error
    ok = worst <= 1e-3 and elapsed < 120
    detail = f"{len(reports)} checks, worst rel error {worst:.2e} ({worst_name}), {elapsed:.1f} s (limits 1e-3, 120 s)"
    assert criterion(3, "gradient correctness", ok, detail)


# ---------------------------------------------------------------- 4. rasterizer analytics


def test_criterion_04_rasterizer_analytics(criterion):
    cam = Camera((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, -1.0, 0.0), math.radians(60), 64, 64)
    z, sigma = 2.0, 10.0
    s = math.sqrt(sigma**2 - DILATION) * z / cam.focal
    one = lambda pos, sc, col: GaussianSet(  # noqa: E731
        torch.tensor(pos, dtype=torch.float64), torch.zeros(len(pos), 3, dtype=torch.float64),
        torch.tensor(sc, dtype=torch.float64), torch.tensor(col, dtype=torch.float64),
        torch.eye(3, dtype=torch.float64).expand(len(pos), 3, 3),
    )
    img = render(one([[0, 0, z]], [[s] * 3], [[0.2, 0.7, 0.4]]), cam, (1.0, 1.0, 1.0))
    center_err = abs(float(img.alpha[32, 32]) - ALPHA_CAP)
    ring_err = abs(float(img.alpha[32, 42]) - math.exp(-0.5))

    red, blue = [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]
    sf = math.sqrt(64 - DILATION) / cam.focal
    occl = render(one([[0, 0, 1.0], [0, 0, 2.0]], [[sf] * 3, [2 * sf] * 3], [red, blue]), cam, (1.0, 1.0, 1.0)).rgb[32, 32]
    a = ALPHA_CAP
    expect = a * torch.tensor(red, dtype=torch.float64) + (1 - a) * (a * torch.tensor(blue, dtype=torch.float64) + (1 - a))
    occl_exact = torch.equal(occl, expect) or float((occl - expect).abs().max()) < 1e-15

    bg = (0.3, 0.5, 0.7)
    empty = render(one(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))), cam, bg)
    empty_exact = torch.equal(empty.rgb, torch.tensor(bg, dtype=torch.float64).expand(64, 64, 3)) and not empty.alpha.any()

    ok = center_err <= 1e-3 and ring_err <= 1e-3 and occl_exact and empty_exact
    detail = (
        f"center alpha error {center_err:.1e}, 1-sigma alpha error {ring_err:.1e} (tol 1e-3); "
        f"occlusion {'exact' if occl_exact else 'MISMATCH'}; empty scene {'exact' if empty_exact else 'MISMATCH'}"
    )
    assert criterion(4, "rasterizer analytics", ok, detail)


# ---------------------------------------------------------------- 5. normalisation


def test_criterion_05_normalization(criterion):
    rng = np.random.default_rng(0)
    corpus = rng.normal(size=(16, 200, 9)) * rng.uniform(0.01, 1, 9)
    stats = ParamStats.from_corpus(corpus)
    lo = torch.tensor(stats.x_min, dtype=torch.float32)[None]
    hi = torch.tensor(stats.x_max, dtype=torch.float32)[None]
    extremes = torch.equal(normalize_params(lo, stats), -torch.ones(1, 9)) and torch.equal(normalize_params(hi, stats), torch.ones(1, 9))
    x = torch.tensor(corpus.reshape(-1, 9), dtype=torch.float32)
    rt = float((denormalize_params(normalize_params(x, stats), stats) - x).abs().max())
    # symbol-for-symbol: 2 (x - x_min) / (x_max - x_min) - 1 and its reverse
    xd = corpus.reshape(-1, 9)
    y = 2 * (xd - stats.x_min) / (stats.x_max - stats.x_min) - 1
    fwd = float(np.abs(normalize_params(torch.tensor(xd), stats).numpy() - y).max())
    back = float(np.abs(denormalize_params(torch.tensor(y), stats).numpy() - ((y + 1) / 2 * (stats.x_max - stats.x_min) + stats.x_min)).max())
    ok = extremes and rt <= 1e-6 and fwd <= 1e-12 and back <= 1e-12
    detail = f"extremes {'exactly +-1' if extremes else 'NOT exact'}; 32-bit round trip {rt:.1e} (tol 1e-6); formula deviation {max(fwd, back):.1e}"
    assert criterion(5, "normalization", ok, detail)


# ---------------------------------------------------------------- 6. fitting


def test_criterion_06_fitting(criterion):
    cfg = RunConfig(n_points=2400, image_size=128)
    body = body_for(cfg)
    sample = generate_dataset(cfg, body, 1)[0]
    cams = cameras(cfg)
    targets = render_params(body, sample.gt_params, cams, sample.beta, cfg.background)
    iters = 400
    t = time.perf_counter()
    res = fit_gaussians(targets, cams, body, ranges_from_config(cfg), iters, cfg.fit_lr, cfg.w_l1, cfg.w_ssim, sample.beta, cfg.background)
    elapsed = time.perf_counter() - t
    scores = view_psnrs(res.gaussians, cams, targets, cfg.background)
    ok = min(scores) >= 28.0 and elapsed <= 300
    detail = f"PSNR per view {', '.join(f'{v:.1f}' for v in scores)} dB (need >= 28) after {iters} iters in {elapsed:.0f} s (limit 300 s)"
    assert criterion(6, "self-consistency fitting", ok, detail)


# ---------------------------------------------------------------- 7. uplift overfit and twin ablation


def test_criterion_07_uplift_overfit_and_twin_ablation(criterion):
    cfg = RunConfig()
    body = body_for(cfg)
    samples = generate_dataset(cfg, body, 4)
    steps = 1000
    twin, _ = train_text_twin(samples, cfg, body, steps=steps)
    with_twin, _ = train_uplift(samples, cfg, body, twin, steps=steps)
    without, _ = train_uplift(samples, cfg.replace(twin_regularization=False), body, None, steps=steps)
    on = view_psnr_table(with_twin, samples, cfg)
    off = view_psnr_table(without, samples, cfg)
    front_min = float(on[:, FRONT].min())
    gain = float(on[:, BACK].mean() - off[:, BACK].mean())
    ok = front_min >= 25.0 and gain >= 1.0
    detail = (
        f"front PSNR {', '.join(f'{v:.1f}' for v in on[:, FRONT])} dB (need >= 25 on all); "
        f"mean back PSNR {on[:, BACK].mean():.2f} with twin vs {off[:, BACK].mean():.2f} without, gain {gain:+.2f} dB (need >= +1)"
    )
    assert criterion(7, "uplift overfit and twin ablation", ok, detail)


# ---------------------------------------------------------------- 8. diffusion alignment


def test_criterion_08_diffusion_alignment(criterion):
    cfg = RunConfig()
    t = time.perf_counter()
    body = body_for(cfg)
    samples = generate_dataset(cfg, body, 256)
    sub, rows = subset_body(body, cfg.diffusion_points, cfg.body_seed)
    corpus = np.stack([s.gt_params[rows] for s in samples])
    conds = torch.stack([s.condition.encoding for s in samples])
    model = train_diffusion(corpus, conds, sub.anchors, cfg)
    train_time = time.perf_counter() - t
    prompts = alignment_prompts(20, cfg.seed)
    guided = alignment_study(model, sub, cfg, prompts, cfg.guidance, cfg.seed)
    plain = alignment_study(model, sub, cfg, prompts, 0.0, cfg.seed)
    ok = guided >= 0.9 and plain < 0.4 and train_time <= 7200
    detail = (
        f"top-colour alignment {100 * guided:.0f}% at w={cfg.guidance:g} (need >= 90%), {100 * plain:.0f}% at w=0 (need < 40%); "
        f"data + training {train_time / 60:.0f} min (limit 120)"
    )
    assert criterion(8, "diffusion alignment", ok, detail)


# ---------------------------------------------------------------- 9. complexity


def test_criterion_09_uplift_linear_in_points(criterion):
    cfg = RunConfig()
    torch.manual_seed(0)
    mod = UpliftCrossAttention(cfg.feature_channels, AttentionConfig(cfg.uplift_heads, cfg.uplift_dim, cfg.pe_frequencies))
    cells = torch.randn(cfg.feature_size**2, cfg.feature_channels)
    pts = {2400: torch.randn(2400, 3), 4800: torch.randn(4800, 3)}
    best = {n: math.inf for n in pts}
    with torch.no_grad():
        for _ in range(10):
            for n, p in pts.items():
                t = time.perf_counter()
                mod(p, cells)
                best[n] = min(best[n], time.perf_counter() - t)
    ratio = best[4800] / best[2400]
    detail = f"N=2400 {1e3 * best[2400]:.1f} ms, N=4800 {1e3 * best[4800]:.1f} ms, ratio {ratio:.2f} (limit 2.5)"
    assert criterion(9, "uplift complexity scaling", ratio <= 2.5, detail)


# ---------------------------------------------------------------- 10. CLI determinism


def _cli_run(root, cfg_path):
    """Run every command once into ``root``; returns the captured stdout per command."""
    c = ["--config", cfg_path]
    data = root / "data.splt"
    prompt = [f"--prompt-{k.replace('_', '-')}={v}" for k, v in random_attributes(np.random.default_rng(0)).items()]
    commands = [
        ["gen-data", *c, "--out", data],
        ["fit", *c, "--data", data, "--out", root / "fit.splt", "--index", "0", "--iters", "5"],
        ["render", *c, "--params", root / "fit.splt", "--out", root / "views"],
        ["train-twin", *c, "--data", data, "--out", root / "twin.splt", "--steps", "3"],
        ["train-uplift", *c, "--data", data, "--out", root / "up.splt", "--steps", "3", "--twin", root / "twin.splt"],
        ["train-diffusion", *c, "--data", data, "--out", root / "diff.splt", "--steps", "3"],
        ["sample", "--checkpoint", root / "diff.splt", "--out", root / "sample", "--seed", "7", *prompt],
        ["eval", *c, "--out", root / "eval", "--checkpoint", root / "up.splt", "--data", data,
         "--diffusion", root / "diff.splt", "--n-samples", "3"],
        ["eval", "--out", root / "eval_images", "--pred", root / "views", "--target", root / "sample"],
    ]
    outputs = []
    for argv in commands:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main([str(a) for a in argv])
        assert code == 0, argv[0]
        outputs.append(buf.getvalue().replace(str(root), "<root>"))
    return outputs


def test_criterion_10_cli_determinism(criterion, tmp_path):
    cfg = RunConfig(
        n_points=300, image_size=32, feature_size=8, feature_channels=16, subsample_points=60, uplift_dim=8,
        attn_heads=2, attn_dim=8, feature_width=16, self_blocks=1, shape_hidden=16, dataset_size=4,
        diffusion_points=100, timesteps=10, denoiser_widths=(16, 32), denoiser_k=4, t_dim=16, batch_size=2,
    )
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(dump_config(cfg))
    runs = [tmp_path / "a", tmp_path / "b"]
    stdout = [_cli_run(r, cfg_path) for r in runs]
    files_a = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    differ = [str(f) for f in files_a if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    differ += [f"stdout #{i}" for i, (x, y) in enumerate(zip(*stdout)) if x != y]
    ok = files_a == files_b and not differ
    detail = f"{len(stdout[0])} commands, {len(files_a)} output files, {len(differ)} byte differences" + (f" ({differ})" if differ else "")
    assert criterion(10, "CLI determinism", ok, detail)
