"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line (also collected into
the pytest terminal summary). Criteria 5-7 train real networks on the CPU and
take several minutes each.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from crossview import losses as L
from crossview import metrics as M
from crossview.dataman import synth_scene, synthetic_homography
from crossview.geometry import (
    Correspondences, Homography, RegionMaskSet, composite_regions, default_region_masks,
    estimate_homography, make_region_masks, warp_image,
)
from crossview.nets import (
    GeneratorSpec, build_discriminator, build_fork_generator, build_generator, forward, DiscriminatorSpec,
)
from crossview.trainer import evaluate_l1, preset, synthesize_regions, train, train_h_regions
from oracles import (
    band_scan_oracle, composite_oracle, psnr_oracle, random_quadruple, sd_oracle, ssim_window_oracle,
    warp_pixel_oracle,
)
from test_losses import fd_rel_err

RESULTS = []

# metric labels of the a2g quantitative table, in order
EXPECTED_METRIC_LABELS = (
    "Inception Score, all", "Inception Score, Top-1", "Inception Score, Top-5",
    "Accuracy (Top-1, all)", "Accuracy (Top-1, 0.5)", "Accuracy (Top-5, all)", "Accuracy (Top-5, 0.5)",
    "KL(model || data)", "SSIM", "PSNR", "SD", "FID Score",
)


@contextmanager
def criterion(n: int, title: str, budget_s: float):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
        dt = time.perf_counter() - t0
        assert dt < budget_s, f"runtime {dt:.1f}s exceeds {budget_s:.0f}s"
    except BaseException as exc:
        dt = time.perf_counter() - t0
        line = f"[criterion {n}] FAIL {title} ({dt:.1f}s) {info.get('detail', '')} :: {exc}".strip()
        RESULTS.append(line)
        print(line)
        raise
    line = f"[criterion {n}] PASS {title} ({dt:.1f}s) {info.get('detail', '')}".strip()
    RESULTS.append(line)
    print(line)


# ---------------------------------------------------------------- 1


def test_criterion_1_geometry():
    with criterion(1, "geometry suite", 60) as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            src, dst = random_quadruple(rng), random_quadruple(rng)
            h = estimate_homography(Correspondences(src, dst))
            worst = max(worst, float(np.abs(h.apply(src) - dst).max()))
        assert worst <= 1e-6, f"reprojection {worst:.2e}"

        ys, xs = np.mgrid[0:48, 0:56]
        board = np.where(((ys // 6) + (xs // 6)) % 2 == 0, 1.0, -1.0)
        m = np.array([[0.95, 0.1, 2.5], [-0.04, 1.05, -1.5], [3e-4, 1.2e-3, 1.0]])
        out, valid = warp_image(board, Homography(m), out_size=(50, 58))
        ref, ref_valid = warp_pixel_oracle(board, m, (50, 58))
        warp_err = float(np.abs(out - ref).max())
        assert np.array_equal(valid, ref_valid) and warp_err <= 1e-6, f"warp {warp_err:.2e}"

        h, w = 40, 44
        imgs = [rng.uniform(-1, 1, (h, w, 3)) for _ in range(3)]
        m1 = rng.random((h, w)) < 0.3
        m2 = (rng.random((h, w)) < 0.4) & ~m1
        comp = composite_regions(*imgs, RegionMaskSet(m1, m2, np.zeros((h, w), bool)))
        comp_err = float(np.abs(comp - composite_oracle(*imgs, m1, m2)).max())
        assert comp_err == 0.0

        masks = default_region_masks(256)
        a, b = masks.m1.astype(np.int64), masks.m2.astype(np.int64)
        one = np.ones_like(a)
        assert np.array_equal(a + b + (one - a - b), one)
        r1, r2 = (0, 128, 0, 256), (184, 256, 64, 192)
        band = make_region_masks((256, 256), r1, r2, 8).band
        assert np.array_equal(band, band_scan_oracle((256, 256), [r1, r2], 8))
        info["detail"] = f"reproj={worst:.1e}px warp={warp_err:.1e} composite={comp_err}"


# ---------------------------------------------------------------- 2


def test_criterion_2_losses():
    with criterion(2, "loss suite", 180) as info:
        def t(v, shape=(2, 1, 4, 4)):
            return torch.full(shape, float(v), dtype=torch.float64)

        closed = [
            (L.adv_loss_d(t(0.5), t(0.5), smooth=1.0), 2 * math.log(2)),
            (L.adv_loss_d(t(0.9), t(1e-12), smooth=0.9), -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))),
            (L.adv_loss_d(t(1 - 1e-12), t(1e-12), smooth=1.0), 0.0),
            (L.adv_loss_g(t(1.0)), 0.0),
            (L.adv_loss_g(t(0.5)), math.log(2)),
            (L.adv_loss_g(t(math.exp(-1))), 1.0),
            (L.l1_loss(t(1.0), t(0.0)), 1.0),
            (L.fork_objective(t(0.5), t(0.1, (1, 3, 8, 8)), t(0, (1, 3, 8, 8)), t(0.1, (1, 3, 8, 8)),
                              t(0, (1, 3, 8, 8)), L.LossWeights(1, 100)).total, math.log(2) + 20.0),
            (L.realism_objective(t(0.3, (1, 3, 8, 8)), t(0.3, (1, 3, 8, 8)), t(1.0), t(0, (1, 1, 8, 8))).total, 0.0),
        ]
        worst_closed = max(abs(float(v) - e) for v, e in closed)
        assert worst_closed <= 1e-6, f"closed form {worst_closed:.2e}"

        def toy(seed, shape=(1, 3, 8, 8)):
            return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 2 - 1

        def scores(seed):
            return torch.rand(1, 1, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 0.8 + 0.1

        tgt, segt, comp = toy(1), toy(2), toy(3)
        band = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        band[..., 3:5, :] = 1
        k = torch.randn(3, 3, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(4)) * 0.2

        def seq(d1, d2, img):
            seg = torch.tanh(torch.nn.functional.conv2d(img, k, padding=1))
            return L.seq_objective(L.network_objective(d1, img, tgt), L.network_objective(d2, seg, segt)).total

        errs = {
            "network": fd_rel_err(lambda d, o: L.network_objective(d, o, tgt).total, [scores(5), toy(6)]),
            "fork": fd_rel_err(lambda d, i, s: L.fork_objective(d, i, tgt, s, segt).total,
                               [scores(7), toy(8), toy(9)]),
            "seq": fd_rel_err(seq, [scores(10), scores(11), toy(12)]),
            "realism": fd_rel_err(lambda d, o: L.realism_objective(o, comp, d, band).total, [scores(13), toy(14)]),
        }
        assert max(errs.values()) <= 1e-3, f"finite differences {errs}"

        G = build_fork_generator(GeneratorSpec(out_heads=2, resolution=64, base_width=8))
        D = build_discriminator(DiscriminatorSpec(6, resolution=64, base_width=8))
        cond = torch.rand(1, 3, 64, 64) * 2 - 1
        img, _ = G(cond)
        adv = L.adv_loss_g(D(cond, img))
        grads = torch.autograd.grad(adv, list(G.heads[1].parameters()), allow_unused=True)
        assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
        info["detail"] = f"closed={worst_closed:.1e} fd_max={max(errs.values()):.1e}"


# ---------------------------------------------------------------- 3


def test_criterion_3_metrics():
    with criterion(3, "metric oracle suite", 120) as info:
        rng = np.random.default_rng(7)
        row = rng.random(9)
        row /= row.sum()
        assert abs(M.inception_score(np.tile(row, (25, 1))) - 1.0) <= 1e-9
        for n in (3, 10, 50):
            assert abs(M.inception_score(np.eye(n)) - n) <= 1e-6

        a = rng.normal(size=(300, 6))
        assert abs(M.fid(a, a)) <= 1e-4
        assert abs(M.fid_from_stats([0.0], [[1.0]], [3.0], [[1.0]]) - 9.0) <= 1e-4
        cov = np.cov(a, rowvar=False)
        delta = rng.normal(size=6)
        assert abs(M.fid_from_stats(np.zeros(6), cov, delta, cov) - delta @ delta) <= 1e-4

        x = rng.integers(0, 256, (24, 24)).astype(np.float64)
        y = np.clip(x + rng.normal(0, 25, x.shape), 0, 255)
        assert abs(M.ssim(x, y) - ssim_window_oracle(x, y)) <= 1e-6
        c1 = (0.01 * 255) ** 2
        assert abs(M.ssim(np.full((16, 16), 100.0), np.full((16, 16), 150.0))
                   - (2 * 100 * 150 + c1) / (100 ** 2 + 150 ** 2 + c1)) <= 1e-9
        assert abs(M.psnr(x, y) - psnr_oracle(x, y)) <= 1e-9
        assert M.psnr(x, x) == 100.0
        assert abs(M.psnr(x, x + 1) - 10 * math.log10(255 ** 2)) <= 1e-9
        assert M.sharpness_difference(x, y) == pytest.approx(sd_oracle(x, y), abs=1e-9)
        step = np.array([[0, 0, 1, 1]] * 4, dtype=np.float64)
        assert M.sharpness_difference(step, np.zeros((4, 4))) == sd_oracle(step, np.zeros((4, 4)))

        p = rng.random((40, 7))
        p /= p.sum(axis=1, keepdims=True)
        assert abs(M.kl_model_data(p, p, batches=1)[0]) <= 1e-9

        worst = 0.0
        for _ in range(1000):
            c = int(rng.integers(2, 15))
            k = int(rng.integers(1, c + 1))
            v = rng.random(c) ** 2
            v /= v.sum()
            out = M.topk_smooth(v, k)
            top = set(np.argsort(-v, kind="stable")[:k].tolist())
            eps = (1 - sum(v[i] for i in top)) / (c - k) if k < c else 0.0
            ref = np.array([v[i] if i in top else eps for i in range(c)])
            worst = max(worst, float(np.abs(out - ref).max()))
        assert worst <= 1e-12
        info["detail"] = f"smoothing worst={worst:.1e}"


# ---------------------------------------------------------------- 4


def test_criterion_4_architecture():
    with criterion(4, "architecture suite", 120) as info:
        specs = [
            GeneratorSpec(), GeneratorSpec(out_heads=2), GeneratorSpec(out_channels_per_head=6),
            GeneratorSpec(resolution=64, base_width=32), GeneratorSpec(resolution=64, base_width=32, out_heads=2),
            GeneratorSpec(block_trim=2, base_width=32), GeneratorSpec(resolution=64, skip=True, base_width=16),
        ]
        for spec in specs:
            g = build_fork_generator(spec) if spec.out_heads == 2 else build_generator(spec)
            outs = forward(g, torch.rand(1, 3, spec.resolution, spec.resolution) * 2 - 1)
            outs = outs if isinstance(outs, tuple) else (outs,)
            assert len(outs) == spec.out_heads
            for o in outs:
                assert o.shape == (1, spec.out_channels_per_head, spec.resolution, spec.resolution)
                assert o.min() >= -1 and o.max() <= 1
        so = forward(build_generator(GeneratorSpec(resolution=64, base_width=8, out_channels_per_head=6)),
                     torch.zeros(1, 3, 64, 64))
        assert so.shape[1] == 6

        g256 = build_generator(GeneratorSpec(base_width=16))
        g64 = build_generator(GeneratorSpec(resolution=64, base_width=16))
        assert len(g256.encoder) - len(g64.encoder) == 2 and len(g256.decoder) - len(g64.decoder) == 2

        fork = build_fork_generator(GeneratorSpec(out_heads=2, resolution=64, base_width=8))
        shared = {id(p) for p in fork.shared_parameters()}
        heads = [{id(p) for p in h.parameters()} for h in fork.heads]
        assert not (shared & heads[0]) and not (shared & heads[1]) and not (heads[0] & heads[1])
        big_fork = build_fork_generator(GeneratorSpec(out_heads=2))
        assert big_fork.n_shared == 6
        x = torch.rand(2, 3, 64, 64)
        a0, b0 = forward(fork, x, training=True, seed=1)
        with torch.no_grad():
            fork.decoder[0][0].weight.add_(0.05)
        a1, b1 = forward(fork, x, training=True, seed=1)
        assert not torch.equal(a0, a1) and not torch.equal(b0, b1)
        with torch.no_grad():
            fork.heads[0][1][0].weight.add_(0.05)
        a2, b2 = forward(fork, x, training=True, seed=1)
        assert not torch.equal(a1, a2) and torch.equal(b1, b2)

        w = torch.cat([m.weight.detach().flatten() for m in build_generator(GeneratorSpec()).modules()
                       if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))])
        assert w.numel() >= 1e5 and abs(w.mean()) < 0.01 and abs(w.std() - 0.02) < 0.005
        info["detail"] = f"init mean={w.mean():.1e} std={w.std():.4f}"


# ---------------------------------------------------------------- 5


OVERFIT_SEEDS = range(8)


@pytest.fixture(scope="module")
def overfit_set():
    return [synth_scene(s, 64) for s in OVERFIT_SEEDS]


def test_criterion_5_overfit(overfit_set):
    with criterion(5, "overfit smoke", 15 * 60) as info:
        l1s = {}
        for method in ("x-pix2pix", "x-fork"):
            cfg = preset("overfit8", method=method)
            assert cfg.steps == 200 and cfg.resolution == 64
            first = train(cfg, overfit_set)
            again = train(cfg, overfit_set)
            assert first.log == again.log, f"{method}: loss curves differ between reruns"
            for k in first.checkpoint.nets:
                for name, v in first.checkpoint.nets[k].items():
                    assert torch.equal(v, again.checkpoint.nets[k][name]), f"{method}: {k}.{name} differs"
            l1s[method] = evaluate_l1(first.checkpoint, overfit_set)
            l1 = first.column("l1_img")

            def trailing(step, window=50):
                return float(np.mean(l1[max(0, step - window):step]))

            assert trailing(200) < trailing(10), f"{method}: no downward loss trend"
        info["detail"] = " ".join(f"{m}={v:.4f}" for m, v in l1s.items())
        assert all(v < 0.10 for v in l1s.values()), f"train L1 {l1s}"


# ---------------------------------------------------------------- 6


def test_criterion_6_h_regions(overfit_set):
    with criterion(6, "H-Regions pipeline smoke", 20 * 60) as info:
        cfg = preset("overfit8", method="h-regions")
        res = train_h_regions(cfg, overfit_set, homography=synthetic_homography(64))
        masks = res.masks
        keep = ~masks.band
        outside, r1 = [], []
        for s in overfit_set:
            final, comp = synthesize_regions(res.checkpoints, s.aerial, return_composite=True)
            outside.append(np.abs(final - comp)[keep].mean())
            # over R1 the composite carries the inpainting output of subtask I
            r1.append(np.abs(comp - s.ground)[masks.m1].mean())
        outside, r1 = float(np.mean(outside)), float(np.mean(r1))
        info["detail"] = f"outside-band={outside:.4f} masked-R1 L1={r1:.4f}"
        assert outside <= 0.05 and r1 < 0.12


# ---------------------------------------------------------------- 7


def test_criterion_7_homography_helps():
    with criterion(7, "directional desk-scale check", 45 * 60) as info:
        pairs = [synth_scene(100_000 + i, 64) for i in range(256)]
        train_set, test_set = pairs[:192], pairs[192:]
        h = synthetic_homography(64)
        scores = {}
        for method in ("h-pix2pix", "x-pix2pix"):
            cfg = preset("desk64", method=method)
            r = train(cfg, train_set, homography=h)
            scores[method] = evaluate_l1(r.checkpoint, test_set)
        info["detail"] = f"test L1 h-pix2pix={scores['h-pix2pix']:.4f} x-pix2pix={scores['x-pix2pix']:.4f}"
        assert scores["h-pix2pix"] < scores["x-pix2pix"]


# ---------------------------------------------------------------- 8


def test_criterion_8_report_schema(tmp_path):
    with criterion(8, "report fidelity", 60) as info:
        from crossview import cli

        assert M.REPORT_COLUMNS == EXPECTED_METRIC_LABELS
        rng = np.random.default_rng(3)
        real = [rng.integers(0, 256, (32, 32, 3)).astype(np.uint8) for _ in range(20)]
        fake = [np.clip(r.astype(int) + rng.integers(-20, 21, r.shape), 0, 255).astype(np.uint8) for r in real]

        class Stub:
            def probs(self, images):
                z = np.stack([np.asarray(i, float)[::8, ::8, 0].ravel()[:6] for i in images]) / 25.0
                e = np.exp(z - z.max(axis=1, keepdims=True))
                return e / e.sum(axis=1, keepdims=True)

            def acts(self, images):
                return np.stack([np.asarray(i, float)[::4, ::4].mean(axis=(0, 1)) for i in images])

        rep = M.evaluate(fake, real, Stub())
        assert tuple(rep.values) == EXPECTED_METRIC_LABELS
        assert all(rep.values[c] is not None for c in EXPECTED_METRIC_LABELS)
        assert isinstance(rep.values["KL(model || data)"], tuple)
        p_f, p_r = Stub().probs(fake), Stub().probs(real)
        assert rep.values["Accuracy (Top-1, all)"] == M.topk_accuracy(p_r, p_f, 1, "all")
        conf = p_r.max(axis=1) > 0.5
        if conf.any():
            assert rep.values["Accuracy (Top-1, 0.5)"] == M.topk_accuracy(p_r, p_f, 1, "confident")
        rep.to_csv(tmp_path / "m.csv", "x-fork")
        assert tuple(M.read_report_csv(tmp_path / "m.csv")) == EXPECTED_METRIC_LABELS
        text = rep.to_text("x-fork")
        assert [ln.split("  ")[0].strip() for ln in text.splitlines()[1:]] == list(EXPECTED_METRIC_LABELS)
        info["detail"] = f"{len(EXPECTED_METRIC_LABELS)} metrics, both accuracy modes"
