"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The overfit benchmark
(criteria 5-8) trains once in a session fixture; thresholds were pinned
from scripts/calibrate_overfit.py (see scripts/calibration_record.md).
"""

import time

import numpy as np
import pytest

from prtgrad import autodiff as ad
from prtgrad import dataset as ds
from prtgrad import field as fm
from prtgrad import lighting as lt
from prtgrad import render as vr
from prtgrad import scenegen as sg
from prtgrad import training as tr
from prtgrad.config import TrainConfig
from prtgrad.metrics import psnr, tonemap
from prtgrad.training import _masked_mean_square

# the calibrated desk-scale benchmark configuration (committed with
# scripts/calibrate_overfit.py; re-run that script before changing)
BENCH = dict(steps=7000, batch=512, n_coarse=32, n_fine=32,
             width=64, depth=4, skip_layer=2, head_width=64,
             l_pos=8, l_dir=2, eps_tonemap=1e-2, seed=0, ckpt_every=0)
TRAIN_PSNR_MIN = 28.0
TEST_PSNR_MIN = 24.0
BACKLIT_PSNR_MIN = 20.0
DENSITY_RATIO_MAX = 1e-3


def _p(criterion: str, detail: str) -> None:
    print(f"[acceptance] {criterion}: PASS — {detail}")


@pytest.fixture(scope="session")
def oracle_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("bench") / "dataset")
    sg.generate_dataset(sg.translucent_sphere_scene(), sg.build_rig(), out)
    return ds.OlatDataset(out)


@pytest.fixture(scope="session")
def overfit(oracle_dataset):
    cfg = TrainConfig(**BENCH)
    t0 = time.perf_counter()
    params, state, history = tr.train(oracle_dataset, cfg)
    wall = time.perf_counter() - t0
    return {"params": params, "dataset": oracle_dataset, "history": history,
            "cfg": cfg, "train_seconds": wall}


def _render_entry(params, dataset, entry, rcfg):
    near, far = dataset.near_far(entry.camera)
    return vr.render_image(params, entry.camera, entry.omega, rcfg, near, far)


def test_criterion_1_paper_scale_out_of_reach():
    # Table-level results need the unreleased capture and GPU-scale training;
    # this suite is therefore property-based plus the calibrated overfit
    # benchmark below. Nothing to execute beyond recording that stance.
    _p("criterion 1", "paper-scale tables not reproduced by design; "
       "acceptance is property-based + overfit benchmark")


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    arch = fm.ArchConfig(depth=2, width=16, skip_layer=0, head_width=8, l_pos=3, l_dir=2)
    params = fm.init_params(1, arch, dtype=np.float64)
    rng = np.random.default_rng(7)
    n_rays = 4
    origins = np.tile([0.0, 0, -4], (n_rays, 1))
    dirs = np.tile([0.0, 0, 1.0], (n_rays, 1)) + rng.normal(0, 0.05, (n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    nears, fars = np.full(n_rays, 2.0), np.full(n_rays, 6.0)
    omegas = np.tile([0.0, 0, 1.0], (n_rays, 1))
    targets = rng.random((n_rays, 3)) * 0.5
    bg = np.array([False, False, True, True])
    rcfg = vr.RenderConfig(n_coarse=8, n_fine=8)

    def forward(wc=None, wf=None, frozen=None):
        tape = ad.Tape()
        pvars = fm.wrap_params(params, tape)
        out = vr.render_rays(params, pvars, origins, dirs, nears, fars, omegas,
                             rcfg, np.random.default_rng(3), frozen_depths=frozen)
        color = ad.add(
            ad.mul(tr.tonemapped_loss(out["coarse_rgb"], targets, weight=wc), 1.0 / n_rays),
            ad.mul(tr.tonemapped_loss(out["fine_rgb"], targets, weight=wf), 1.0 / n_rays))
        mask = ad.add(_masked_mean_square(out["sigma_coarse"], bg),
                      _masked_mean_square(out["sigma_fine"], bg))
        return tape, pvars, ad.add(color, ad.mul(mask, 0.1)), out

    tape, pvars, total, out = forward()
    # the stop-gradient weight and the sampled depths are constants of the
    # recorded graph; the FD oracle holds them fixed
    wc0 = 1.0 / (out["coarse_rgb"].value + 1e-3) ** 2
    wf0 = 1.0 / (out["fine_rgb"].value + 1e-3) ** 2
    frozen = (out["depths_coarse"], out["depths_fine"])
    grads = ad.backward(tape, total)
    by_name = {k: grads[v.node_id] for k, v in pvars.items()}

    probe = np.random.default_rng(0)
    names = list(params.tensors)
    step = 1e-4
    failures = 0
    for _ in range(500):
        name = names[probe.integers(len(names))]
        t = params.tensors[name]
        idx = tuple(probe.integers(s) for s in t.shape)
        orig = t[idx]
        t[idx] = orig + step
        _, _, lp, _ = forward(wc0, wf0, frozen)
        t[idx] = orig - step
        _, _, lm, _ = forward(wc0, wf0, frozen)
        t[idx] = orig
        fd = (float(lp.value) - float(lm.value)) / (2 * step)
        an = by_name[name][idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
        if rel > 1e-4:
            failures += 1
    wall = time.perf_counter() - t0
    assert failures <= 5, f"{failures}/500 probes exceeded 1e-4 relative error"
    assert wall < 120.0
    _p("criterion 2", f"{500 - failures}/500 FD probes within 1e-4 ({wall:.1f}s)")


def test_criterion_3_weight_conservation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 64))
        sigma = rng.exponential(rng.uniform(0.1, 4.0), n)
        delta = rng.uniform(1e-3, 0.5, n)
        prof = vr.compute_weights(sigma, delta)
        total = prof.weights.sum() + prof.residual
        assert abs(total - 1.0) <= 1e-6
        assert np.all(np.diff(prof.transmittances) <= 1e-15)
    wall = time.perf_counter() - t0
    assert wall < 5.0
    _p("criterion 3", f"10^4 profiles conserve weight to 1e-6 ({wall:.1f}s)")


def test_criterion_4_median_cut_energy_conservation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = int(rng.integers(1, 33))
        n = int(rng.integers(1, 65))
        env = lt.Envmap(rng.uniform(0, 10, size=(m, n, 3)))
        total = lt.total_weighted_energy(env)
        k = 1
        while k <= 256:
            got = sum(light.energy for light in lt.median_cut(env, k))
            assert np.all(np.abs(got - total) <= 1e-6 * np.maximum(total, 1e-12))
            k *= 2
    wall = time.perf_counter() - t0
    assert wall < 10.0
    _p("criterion 4", f"20 envmaps, n in 1..256: energy conserved to 1e-6 ({wall:.1f}s)")


def test_criterion_5_envmap_linearity(overfit):
    t0 = time.perf_counter()
    params = overfit["params"]
    dataset = overfit["dataset"]
    rng = np.random.default_rng(2)
    entry = dataset.entries[dataset.test_ids[0]]
    near, far = dataset.near_far(entry.camera)
    uv = rng.uniform(8, 56, size=(100, 2))
    dirs = ds.backproject_dirs(entry.camera, uv)
    origins = np.broadcast_to(entry.camera.center(), dirs.shape).copy()
    nears, fars = np.full(100, near), np.full(100, far)
    env_a = lt.Envmap(rng.uniform(0, 3, size=(4, 8, 3)))
    env_b = lt.Envmap(rng.uniform(0, 3, size=(4, 8, 3)))
    env_ab = lt.Envmap(env_a.data + env_b.data)
    rcfg = vr.RenderConfig(n_coarse=BENCH["n_coarse"], n_fine=BENCH["n_fine"], seed=None)
    out = {}
    for tag, env in (("a", env_a), ("b", env_b), ("ab", env_ab)):
        out[tag] = lt.relight_rays(params, origins, dirs, nears, fars,
                                   lt.envmap_to_lights(env), rcfg)
    rhs = out["a"] + out["b"]
    rel = np.abs(out["ab"] - rhs) / np.maximum(np.abs(rhs), 1e-12)
    wall = time.perf_counter() - t0
    assert np.max(rel) <= 1e-9
    assert wall < 60.0
    _p("criterion 5", f"relight(A+B) = relight(A)+relight(B), max rel {np.max(rel):.2e} "
       f"({wall:.1f}s)")


def test_criterion_6_median_cut_vs_brute_force(overfit):
    t0 = time.perf_counter()
    params = overfit["params"]
    dataset = overfit["dataset"]
    rng = np.random.default_rng(3)
    env = lt.Envmap(rng.uniform(0.05, 2.0, size=(16, 32, 3)))  # 32x16 envmap
    entry = dataset.entries[dataset.test_ids[0]]
    near, far = dataset.near_far(entry.camera)
    mask = dataset.masks[(entry.group, entry.cam_idx)]
    rows, cols = np.nonzero(mask)
    pick = rng.choice(rows.shape[0], size=160, replace=False)
    uv = np.stack([cols[pick] + 0.5, rows[pick] + 0.5], axis=1)
    dirs = ds.backproject_dirs(entry.camera, uv)
    origins = np.broadcast_to(entry.camera.center(), dirs.shape).copy()
    nears, fars = np.full(len(pick), near), np.full(len(pick), far)
    rcfg = vr.RenderConfig(n_coarse=BENCH["n_coarse"], n_fine=BENCH["n_fine"], seed=None)
    brute = lt.relight_rays(params, origins, dirs, nears, fars,
                            lt.envmap_to_lights(env), rcfg)      # 512 lights
    approx = lt.relight_rays(params, origins, dirs, nears, fars,
                             lt.median_cut(env, 64), rcfg)
    err = np.abs(approx - brute).mean() / np.abs(brute).mean()
    wall = time.perf_counter() - t0
    assert err < 0.05, f"mean relative error {err:.4f}"
    assert wall < 600.0
    _p("criterion 6", f"median-cut n=64 vs 512-light brute force: "
       f"mean rel err {err:.3%} ({wall:.0f}s)")


def test_criterion_7_overfit_benchmark(overfit):
    params = overfit["params"]
    dataset = overfit["dataset"]
    rcfg = vr.RenderConfig(n_coarse=BENCH["n_coarse"], n_fine=BENCH["n_fine"], seed=None)
    assert len(dataset.train_ids) == 256  # 16 cameras x 16 train lights

    train_eval = dataset.train_ids[::86][:3]
    train_scores = []
    for i in train_eval:
        e = dataset.entries[i]
        pred = _render_entry(params, dataset, e, rcfg)
        train_scores.append(psnr(tonemap(pred), tonemap(e.image.astype(np.float64))))

    test_scores = {}
    for i in dataset.test_ids:
        e = dataset.entries[i]
        pred = _render_entry(params, dataset, e, rcfg)
        test_scores[i] = (psnr(tonemap(pred), tonemap(e.image.astype(np.float64))), pred)

    center = dataset.manifest.bounding_center
    backlit = []
    for i in dataset.test_ids:
        e = dataset.entries[i]
        view = e.camera.center() - center
        view /= np.linalg.norm(view)
        if float(e.omega @ view) < -0.5:
            backlit.append(i)
    assert backlit, "rig must contain back-lit held-out pairs"
    for i in backlit:
        e = dataset.entries[i]
        fg = dataset.masks[(e.group, e.cam_idx)]
        assert test_scores[i][1][fg].mean() > 1e-3  # transmitted radiance present

    train_psnr = float(np.mean(train_scores))
    test_psnr = float(np.mean([test_scores[i][0] for i in dataset.test_ids]))
    backlit_psnr = float(np.mean([test_scores[i][0] for i in backlit]))
    wall = overfit["train_seconds"]
    assert wall < 3600.0, f"training took {wall / 60:.1f} min"
    assert train_psnr >= TRAIN_PSNR_MIN, f"train PSNR {train_psnr:.2f}"
    assert test_psnr >= TEST_PSNR_MIN, f"held-out PSNR {test_psnr:.2f}"
    assert backlit_psnr >= BACKLIT_PSNR_MIN, f"back-lit PSNR {backlit_psnr:.2f}"
    _p("criterion 7", f"train {train_psnr:.2f} dB >= {TRAIN_PSNR_MIN}, "
       f"held-out {test_psnr:.2f} dB >= {TEST_PSNR_MIN}, "
       f"back-lit ({len(backlit)} cases) {backlit_psnr:.2f} dB >= {BACKLIT_PSNR_MIN}, "
       f"trained in {wall / 60:.1f} min")


def test_criterion_8_mask_loss_efficacy(overfit):
    params = overfit["params"]
    dataset = overfit["dataset"]
    center = dataset.manifest.bounding_center
    sphere_r = 1.6
    rng = np.random.default_rng(123)
    inside = center + rng.normal(size=(6000, 3)) * 0.5
    inside = inside[np.linalg.norm(inside - center, axis=1) < 0.8 * sphere_r][:2048]
    # known-empty region: the shell around the object within the observed
    # volume (cameras sit on the upper hemisphere; no ray sees far below)
    shell = rng.normal(size=(16384, 3))
    shell /= np.linalg.norm(shell, axis=1, keepdims=True)
    shell = shell[shell[:, 2] > 0.0][:4096]
    radii = rng.uniform(1.25 * sphere_r, 2.2, size=(shell.shape[0], 1))
    empty = center + shell * radii
    sig_inside = float(np.mean(fm.eval_density(params, "fine", inside.astype(np.float32))))
    sig_empty = float(np.mean(fm.eval_density(params, "fine", empty.astype(np.float32))))
    ratio = sig_empty / max(sig_inside, 1e-12)
    assert ratio < DENSITY_RATIO_MAX, f"empty/occupied density ratio {ratio:.2e}"
    _p("criterion 8", f"empty/occupied mean density ratio {ratio:.2e} < {DENSITY_RATIO_MAX}")


def test_criterion_9_training_determinism(oracle_dataset):
    cfg = TrainConfig(steps=1000, batch=64, n_coarse=8, n_fine=8, width=16, depth=2,
                      skip_layer=0, head_width=8, l_pos=2, l_dir=1, seed=77, ckpt_every=0)
    t0 = time.perf_counter()
    _, _, h1 = tr.train(oracle_dataset, cfg)
    _, _, h2 = tr.train(oracle_dataset, cfg)
    wall = time.perf_counter() - t0
    a = [r.total for r in h1]
    b = [r.total for r in h2]
    assert len(a) == 1000
    assert a == b, "loss histories diverged"
    _p("criterion 9", f"two 1000-step runs bit-identical ({wall:.0f}s)")


def test_criterion_10_protocol_counts(oracle_dataset):
    grid = lt.olat_grid()
    assert len(grid) == 224
    assert sum(1 for g in grid if g.split == "train") == 112
    batch = tr.sample_ray_batch(oracle_dataset, 1024, np.random.default_rng(0))
    fg = int((batch.region == ds.FOREGROUND).sum())
    silh = int((batch.region == ds.SILHOUETTE).sum())
    bg = int(np.isin(batch.region, [ds.BACKGROUND, ds.PADDED]).sum())
    assert (fg, silh, bg) == (512, 384, 128)
    _p("criterion 10", "olat_grid: 224 directions / 112 train; "
       "batch 1024 -> 512/384/128 exact")


def test_render_convergence_on_overfit_scene(overfit):
    # doubling both sample counts changes the fine output by < 1%
    params = overfit["params"]
    dataset = overfit["dataset"]
    entry = dataset.entries[dataset.test_ids[1]]
    near, far = dataset.near_far(entry.camera)
    mask = dataset.masks[(entry.group, entry.cam_idx)]
    rows, cols = np.nonzero(mask)
    rng = np.random.default_rng(5)
    pick = rng.choice(rows.shape[0], size=64, replace=False)
    uv = np.stack([cols[pick] + 0.5, rows[pick] + 0.5], axis=1)
    dirs = ds.backproject_dirs(entry.camera, uv)
    origins = np.broadcast_to(entry.camera.center(), dirs.shape).copy()
    pvars = fm.wrap_params(params)
    outs = []
    for scale in (1, 2):
        rcfg = vr.RenderConfig(n_coarse=BENCH["n_coarse"] * scale,
                               n_fine=BENCH["n_fine"] * scale, seed=None)
        res = vr.render_rays(params, pvars, origins, dirs, np.full(64, near),
                             np.full(64, far), np.broadcast_to(entry.omega, (64, 3)),
                             rcfg, rng=None)
        outs.append(res["fine_rgb"].value.astype(np.float64))
    rel = np.abs(outs[1] - outs[0]).mean() / np.abs(outs[1]).mean()
    assert rel < 0.01, f"discretization change {rel:.4f}"
    _p("render convergence", f"doubling sample counts changes output by {rel:.3%}")
