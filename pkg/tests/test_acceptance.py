"""End-to-end acceptance checks: nine numbered criteria.

Covers gradient correctness, tiled-vs-reference rendering equivalence,
two-stage training quality, conditioning behaviour (zero-offset identity,
attention localization), the stage-wise-vs-from-scratch ablation trend,
rendering throughput, and determinism.  Each test prints one
``criterion N: PASS/FAIL`` line on the real stdout so the verdicts stay
visible under pytest's output capture.  The two training fixtures are the
expensive parts; they are module-scoped and shared by criteria 3-6.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from audiosplat import autodiff as ad
from audiosplat import canonical
from audiosplat import deform as df
from audiosplat import evalkit as ev
from audiosplat import rasterizer as ra
from audiosplat import scene as sc
from audiosplat import synthdata as sd
from audiosplat import training as tr
from audiosplat import triplane as tp

# Training configurations for the quality criteria.  Densification is off:
# each re-derives attributes from the field at fresh positions, which costs
# a few dB right after an event, and the PSNR gates here are reachable on
# the initial point budget alone.
STATIC_CONFIG = tr.TrainConfig(iterations=4000, init_points=1600,
                               densify_every=0, stop_psnr=31.0,
                               log_every=100, checkpoint_every=100000)
STAGE1_CONFIG = tr.TrainConfig(iterations=800, init_points=1600,
                               densify_every=0, log_every=100,
                               checkpoint_every=100000)
STAGE2_CONFIG = tr.TrainConfig(iterations=1500, init_points=1600,
                               densify_every=0, stop_psnr=28.8,
                               log_every=100, checkpoint_every=100000)
ABLATION_STAGE1 = tr.TrainConfig(iterations=300, init_points=300,
                                 densify_every=0, log_every=100,
                                 checkpoint_every=100000)
ABLATION_STAGE2 = tr.TrainConfig(iterations=1000, init_points=300,
                                 densify_every=0, log_every=500,
                                 checkpoint_every=100000)


def _report(capfd, criterion, passed, detail):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    with capfd.disabled():
        print(line)
    assert passed, line


def _mean_test_psnr(ds, render_fn):
    vals = [ev.psnr(render_fn(ds.frame(i)), ds.frame(i).image)
            for i in ds.test_indices]
    return float(np.mean(vals))


# ------------------------------------------------------------------ fixtures

@pytest.fixture(scope="module")
def static_run(tmp_path_factory):
    """Static-scenario dataset plus a trained canonical checkpoint."""
    root = tmp_path_factory.mktemp("static")
    sd.generate(sd.scenario("static"), root / "data")
    ds = sd.load_dataset(root / "data")
    t0 = time.perf_counter()
    ckpt = tr.train_canonical(ds, STATIC_CONFIG)
    seconds = time.perf_counter() - t0
    return {"ds": ds, "ckpt": ckpt, "seconds": seconds}


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default-scenario dataset, both training stages, and the baselines."""
    root = tmp_path_factory.mktemp("default")
    manifest = sd.generate(sd.scenario("default"), root / "data")
    ds = sd.load_dataset(root / "data")

    ck1 = tr.train_canonical(ds, STAGE1_CONFIG)
    model1 = tr.build_model(ck1)
    base_mean = _mean_test_psnr(
        ds, lambda s: tr.render_canonical(model1, s.cond.camera, s.background))

    t0 = time.perf_counter()
    ck2 = tr.train_deform(ds, STAGE2_CONFIG, warm_start=ck1)
    deform_seconds = time.perf_counter() - t0
    model2, stack2 = tr.build_model(ck2), tr.build_stack(ck2)
    deform_mean = _mean_test_psnr(
        ds, lambda s: tr.render_deformed(model2, stack2, s.cond, s.background))

    return {"ds": ds, "manifest": manifest, "ck1": ck1, "ck2": ck2,
            "base_mean": base_mean, "deform_mean": deform_mean,
            "deform_seconds": deform_seconds}


@pytest.fixture(scope="module")
def reduced_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("reduced")
    sd.generate(sd.scenario("reduced"), root / "data")
    return sd.load_dataset(root / "data")


# ------------------------------------------------- criterion 1: gradients

def _tiny_scene(rng, n, spread=0.4, logit_mean=1.0):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return sc.GaussianSet(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=q,
        log_scales=rng.uniform(np.log(0.05), np.log(0.25), (n, 3)),
        sh_coeffs=rng.normal(0, 0.3, (n, 3 * sc.sh_coeff_count(1))),
        opacity_logits=rng.normal(logit_mean, 0.5, (n, 1)),
        sh_degree=1,
    )


def _orbit_camera(rng, w=24, h=24, dist=1.6):
    ang = rng.uniform(0, 2 * np.pi)
    eye = [dist * np.sin(ang), rng.uniform(-0.3, 0.3), -dist * np.cos(ang)]
    return sc.Camera(extrinsic=sc.look_at_extrinsic(eye, [0, 0, 0]),
                     fx=rng.uniform(30, 60), fy=rng.uniform(30, 60),
                     cx=w / 2, cy=h / 2, width=w, height=h)


def _op_cases(rng):
    """One taped scalar per op kind, rebuilt per trial on fresh tensors."""
    t = lambda shape, lo=-1.0, hi=1.0: ad.Tensor(
        rng.uniform(lo, hi, shape), trainable=True)
    a, b = t((2, 3)), t((2, 3))
    pos = t((2, 3), 0.3, 1.7)          # denominators and |x| kinks off zero
    m1, m2 = t((2, 4)), t((4, 3))
    w, bias = t((4, 3)), t((1, 3))
    v = t((3, 4))
    s = ad.reduce_sum
    wa = ad.constant(rng.normal(size=(2, 3)))
    wt = ad.constant(rng.normal(size=(3, 2)))
    wv = ad.constant(rng.normal(size=(3, 4)))
    wc = ad.constant(rng.normal(size=(4, 3)))
    return [
        ("add", lambda: s(ad.add(a, b)), [a, b]),
        ("sub", lambda: s(ad.sub(a, b)), [a, b]),
        ("mul", lambda: s(ad.mul(a, b)), [a, b]),
        ("div", lambda: s(ad.div(a, pos)), [a, pos]),
        ("scale", lambda: s(ad.scale(a, 1.7)), [a]),
        ("absolute", lambda: s(ad.absolute(pos)), [pos]),
        ("exp", lambda: s(ad.exp(a)), [a]),
        ("tanh", lambda: s(ad.tanh(a)), [a]),
        ("sigmoid", lambda: s(ad.sigmoid(a)), [a]),
        ("relu", lambda: s(ad.relu(pos)), [pos]),  # inputs bounded off zero
        ("softmax", lambda: s(ad.mul(ad.softmax(v), wv)), [v]),
        ("layer_norm", lambda: s(ad.mul(ad.layer_norm(v), wv)), [v]),
        ("matmul", lambda: s(ad.matmul(m1, m2)), [m1, m2]),
        ("linear", lambda: s(ad.mul(ad.linear(m1, w, bias),
                                    ad.constant(rng.normal(size=(2, 3))))),
         [m1, w, bias]),
        ("transpose", lambda: s(ad.mul(ad.transpose(a), wt)), [a]),
        ("reshape", lambda: s(ad.mul(ad.reshape(a, (3, 2)), wt)), [a]),
        ("reduce_sum_axis", lambda: s(ad.mul(ad.reduce_sum(m1, axis=1),
                                             ad.constant(rng.normal(size=(2,))))),
         [m1]),
        ("reduce_mean", lambda: ad.reduce_mean(ad.mul(a, b)), [a, b]),
        ("take", lambda: s(ad.take(a, (slice(0, 2), slice(1, 3)))), [a]),
        ("concat", lambda: s(ad.mul(ad.concat([a, b], axis=0), wc)), [a, b]),
        ("elementwise_chain", lambda: s(ad.mul(ad.sigmoid(ad.mul(a, wa)), b)),
         [a, b]),
    ]


def _check_diffmath_ops(trials):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(31_000 + trial)
        for name, f, params in _op_cases(rng):
            err = ad.finite_difference_check(f, params, eps=1e-6, coords=4,
                                             seed=trial)
            worst = max(worst, err)
            assert err <= 1e-5, f"{name} trial {trial}: rel err {err}"
    return worst


def _check_triplane_query(trials):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(32_000 + trial)
        grid = tp.create_grid(resolutions=(4, 5), features=4,
                              lo=(-1, -1, -1), hi=(1, 1, 1),
                              seed=trial)
        pts = ad.Tensor(rng.uniform(-0.8, 0.8, (5, 3)), trainable=True)
        planes = [ad.Tensor(p, trainable=True) for p in grid.planes]
        w = rng.normal(size=(5, grid.feature_dim))

        def f():
            for t, p in zip(planes, grid.planes):
                p[:] = t.data
            feats, ctx = tp.query(grid, pts.data, want_ctx=True)

            def vjp(g):
                pg, ptg = tp.query_backward(ctx, g, want_point_grads=True)
                return pg + [ptg]

            out = ad.custom(feats, planes + [pts], vjp)
            return ad.reduce_sum(ad.mul(out, ad.constant(w)))

        err = ad.finite_difference_check(f, planes + [pts], eps=1e-6,
                                         coords=4, seed=trial)
        worst = max(worst, err)
        assert err <= 1e-5, f"triplane query trial {trial}: rel err {err}"
    return worst


def _check_attribute_heads(trials):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(33_000 + trial)
        model = canonical.create_model(rng.uniform(-0.4, 0.4, (6, 3)),
                                       sh_degree=1, resolutions=(4, 6),
                                       features=6, seed=trial)
        params = model.parameters()
        shapes = {name: t.data.shape
                  for name, t in model.raw_attributes().items()}
        mats = {name: rng.normal(size=shape)
                for name, shape in shapes.items()}

        def f():
            raw = model.raw_attributes()
            total = None
            for name, w in mats.items():
                term = ad.reduce_sum(ad.mul(raw[name], ad.constant(w)))
                total = term if total is None else ad.add(total, term)
            return total

        err = ad.finite_difference_check(f, list(params.values()), eps=1e-6,
                                         coords=3, seed=trial)
        worst = max(worst, err)
        assert err <= 1e-5, f"attribute heads trial {trial}: rel err {err}"
    return worst


def _check_attention_stack(trials):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(34_000 + trial)
        stack = df.AttentionStack(feature_dim=5, audio_dim=8, n_layers=2,
                                  sh_degree=1, dim=16, head_dim=8,
                                  seed=trial)
        for name in ("pos", "rot", "logs", "sh", "logit"):
            w = stack.params[f"off_{name}_w"]
            w.data[:] = rng.normal(0, 0.2, w.data.shape)
        feats = ad.Tensor(rng.normal(0, 1, (7, 5)), trainable=True)
        frame = df.ConditionFrame(
            audio=rng.normal(0, 1, 8), eye=rng.uniform(0, 1),
            camera=_orbit_camera(rng))
        mats = {}

        def f():
            tokens = df.encode_conditions(stack, frame)
            z, _ = df.attend(stack, df.project_features(stack, feats), tokens)
            off = df.predict_offsets(stack, z)
            total = None
            for name, val in (("pos", off.d_pos), ("rot", off.d_rot),
                              ("logs", off.d_logs), ("sh", off.d_sh),
                              ("logit", off.d_logit)):
                if name not in mats:
                    mats[name] = rng.normal(size=val.data.shape)
                term = ad.reduce_sum(ad.mul(val, ad.constant(mats[name])))
                total = term if total is None else ad.add(total, term)
            return total

        params = list(stack.parameters().values()) + [feats]
        err = ad.finite_difference_check(f, params, eps=1e-6, coords=3,
                                         seed=trial)
        worst = max(worst, err)
        assert err <= 1e-5, f"attention stack trial {trial}: rel err {err}"
    return worst


def _check_losses(trials):
    worst = 0.0
    cfg = tr.TrainConfig()
    for trial in range(trials):
        rng = np.random.default_rng(35_000 + trial)
        img = rng.uniform(0.05, 0.95, (16, 16, 3))
        gt = rng.uniform(0.05, 0.95, (16, 16, 3))
        box = (3, 4, 11, 13)
        _, analytic, _ = tr.loss_deform(img, gt, box, cfg)
        idx, num = ad.numeric_gradient(
            lambda: tr.loss_deform(img, gt, box, cfg)[0], img,
            eps=1e-6, coords=6, seed=trial)
        rel = np.abs(analytic.reshape(-1)[idx] - num) / np.maximum(1, np.abs(num))
        worst = max(worst, float(rel.max()))
        assert rel.max() <= 1e-5, f"loss trial {trial}: rel err {rel.max()}"
    return worst


def _check_rasterizer(trials):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(36_000 + trial)
        gset = _tiny_scene(rng, int(rng.integers(2, 7)))
        cam = _orbit_camera(rng)
        bg = rng.uniform(0, 1, (24, 24, 3))
        wmat = rng.normal(0, 1, (24, 24, 3))
        proj = ra.project(gset, cam)
        frame = ra.render_tiled(proj, bg, retain_records=True)
        grads = ra.render_backward(frame, wmat, proj, gset, cam)

        def loss():
            return float(np.sum(
                ra.render_tiled(ra.project(gset, cam), bg).image * wmat))

        for field in ("positions", "rotations", "log_scales", "sh_coeffs",
                      "opacity_logits"):
            idx, num = ad.numeric_gradient(loss, getattr(gset, field),
                                           eps=1e-6, coords=3,
                                           seed=trial * 7 + len(field))
            ana = getattr(grads, field).reshape(-1)[idx]
            rel = np.abs(ana - num) / np.maximum(1, np.abs(num))
            worst = max(worst, float(rel.max()))
            assert rel.max() <= 1e-3, \
                f"rasterizer {field} trial {trial}: rel err {rel.max()}"
    return worst


def test_01_gradient_suite(capfd):
    """Analytic gradients match central differences across the whole stack."""
    t0 = time.perf_counter()
    pure = max(_check_diffmath_ops(50), _check_triplane_query(50),
               _check_attribute_heads(50), _check_attention_stack(50),
               _check_losses(50))
    rast = _check_rasterizer(50)
    seconds = time.perf_counter() - t0
    ok = pure <= 1e-5 and rast <= 1e-3 and seconds <= 300
    _report(capfd, 1, ok,
            f"max rel err {pure:.2e} pure (<=1e-5), {rast:.2e} rasterizer "
            f"(<=1e-3), >=50 instances per op group, {seconds:.0f}s (<=300s)")


# ------------------------------------- criterion 2: tiled equals reference

def _criterion2_scene(seed):
    """Random 64x64 scene; every third one is corner-clustered so whole
    tile rows stay empty, and every fourth gets splats wide enough to span
    several tiles."""
    rng = np.random.default_rng(40_000 + seed)
    n = int(rng.integers(1, 201))
    gset = _tiny_scene(rng, n, spread=0.5)
    if seed % 3 == 0:
        gset.positions[:] = rng.uniform(0.25, 0.55, (n, 3))  # one corner
        gset.log_scales[:] = np.log(rng.uniform(0.01, 0.05, (n, 3)))
    if seed % 4 == 0:
        k = max(1, n // 10)
        gset.log_scales[:k] = np.log(rng.uniform(0.3, 0.6, (k, 3)))
    cam = _orbit_camera(rng, w=64, h=64)
    bg = rng.uniform(0, 1, (64, 64, 3))
    return gset, cam, bg


def _tile_footprint(proj, width, height, tile=16):
    """(covered tile count, max tiles spanned by one Gaussian)."""
    a = proj.cov2d[:, 0]
    b = proj.cov2d[:, 1]
    c = proj.cov2d[:, 2]
    eig = (a + c) / 2 + np.sqrt(((a - c) / 2) ** 2 + b ** 2)
    r = np.sqrt(2 * np.log(255.0) * np.maximum(eig, 0)) + 1
    nx, ny = -(-width // tile), -(-height // tile)
    covered = np.zeros((ny, nx), dtype=bool)
    per = 0
    for (x, y), ri in zip(proj.screen_xy, r):
        x0 = max(0, int((x - ri) // tile))
        x1 = min(nx - 1, int((x + ri) // tile))
        y0 = max(0, int((y - ri) // tile))
        y1 = min(ny - 1, int((y + ri) // tile))
        if x1 < x0 or y1 < y0:
            continue
        covered[y0:y1 + 1, x0:x1 + 1] = True
        per = max(per, (x1 - x0 + 1) * (y1 - y0 + 1))
    return int(covered.sum()), per, covered.size


def test_02_tiled_matches_reference(capfd):
    """Tiled output equals the dense per-pixel oracle on 50 random scenes."""
    t0 = time.perf_counter()
    worst = 0.0
    saw_empty_tiles = saw_multi_tile = False
    for seed in range(50):
        gset, cam, bg = _criterion2_scene(seed)
        proj = ra.project(gset, cam)
        tiled = ra.render_tiled(proj, bg).image
        ref = ra.composite_reference(proj, bg).image
        worst = max(worst, float(np.abs(tiled - ref).max()))
        covered, per, total = _tile_footprint(proj, cam.width, cam.height)
        saw_empty_tiles |= covered < total
        saw_multi_tile |= per >= 4
    seconds = time.perf_counter() - t0
    ok = (worst <= 1e-5 and saw_empty_tiles and saw_multi_tile
          and seconds <= 60)
    _report(capfd, 2, ok,
            f"max |tiled - reference| {worst:.2e} (<=1e-5) on 50 scenes, "
            f"empty tiles {saw_empty_tiles}, multi-tile Gaussians "
            f"{saw_multi_tile}, {seconds:.1f}s (<=60s)")


# --------------------------------- criterion 3: canonical reconstruction

def test_03_canonical_reconstruction(capfd, static_run):
    """Static scenario: >=30 dB over the 10 held-out views within budget."""
    ds, ckpt = static_run["ds"], static_run["ckpt"]
    model = tr.build_model(ckpt)
    held_out = list(ds.test_indices)
    mean = _mean_test_psnr(
        ds, lambda s: tr.render_canonical(model, s.cond.camera, s.background))
    seconds = static_run["seconds"]
    ok = (mean >= 30.0 and len(held_out) == 10
          and ckpt.iteration <= 4000 and seconds <= 1800)
    _report(capfd, 3, ok,
            f"mean PSNR {mean:.2f} dB (>=30) on {len(held_out)} held-out "
            f"views, {ckpt.iteration} iterations (<=4000), "
            f"{seconds / 60:.1f} min (<=30)")


# ------------------------------------- criterion 4: deformation efficacy

def test_04_deformation_efficacy(capfd, default_run):
    """Deformed model clears 28 dB and beats the frozen canonical by 3 dB."""
    deform, base = default_run["deform_mean"], default_run["base_mean"]
    seconds = default_run["deform_seconds"]
    ok = deform >= 28.0 and deform - base >= 3.0 and seconds <= 3600
    _report(capfd, 4, ok,
            f"test PSNR {deform:.2f} dB (>=28), frozen canonical "
            f"{base:.2f} dB, margin {deform - base:.2f} dB (>=3), "
            f"{seconds / 60:.1f} min (<=60)")


# --------------------------------------- criterion 5: zero-offset identity

def test_05_zero_offset_identity(capfd, default_run):
    """A freshly initialized deformation stack is the identity map."""
    ds, ck1 = default_run["ds"], default_run["ck1"]
    model = tr.build_model(ck1)
    stack = df.AttentionStack(feature_dim=model.grid.feature_dim,
                              audio_dim=ds.audio_dim,
                              n_layers=STAGE2_CONFIG.attention_layers,
                              sh_degree=ck1.config.sh_degree, seed=0)
    worst = 0.0
    for i in list(ds.test_indices)[:3]:
        s = ds.frame(i)
        plain = tr.render_canonical(model, s.cond.camera, s.background)
        deformed = tr.render_deformed(model, stack, s.cond, s.background)
        worst = max(worst, float(np.abs(deformed - plain).max()))
    ok = worst <= 1e-6
    _report(capfd, 5, ok,
            f"max |deformed - canonical| {worst:.2e} (<=1e-6) at step 0")


# ------------------------------------ criterion 6: attention localization

def test_06_attention_localization(capfd, default_run):
    """Audio attends to the mouth, the eye token to the eyes (>=2x each)."""
    ds, manifest, ck2 = (default_run["ds"], default_run["manifest"],
                         default_run["ck2"])
    mouth = ev.attention_region_ratio(ck2, ds, manifest, "audio", "mouth")
    eyes = ev.attention_region_ratio(ck2, ds, manifest, "eye",
                                     ("eye_left", "eye_right"))
    ok = mouth >= 2.0 and eyes >= 2.0
    _report(capfd, 6, ok,
            f"audio-token mouth/non-mouth {mouth:.2f}x (>=2), eye-token "
            f"eye/non-eye {eyes:.2f}x (>=2)")


# ------------------------------------------ criterion 7: stage-wise trend

def test_07_stagewise_beats_from_scratch(capfd, reduced_ds):
    """Warm-started deformation beats from-scratch at 500 and 1000 steps."""
    results = []
    for seed in (0, 1, 2):
        cfg1 = dataclasses.replace(ABLATION_STAGE1, seed=seed)
        cfg2 = dataclasses.replace(ABLATION_STAGE2, seed=seed)
        ck1 = tr.train_canonical(reduced_ds, cfg1)
        warm_log, scratch_log = [], []
        tr.train_deform(reduced_ds, cfg2, warm_start=ck1, log=warm_log)
        tr.train_deform(reduced_ds, cfg2, from_scratch=True, log=scratch_log)
        warm = {int(r["iteration"]): r["probe_psnr"] for r in warm_log}
        scratch = {int(r["iteration"]): r["probe_psnr"] for r in scratch_log}
        results.append((seed, warm[500], scratch[500], warm[1000],
                        scratch[1000]))
    wins = sum(1 for _, w5, s5, w10, s10 in results if w5 > s5 and w10 > s10)
    detail = "; ".join(
        f"seed {s}: {w5:.2f}/{s5:.2f} at 500, {w10:.2f}/{s10:.2f} at 1000"
        for s, w5, s5, w10, s10 in results)
    _report(capfd, 7, wins == 3, f"warm/scratch probe PSNR {detail} "
            f"({wins}/3 seeds strictly higher at both budgets)")


# ---------------------------------------- criterion 8: rendering throughput

def test_08_throughput(capfd):
    """Tiled rendering is >=10x the reference oracle at 10k Gaussians."""
    r = ev.render_speed_ratio(n=10000, size=256, seed=0, repeats=3)
    fps = 1.0 / r.seconds_tiled
    ok = r.ratio >= 10.0
    _report(capfd, 8, ok,
            f"tiled/reference speedup {r.ratio:.1f}x (>=10) at 10k "
            f"Gaussians 256x256; absolute tiled throughput {fps:.2f} FPS "
            f"({r.seconds_tiled * 1e3:.0f} ms/frame, reported not asserted)")


# ------------------------------------------------- criterion 9: determinism

def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_09_determinism(capfd, tmp_path, reduced_ds):
    """Same seed: identical datasets, trajectories, and report bytes."""
    scn = sd.scenario("reduced")
    sd.generate(scn, tmp_path / "a", threads=2)
    sd.generate(scn, tmp_path / "b", threads=3)
    data_ok = _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    cfg = tr.TrainConfig(iterations=12, init_points=120, densify_every=0,
                         log_every=1, checkpoint_every=100000,
                         triplane_resolutions="8,16", triplane_features=8)
    runs = []
    for _ in range(2):
        log = []
        ck = tr.train_canonical(reduced_ds, cfg, log=log)
        runs.append(([row["loss"] for row in log], ck))
    loss_ok = runs[0][0] == runs[1][0] and len(runs[0][0]) == 12

    cfg2 = dataclasses.replace(cfg, iterations=8)
    dlogs = []
    for _ in range(2):
        log = []
        tr.train_deform(reduced_ds, cfg2, warm_start=runs[0][1], log=log)
        dlogs.append([row["loss"] for row in log])
    loss_ok = loss_ok and dlogs[0] == dlogs[1]

    ev.render_report(runs[0][1], reduced_ds, tmp_path / "r1", threads=2)
    ev.render_report(runs[0][1], reduced_ds, tmp_path / "r2", threads=3)
    report_ok = _tree_bytes(tmp_path / "r1") == _tree_bytes(tmp_path / "r2")

    ok = data_ok and loss_ok and report_ok
    _report(capfd, 9, ok,
            f"dataset bytes identical {data_ok}, loss trajectories "
            f"identical {loss_ok}, report bytes identical {report_ok}")
