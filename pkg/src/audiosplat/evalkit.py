"""Metrics, speed benchmarks, and the rendered evaluation report.

Artifacts written by `render_report` (all byte-reproducible):

    renders/frame_XXXX.png      one render per dataset frame
    metrics.csv                 frame,split,psnr,ssim rows + mean_train/mean_test
    attention/token_<name>.png  per-token attention heat renders (4 tokens)
    attention/attention_maps.png  the four panels in one figure
    triplane/triplane_pca.png   per-level, per-plane PCA feature projections
    report.txt                  split means + notes (never wall-clock times)

`fps_benchmark` writes bench.csv (per-frame stage milliseconds) and bench.txt
(summary); those contain measured times and are exempt from byte stability.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import deform as df
from . import rasterizer as ra
from . import scene as sc
from . import imageio as io
from . import training as tr

PSNR_CAP_DB = 100.0
TOKEN_NAMES = ("audio", "eye", "view", "null")
ABSENT_METRICS = ("LPIPS", "FID", "CSIM", "Sync confidence", "AUE", "LMD")
# Keep savefig output free of environment-dependent text chunks.
_MPL_METADATA = {"Software": None, "Date": None}

ssim = tr.ssim


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1] images, capped at 100."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


# ------------------------------------------------------------ speed probes

def speed_scene(n, size=256, seed=0, splat=0.02):
    """Random sparse Gaussian cloud + camera for renderer timing."""
    rng = np.random.default_rng((seed, n))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    positions = v * 0.9 * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    quats = rng.normal(size=(n, 4))
    gset = sc.GaussianSet(
        positions=positions,
        rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        log_scales=np.log(splat) + rng.normal(0, 0.2, (n, 3)),
        sh_coeffs=rng.normal(0, 0.3, (n, 12)),
        opacity_logits=rng.normal(0.5, 0.5, (n, 1)),
        sh_degree=1,
    )
    cam = sc.Camera(extrinsic=sc.look_at_extrinsic([0.0, 0.0, -2.5],
                                                   [0.0, 0.0, 0.0]),
                    fx=1.17 * size, fy=1.17 * size, cx=size / 2, cy=size / 2,
                    width=size, height=size)
    return gset, cam


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class SpeedRatio:
    n_gaussians: int
    image_size: int
    seconds_tiled: float
    seconds_reference: float

    @property
    def ratio(self):
        return self.seconds_reference / self.seconds_tiled


def render_speed_ratio(n=10000, size=256, seed=0, repeats=3) -> SpeedRatio:
    """Tiled-vs-reference wall clock on one synthetic scene (best of runs)."""
    gset, cam = speed_scene(n, size, seed)
    background = np.full((size, size, 3), 0.3)
    projected = ra.project(gset, cam)
    t_tiled = _best_of(lambda: ra.render_tiled(projected, background), repeats)
    t_ref = _best_of(lambda: ra.composite_reference(projected, background),
                     repeats)
    return SpeedRatio(n, size, t_tiled, t_ref)


def render_time_scaling(counts=(2500, 5000, 10000), size=256, seed=0,
                        repeats=3, splat=0.012):
    """[(n, seconds)] for the tiled renderer across Gaussian counts."""
    out = []
    for n in counts:
        gset, cam = speed_scene(n, size, seed, splat=splat)
        background = np.full((size, size, 3), 0.3)
        projected = ra.project(gset, cam)
        out.append((n, _best_of(lambda: ra.render_tiled(projected, background),
                                repeats)))
    return out


# --------------------------------------------------------------- benchmark

@dataclass
class BenchResult:
    frames: int
    mean_fps: float
    ms_condition: float
    ms_attend: float
    ms_render: float
    rows: list  # per-frame (index, ms_condition, ms_attend, ms_render)


def _bench_indices(dataset, frames):
    pool = dataset.test_indices or list(range(len(dataset)))
    return [pool[i % len(pool)] for i in range(frames)]


def fps_benchmark(ckpt, dataset, frames=30, out_dir=None) -> BenchResult:
    """Inference-only timing, warmup excluded, renders on 32-bit data.

    Per-frame stages: condition-encode (token embedding), attend+deform
    (cross-attention through offset application; Gaussian assembly for
    canonical checkpoints), render (tiled rasterization).
    """
    model = tr.build_model(ckpt)
    stack = tr.build_stack(ckpt)
    feats = model.query_features()
    raw = model.raw_attributes(feats)
    if stack is not None:
        z0 = df.project_features(stack, feats)

    def run_frame(i):
        sample = dataset.frame(i)
        cond = sample.cond
        background = sample.background.astype(np.float32)
        t0 = time.perf_counter()
        if stack is not None:
            tokens = df.encode_conditions(stack, cond)
        t1 = time.perf_counter()
        if stack is not None:
            z_l, _ = df.attend(stack, z0, tokens)
            off = df.predict_offsets(stack, z_l)
            gset = sc.GaussianSet(
                positions=raw["positions"].data + off.d_pos.data,
                rotations=raw["rotations"].data + off.d_rot.data,
                log_scales=raw["log_scales"].data + off.d_logs.data,
                sh_coeffs=raw["sh_coeffs"].data + off.d_sh.data,
                opacity_logits=raw["opacity_logits"].data + off.d_logit.data,
                sh_degree=model.sh_degree)
        else:
            gset = sc.GaussianSet(
                positions=raw["positions"].data,
                rotations=raw["rotations"].data,
                log_scales=raw["log_scales"].data,
                sh_coeffs=raw["sh_coeffs"].data,
                opacity_logits=raw["opacity_logits"].data,
                sh_degree=model.sh_degree)
        gset32 = gset.astype(np.float32)
        t2 = time.perf_counter()
        ra.render_tiled(ra.project(gset32, cond.camera), background)
        t3 = time.perf_counter()
        return (i, 1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2))

    indices = _bench_indices(dataset, frames)
    run_frame(indices[0])  # warmup, not recorded
    rows = [run_frame(i) for i in indices]
    cond_ms = float(np.mean([r[1] for r in rows]))
    attend_ms = float(np.mean([r[2] for r in rows]))
    render_ms = float(np.mean([r[3] for r in rows]))
    total_s = sum(r[1] + r[2] + r[3] for r in rows) / 1e3
    result = BenchResult(frames=frames, mean_fps=frames / total_s,
                         ms_condition=cond_ms, ms_attend=attend_ms,
                         ms_render=render_ms, rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "bench.csv", "w", encoding="utf-8") as fh:
            fh.write("frame,ms_condition,ms_attend_deform,ms_render\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]:.3f},{r[2]:.3f},{r[3]:.3f}\n")
        (out_dir / "bench.txt").write_text(
            f"frames benchmarked: {frames}\n"
            f"mean fps: {result.mean_fps:.2f}\n"
            f"condition-encode: {cond_ms:.2f} ms\n"
            f"attend+deform: {attend_ms:.2f} ms\n"
            f"render: {render_ms:.2f} ms\n"
            "notes: warmup pass excluded; render stage consumes 32-bit data\n",
            encoding="utf-8")
    return result


# ------------------------------------------------------------------ report

def layer_mean_scores(scores):
    """(N, 4) attention weights averaged over layers and heads."""
    return np.mean([s.mean(axis=1) for s in scores], axis=0)


def _render_token_map(gset, scores_one_layer_mean, token, camera, background):
    colors = df.attention_to_colors(scores_one_layer_mean[:, None, :], token)
    return ra.render_tiled(ra.project(gset, camera, colors=colors),
                           background).image


def _triplane_pca_rgb(plane):
    """(R, R, 3) PCA projection of one (F, R, R) feature plane."""
    f, r, _ = plane.shape
    flat = plane.reshape(f, r * r).T  # (R², F)
    centered = flat - flat.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    # deterministic sign: largest-|loading| entry of each component positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = centered @ comps.T  # (R², 3) or fewer columns if F < 3
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    return ((proj - lo) / span).reshape(r, r, 3)


@dataclass
class ReportResult:
    out_dir: Path
    rows: list  # (frame, split, psnr, ssim)
    mean_train: tuple  # (psnr, ssim)
    mean_test: tuple


def _split_mean(rows, split):
    vals = [(p, s) for _, sp, p, s in rows if sp == split]
    if not vals:
        return (float("nan"), float("nan"))
    return (float(np.mean([v[0] for v in vals])),
            float(np.mean([v[1] for v in vals])))


def render_report(ckpt, dataset, out_dir, threads=None) -> ReportResult:
    """Render every frame, score it, and write the diagnostic figures."""
    out_dir = Path(out_dir)
    (out_dir / "renders").mkdir(parents=True, exist_ok=True)
    model = tr.build_model(ckpt)
    stack = tr.build_stack(ckpt)

    def eval_frame(i):
        sample = dataset.frame(i)
        if stack is not None:
            image = tr.render_deformed(model, stack, sample.cond,
                                       sample.background)
        else:
            image = tr.render_canonical(model, sample.cond.camera,
                                        sample.background)
        io.write_png(out_dir / "renders" / f"frame_{i:04d}.png", image)
        split = "test" if i in set(dataset.test_indices) else "train"
        return (i, split, psnr(image, sample.image),
                tr.ssim(image, sample.image))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(eval_frame, range(len(dataset))))

    with open(out_dir / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,split,psnr,ssim\n")
        for i, split, p, s in rows:
            fh.write(f"{i},{split},{p:.17g},{s:.17g}\n")
        mean_train = _split_mean(rows, "train")
        mean_test = _split_mean(rows, "test")
        fh.write(f"mean_train,train,{mean_train[0]:.17g},{mean_train[1]:.17g}\n")
        fh.write(f"mean_test,test,{mean_test[0]:.17g},{mean_test[1]:.17g}\n")

    if stack is not None:
        _write_attention_maps(model, stack, dataset, out_dir)
    _write_triplane_pca(model, out_dir)

    lines = [f"frames: {len(dataset)}",
             f"mean train psnr: {mean_train[0]:.4f} dB  ssim: {mean_train[1]:.6f}",
             f"mean test psnr: {mean_test[0]:.4f} dB  ssim: {mean_test[1]:.6f}",
             "absent metrics (require pretrained networks, not substituted): "
             + ", ".join(ABSENT_METRICS)]
    if stack is None:
        lines.append("attention maps: skipped (canonical-only checkpoint)")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
    return ReportResult(out_dir=out_dir, rows=rows, mean_train=mean_train,
                        mean_test=mean_test)


def _probe_frame(dataset):
    indices = dataset.test_indices or list(range(len(dataset)))
    return dataset.frame(indices[0])


def _write_attention_maps(model, stack, dataset, out_dir):
    (out_dir / "attention").mkdir(parents=True, exist_ok=True)
    sample = _probe_frame(dataset)
    gset, scores = tr.deformed_gaussians(model, stack, sample.cond)
    mean_scores = layer_mean_scores(scores)
    fig, axes = plt.subplots(1, 4, figsize=(16, 4.2))
    for t, name in enumerate(TOKEN_NAMES):
        image = _render_token_map(gset, mean_scores, t, sample.cond.camera,
                                  np.zeros_like(sample.background))
        io.write_png(out_dir / "attention" / f"token_{name}.png", image)
        axes[t].imshow(np.clip(image, 0, 1))
        axes[t].set_title(f"{name} token attention")
        axes[t].axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "attention" / "attention_maps.png",
                metadata=_MPL_METADATA)
    plt.close(fig)


def _write_triplane_pca(model, out_dir):
    (out_dir / "triplane").mkdir(parents=True, exist_ok=True)
    levels = model.grid.levels
    fig, axes = plt.subplots(len(levels), 3,
                             figsize=(9.6, 3.2 * len(levels)),
                             squeeze=False)
    plane_names = ("xy", "xz", "yz")
    for li, level in enumerate(levels):
        for pi in range(3):
            rgb = _triplane_pca_rgb(level.planes[pi])
            axes[li][pi].imshow(rgb)
            axes[li][pi].set_title(f"level {li} plane {plane_names[pi]}")
            axes[li][pi].axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "triplane" / "triplane_pca.png",
                metadata=_MPL_METADATA)
    plt.close(fig)


def viz_triplane(ckpt, out_dir):
    """Write the triplane PCA figure for a checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_triplane_pca(tr.build_model(ckpt), out_dir)
    return out_dir / "triplane" / "triplane_pca.png"


def viz_attention(ckpt, dataset, out_dir):
    """Write the four token-attention renders for a checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = tr.build_model(ckpt)
    stack = tr.build_stack(ckpt)
    if stack is None:
        raise ValueError("canonical checkpoint has no attention stack")
    _write_attention_maps(model, stack, dataset, out_dir)
    return out_dir / "attention" / "attention_maps.png"


def attention_region_ratio(ckpt, dataset, manifest, token, region):
    """Mean attention of a token on Gaussians inside a world region box
    relative to those outside, averaged over the test split.

    `region` is a region name or a sequence of names (union of boxes).
    """
    model = tr.build_model(ckpt)
    stack = tr.build_stack(ckpt)
    if stack is None:
        raise ValueError("canonical checkpoint has no attention stack")
    names = (region,) if isinstance(region, str) else tuple(region)
    mu = model.positions.data
    inside = np.zeros(len(mu), dtype=bool)
    for name in names:
        lo, hi = manifest.regions[name]
        inside |= np.all((mu >= lo) & (mu <= hi), axis=1)
    if not inside.any() or inside.all():
        raise ValueError(f"region {'+'.join(names)} splits no Gaussians "
                         f"({int(inside.sum())} of {len(inside)} inside)")
    t = TOKEN_NAMES.index(token)
    ratios = []
    for i in dataset.test_indices or range(len(dataset)):
        cond = dataset.frame(i).cond
        _, scores = tr.deformed_gaussians(model, stack, cond)
        w = layer_mean_scores(scores)[:, t]
        ratios.append(float(w[inside].mean() / w[~inside].mean()))
    return float(np.mean(ratios))
