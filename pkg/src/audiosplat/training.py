"""Two-stage optimization: canonical reconstruction, then conditioned deformation.

Stage one fits the canonical model (positions, triplane, attribute heads) by
rendering at each training camera and minimizing an L1 + structural
dissimilarity loss.  Stage two adds the condition encoder and attention stack
and trains everything jointly with an extra L1 term over the lip crop.

The rasterizer sits outside the tape, so each step runs two backward passes:
the loss graph produces the gradient image, `render_backward` converts it to
per-Gaussian attribute gradients, and those seed the model tape.
"""
import dataclasses
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from . import autodiff as ad
from . import canonical
from . import deform as df
from . import rasterizer as ra
from . import scene as sc
from . import triplane as tp

CHECKPOINT_MAGIC = b"ASPLATCP"
CHECKPOINT_VERSION = 1

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

LOG_COLUMNS = ("iteration", "loss", "l1", "dssim", "lip", "probe_psnr",
               "seconds")


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    """Flat hyperparameter bundle; round-trips through key=value text."""

    lambda_l1: float = 0.8
    lambda_dssim: float = 0.2
    lambda_perceptual: float = 0.0  # slot for a pluggable perceptual term
    lambda_lip: float = 0.8
    iterations: int = 8000
    lr_triplane: float = 0.0016
    lr_triplane_final: float = 0.00016
    lr_other: float = 0.0001
    lr_other_final: float = 0.00001
    seed: int = 0
    cap: int = sc.GAUSSIAN_CAP
    sh_degree: int = 1
    init_points: int = 1200
    init_radius: float = 0.5
    init_source: str = "sphere"  # or a path to an x-y-z point file
    triplane_resolutions: str = "64,128"
    triplane_features: int = 64
    attention_layers: int = 2
    densify_from: int = 500
    densify_every: int = 500
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    checkpoint_every: int = 1000
    log_every: int = 50
    stop_psnr: float = 0.0  # early-stop once probe PSNR reaches this (0: off)

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_dssim", "lambda_perceptual",
                     "lambda_lip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("iterations", "cap", "checkpoint_every", "log_every",
                     "init_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not self.init_source:
            raise ValueError("init_source must be 'sphere' or a file path")

    def resolutions(self):
        return tuple(int(tok) for tok in self.triplane_resolutions.split(","))


def format_config(config: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}"
             for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    by_name = {"int": int, "float": float, "str": str}
    fields = {f.name: by_name[f.type] if isinstance(f.type, str) else f.type
              for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = fields[key](val.strip())
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def lr_schedule(initial, final, iteration, total):
    """Exponential interpolation reaching `final` at the last iteration."""
    if total <= 1:
        return float(final)
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    return float(initial * (final / initial) ** frac)


# ------------------------------------------------------------------ losses

def _gaussian_window():
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2
    w = np.exp(-(ax ** 2) / (2 * SSIM_SIGMA ** 2))
    return w / w.sum()

_WINDOW_1D = _gaussian_window()


def _blur_array(x):
    out = convolve1d(x, _WINDOW_1D, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, _WINDOW_1D, axis=1, mode="constant", cval=0.0)


def blur(t):
    """Separable Gaussian blur with zero padding, self-adjoint under its vjp."""
    t = ad.constant(t)
    return ad.custom(_blur_array(t.data), [t], lambda g: [_blur_array(g)],
                     name="gaussian_blur")


def ssim_graph(a, b):
    """Structural similarity as a differentiable scalar (windowed, zero-pad)."""
    mu_a, mu_b = blur(a), blur(b)
    var_a = ad.sub(blur(ad.mul(a, a)), ad.mul(mu_a, mu_a))
    var_b = ad.sub(blur(ad.mul(b, b)), ad.mul(mu_b, mu_b))
    cov = ad.sub(blur(ad.mul(a, b)), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add(ad.scale(ad.mul(mu_a, mu_b), 2.0), ad.constant(SSIM_C1)),
                 ad.add(ad.scale(cov, 2.0), ad.constant(SSIM_C2)))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)),
                        ad.constant(SSIM_C1)),
                 ad.add(ad.add(var_a, var_b), ad.constant(SSIM_C2)))
    return ad.reduce_mean(ad.div(num, den))


def ssim(a, b):
    """Mean SSIM of two equal-shape images in [0, 1]; plain scalar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    return float(ssim_graph(ad.Tensor(a), ad.Tensor(b)).data)


def _check_lip_box(lip_box, shape):
    x0, y0, x1, y1 = (int(v) for v in lip_box)
    h, w = shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"lip box {lip_box} empty or outside {w}x{h} image")
    return x0, y0, x1, y1


def _loss_graph(render, gt, config, lip_box=None, perceptual=None):
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"loss: shape mismatch {render.shape} vs {gt.shape}")
    if config.lambda_perceptual > 0 and perceptual is None:
        raise ValueError("lambda_perceptual > 0 but no perceptual term plugged in")
    with ad.Tape() as tape:
        img = ad.Tensor(render, trainable=True, name="image")
        ref = ad.Tensor(gt)
        l1 = ad.reduce_mean(ad.absolute(ad.sub(img, ref)))
        dssim = ad.sub(ad.constant(1.0), ssim_graph(img, ref))
        total = ad.add(ad.scale(l1, config.lambda_l1),
                       ad.scale(dssim, config.lambda_dssim))
        parts = {"l1": float(l1.data), "dssim": float(dssim.data), "lip": 0.0}
        if lip_box is not None:
            x0, y0, x1, y1 = _check_lip_box(lip_box, render.shape)
            key = (slice(y0, y1), slice(x0, x1))
            lip = ad.reduce_mean(ad.absolute(ad.sub(ad.take(img, key),
                                                    ad.take(ref, key))))
            total = ad.add(total, ad.scale(lip, config.lambda_lip))
            parts["lip"] = float(lip.data)
        if perceptual is not None and config.lambda_perceptual > 0:
            total = ad.add(total, ad.scale(perceptual(img, ref),
                                           config.lambda_perceptual))
        grads = tape.backward(total)
    return float(total.data), grads[img], parts


def loss_canonical(render, gt, config=None, perceptual=None):
    """L1 + weighted structural dissimilarity.

    Returns (loss, dloss/drender, parts) where parts holds the unweighted
    term values.
    """
    config = config or TrainConfig()
    return _loss_graph(render, gt, config, perceptual=perceptual)


def loss_deform(render, gt, lip_box, config=None, perceptual=None):
    """`loss_canonical` plus a weighted L1 over the lip crop.

    `lip_box` is (x0, y0, x1, y1) in pixels, half-open, x = column, y = row.
    """
    config = config or TrainConfig()
    return _loss_graph(render, gt, config, lip_box=lip_box,
                       perceptual=perceptual)


# --------------------------------------------------------------- optimizer

class Adam:
    """Adaptive-moment optimizer updating tensors in place."""

    def __init__(self, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, params, grads, lrs):
        """One update; params/grads/lrs are name-keyed, None grads skipped."""
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(tensor.data))
            v = self.v.setdefault(name, np.zeros_like(tensor.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor.data -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap_rows(self, name, survivors, n_children):
        """Carry moments for surviving rows, zero them for appended children."""
        for store in (self.m, self.v):
            old = store.get(name)
            if old is None:
                continue
            fresh = np.zeros((len(survivors) + n_children,) + old.shape[1:],
                             dtype=old.dtype)
            fresh[:len(survivors)] = old[survivors]
            store[name] = fresh


class TrainingDiverged(FloatingPointError):
    """Raised when the loss stops being finite; carries the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    """Self-contained training state: weights, moments, counters, config."""

    stage: str
    iteration: int
    config: TrainConfig
    arrays: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint):
    entries = {"stage": ckpt.stage, "iteration": int(ckpt.iteration),
               "config": format_config(ckpt.config)}
    entries.update(ckpt.scalars)
    entries.update(ckpt.arrays)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for key in sorted(entries):
        value = entries[key]
        name = key.encode("utf-8")
        blob += struct.pack("<H", len(name)) + name
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value, dtype=np.float64)
            blob += struct.pack("<BB", 0, arr.ndim)
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
            blob += arr.tobytes()
        elif isinstance(value, (int, np.integer)):
            blob += struct.pack("<Bq", 1, int(value))
        elif isinstance(value, float):
            blob += struct.pack("<Bd", 2, value)
        else:
            text = str(value).encode("utf-8")
            blob += struct.pack("<BI", 3, len(text)) + text
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    entries = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off:off + klen].decode("utf-8")
        off += klen
        (kind,) = struct.unpack_from("<B", blob, off)
        off += 1
        if kind == 0:
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            off += 8 * n
            entries[key] = arr.reshape(shape).copy()
        elif kind == 1:
            (entries[key],) = struct.unpack_from("<q", blob, off)
            off += 8
        elif kind == 2:
            (entries[key],) = struct.unpack_from("<d", blob, off)
            off += 8
        elif kind == 3:
            (tlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            entries[key] = blob[off:off + tlen].decode("utf-8")
            off += tlen
        else:
            raise ValueError(f"corrupt checkpoint entry kind {kind}")
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    stage = entries.pop("stage")
    iteration = int(entries.pop("iteration"))
    config = parse_config(entries.pop("config"))
    arrays = {k: v for k, v in entries.items() if isinstance(v, np.ndarray)}
    scalars = {k: v for k, v in entries.items()
               if not isinstance(v, np.ndarray)}
    return Checkpoint(stage=stage, iteration=iteration, config=config,
                      arrays=arrays, scalars=scalars)


def _snapshot(stage, iteration, config, model, stack, adam, extra_arrays=None,
              extra_scalars=None):
    arrays = {}
    for name, tensor in model.parameters().items():
        arrays[f"model/{name}"] = tensor.data.copy()
    arrays["model/bounds_lo"] = np.asarray(model.grid.lo, dtype=np.float64).copy()
    arrays["model/bounds_hi"] = np.asarray(model.grid.hi, dtype=np.float64).copy()
    if stack is not None:
        for name, tensor in stack.parameters().items():
            arrays[f"stack/{name}"] = tensor.data.copy()
    for name in adam.m:
        arrays[f"adam/{name}/m"] = adam.m[name].copy()
        arrays[f"adam/{name}/v"] = adam.v[name].copy()
    scalars = {"adam/step": int(adam.step_count)}
    arrays.update(extra_arrays or {})
    scalars.update(extra_scalars or {})
    return Checkpoint(stage=stage, iteration=iteration, config=config,
                      arrays=arrays, scalars=scalars)


def build_model(ckpt: Checkpoint) -> canonical.CanonicalModel:
    """Reconstruct the canonical model stored in a checkpoint."""
    cfg = ckpt.config
    arrays = ckpt.arrays
    levels = []
    while f"model/plane_L{len(levels)}" in arrays:
        planes = arrays[f"model/plane_L{len(levels)}"].copy()
        levels.append(tp.TriplaneLevel(planes=planes,
                                       resolution=planes.shape[2],
                                       features=planes.shape[1]))
    if not levels:
        raise ValueError("checkpoint holds no triplane levels")
    grid = tp.TriplaneGrid(levels=levels, lo=arrays["model/bounds_lo"].copy(),
                           hi=arrays["model/bounds_hi"].copy())
    model = canonical.CanonicalModel(grid, arrays["model/positions"].copy(),
                                     sh_degree=cfg.sh_degree, seed=cfg.seed,
                                     cap=cfg.cap)
    for name, tensor in model.mlp.items():
        tensor.data[...] = arrays[f"model/{name}"]
    return model


def build_stack(ckpt: Checkpoint):
    """Reconstruct the attention stack, or None for canonical checkpoints."""
    arrays = ckpt.arrays
    if "stack/z_proj_w" not in arrays:
        return None
    n_layers = 0
    while f"stack/L{n_layers}_wq" in arrays:
        n_layers += 1
    wq = arrays["stack/L0_wq"]
    stack = df.AttentionStack(
        feature_dim=arrays["stack/z_proj_w"].shape[0],
        audio_dim=arrays["stack/audio_w"].shape[0],
        n_layers=n_layers,
        sh_degree=ckpt.config.sh_degree,
        dim=wq.shape[0],
        n_heads=df.N_HEADS,
        head_dim=wq.shape[1] // df.N_HEADS,
        ffn_dim=arrays["stack/L0_ffn_w1"].shape[1],
        seed=ckpt.config.seed,
    )
    for name, tensor in stack.parameters().items():
        tensor.data[...] = arrays[f"stack/{name}"]
    return stack


def _adam_from(ckpt: Checkpoint) -> Adam:
    adam = Adam()
    adam.step_count = int(ckpt.scalars.get("adam/step", 0))
    for key, arr in ckpt.arrays.items():
        if key.startswith("adam/") and key.endswith("/m"):
            adam.m[key[len("adam/"):-len("/m")]] = arr.copy()
        elif key.startswith("adam/") and key.endswith("/v"):
            adam.v[key[len("adam/"):-len("/v")]] = arr.copy()
    return adam


# ---------------------------------------------------------------- training

def _named_params(model, stack=None):
    out = {f"model/{k}": t for k, t in model.parameters().items()}
    if stack is not None:
        out.update({f"stack/{k}": t for k, t in stack.parameters().items()})
    return out


def _learning_rates(names, iteration, config):
    lr_tri = lr_schedule(config.lr_triplane, config.lr_triplane_final,
                         iteration, config.iterations)
    lr_oth = lr_schedule(config.lr_other, config.lr_other_final,
                         iteration, config.iterations)
    return {n: lr_tri if n.startswith("model/plane_L") else lr_oth
            for n in names}


def _epoch_order(train_indices, seed, epoch):
    rng = np.random.default_rng((seed, epoch))
    return train_indices[rng.permutation(len(train_indices))]


def _probe_index(dataset):
    test = list(dataset.test_indices)
    return test[0] if test else list(dataset.train_indices)[0]


def _psnr(a, b):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse <= 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def _raw_gaussians(raw, sh_degree):
    return sc.GaussianSet(
        positions=raw["positions"].data,
        rotations=raw["rotations"].data,
        log_scales=raw["log_scales"].data,
        sh_coeffs=raw["sh_coeffs"].data,
        opacity_logits=raw["opacity_logits"].data,
        sh_degree=sh_degree,
    )


def render_canonical(model, camera, background):
    """Inference-path canonical render (no tape)."""
    gset = canonical.assemble_canonical(model)
    return ra.render_tiled(ra.project(gset, camera), background).image


def deformed_gaussians(model, stack, cond):
    """Per-frame deformed Gaussians plus per-layer attention scores (no tape)."""
    feats = model.query_features()
    raw = model.raw_attributes(feats)
    tokens = df.encode_conditions(stack, cond)
    z_l, scores = df.attend(stack, df.project_features(stack, feats), tokens)
    off = df.predict_offsets(stack, z_l)
    gset = sc.GaussianSet(
        positions=raw["positions"].data + off.d_pos.data,
        rotations=raw["rotations"].data + off.d_rot.data,
        log_scales=raw["log_scales"].data + off.d_logs.data,
        sh_coeffs=raw["sh_coeffs"].data + off.d_sh.data,
        opacity_logits=raw["opacity_logits"].data + off.d_logit.data,
        sh_degree=model.sh_degree,
    )
    return gset, scores


def render_deformed(model, stack, cond, background):
    gset, _ = deformed_gaussians(model, stack, cond)
    return ra.render_tiled(ra.project(gset, cond.camera), background).image


class _LogWriter:
    def __init__(self, out_dir, log_list):
        self.rows = log_list
        self.fh = None
        if out_dir is not None:
            self.fh = open(out_dir / "train_log.csv", "w", encoding="utf-8")
            self.fh.write(",".join(LOG_COLUMNS) + "\n")

    def row(self, values):
        if self.rows is not None:
            self.rows.append(dict(values))
        if self.fh is not None:
            self.fh.write(",".join(_format_cell(values[c]) for c in LOG_COLUMNS)
                          + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _format_cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _prepare_out_dir(out_dir):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _init_positions(config: TrainConfig):
    """Starting positions: a seeded sphere, or every row of a point file."""
    if config.init_source == "sphere":
        pts = sc.init_positions("sphere", config.init_points,
                                seed=config.seed)
        return pts * (config.init_radius / 0.5)
    return sc.init_positions(config.init_source, None, seed=config.seed)


def train_canonical(dataset, config: TrainConfig, out_dir=None, start=None,
                    log=None) -> Checkpoint:
    """Stage one: fit the canonical model to the training frames.

    `start` resumes a canonical checkpoint; `log`, if given, collects one
    dict per logged row.  Returns the final checkpoint; checkpoints and a CSV
    log are written under `out_dir` when provided.
    """
    out_dir = _prepare_out_dir(out_dir)
    t0 = time.perf_counter()
    if start is not None:
        if start.stage != "canonical":
            raise ValueError(f"cannot resume canonical stage from "
                             f"{start.stage!r} checkpoint")
        model = build_model(start)
        adam = _adam_from(start)
        begin = start.iteration
        densify_acc = start.arrays["densify/acc"].copy()
        densify_count = int(start.scalars.get("densify/count", 0))
    else:
        pts = _init_positions(config)
        model = canonical.create_model(
            pts, sh_degree=config.sh_degree,
            resolutions=config.resolutions(),
            features=config.triplane_features, seed=config.seed,
            cap=config.cap)
        adam = Adam()
        begin = 0
        densify_acc = np.zeros(len(pts))
        densify_count = 0

    def snapshot(iteration):
        return _snapshot("canonical", iteration, config, model, None, adam,
                         extra_arrays={"densify/acc": densify_acc.copy()},
                         extra_scalars={"densify/count": densify_count})

    last_good = snapshot(begin)
    train_idx = np.asarray(list(dataset.train_indices), dtype=np.int64)
    probe = dataset.frame(_probe_index(dataset))
    writer = _LogWriter(out_dir, log)
    order = _epoch_order(train_idx, config.seed, begin // len(train_idx))
    stop_step = None
    try:
        for it in range(begin, config.iterations):
            epoch, pos = divmod(it, len(train_idx))
            if pos == 0:
                order = _epoch_order(train_idx, config.seed, epoch)
            frame = dataset.frame(int(order[pos]))
            try:
                with ad.Tape() as tape:
                    raw = model.raw_attributes()
                gset = _raw_gaussians(raw, config.sh_degree)
                projected = ra.project(gset, frame.cond.camera)
                rendered = ra.render_tiled(projected, frame.background,
                                           retain_records=True)
                loss, grad_img, parts = loss_canonical(rendered.image,
                                                       frame.image, config)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                rg = ra.render_backward(rendered, grad_img, projected, gset,
                                        frame.cond.camera)
                gradmap = tape.backward({
                    raw["positions"]: rg.positions,
                    raw["rotations"]: rg.rotations,
                    raw["log_scales"]: rg.log_scales,
                    raw["sh_coeffs"]: rg.sh_coeffs,
                    raw["opacity_logits"]: rg.opacity_logits,
                })
                params = _named_params(model)
                grads = {n: gradmap.get(t) for n, t in params.items()}
                adam.step(params, grads, _learning_rates(params, it, config))
            except TrainingDiverged:
                raise
            except FloatingPointError as exc:
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint_last_good.bin",
                                    last_good)
                raise TrainingDiverged(
                    f"aborted at iteration {it}: {exc}",
                    checkpoint=last_good) from exc
            pos_grad = gradmap.get(raw["positions"])
            if pos_grad is not None:
                densify_acc += np.linalg.norm(pos_grad, axis=1)
                densify_count += 1
            step = it + 1
            if (config.densify_every > 0 and step > config.densify_from
                    and step % config.densify_every == 0
                    and step < config.iterations):
                mean_norms = densify_acc / max(densify_count, 1)
                outcome = canonical.densify_and_prune(
                    model, mean_norms, step,
                    grad_threshold=config.densify_grad_threshold,
                    prune_opacity=config.prune_opacity, seed=config.seed)
                if outcome.changed:
                    adam.remap_rows("model/positions", outcome.survivors,
                                    outcome.n_children)
                densify_acc = np.zeros(len(model.positions.data))
                densify_count = 0
            if step % config.log_every == 0 or step == config.iterations:
                img = render_canonical(model, probe.cond.camera,
                                       probe.background)
                probe_psnr = _psnr(img, probe.image)
                writer.row({"iteration": step, "loss": loss,
                            "l1": parts["l1"], "dssim": parts["dssim"],
                            "lip": parts["lip"],
                            "probe_psnr": probe_psnr,
                            "seconds": time.perf_counter() - t0})
                if 0 < config.stop_psnr <= probe_psnr:
                    stop_step = step
            if step % config.checkpoint_every == 0:
                last_good = snapshot(step)
                if out_dir is not None:
                    save_checkpoint(out_dir / f"checkpoint_{step:06d}.bin",
                                    last_good)
            if stop_step is not None:
                break
    finally:
        writer.close()
    final = snapshot(stop_step if stop_step is not None
                     else config.iterations)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.bin", final)
    return final


def train_deform(dataset, config: TrainConfig, warm_start=None, out_dir=None,
                 from_scratch=False, start=None, log=None) -> Checkpoint:
    """Stage two: condition encoder + attention stack + canonical, jointly.

    `warm_start` is the canonical-stage checkpoint; pass `from_scratch=True`
    to skip it and train everything from a fresh initialization instead.
    `start` resumes a deformation-stage checkpoint.
    """
    out_dir = _prepare_out_dir(out_dir)
    t0 = time.perf_counter()
    audio_dim = getattr(dataset, "audio_dim", None)
    if audio_dim is None:
        audio_dim = dataset.frame(list(dataset.train_indices)[0]).cond.audio.size

    if start is not None:
        if start.stage != "deform":
            raise ValueError(f"cannot resume deformation stage from "
                             f"{start.stage!r} checkpoint")
        model = build_model(start)
        stack = build_stack(start)
        adam = _adam_from(start)
        begin = start.iteration
    else:
        if warm_start is not None:
            model = build_model(warm_start)
        elif from_scratch:
            pts = _init_positions(config)
            model = canonical.create_model(
                pts, sh_degree=config.sh_degree,
                resolutions=config.resolutions(),
                features=config.triplane_features, seed=config.seed,
                cap=config.cap)
        else:
            raise ValueError("deformation stage needs a canonical checkpoint "
                             "(warm_start) or from_scratch=True")
        stack = df.AttentionStack(
            feature_dim=model.grid.feature_dim, audio_dim=int(audio_dim),
            n_layers=config.attention_layers, sh_degree=config.sh_degree,
            seed=config.seed)
        adam = Adam()
        begin = 0

    def snapshot(iteration):
        return _snapshot("deform", iteration, config, model, stack, adam)

    last_good = snapshot(begin)
    train_idx = np.asarray(list(dataset.train_indices), dtype=np.int64)
    probe = dataset.frame(_probe_index(dataset))
    writer = _LogWriter(out_dir, log)
    order = _epoch_order(train_idx, config.seed, begin // len(train_idx))
    stop_step = None
    try:
        for it in range(begin, config.iterations):
            epoch, pos = divmod(it, len(train_idx))
            if pos == 0:
                order = _epoch_order(train_idx, config.seed, epoch)
            frame = dataset.frame(int(order[pos]))
            try:
                with ad.Tape() as tape:
                    feats = model.query_features()
                    raw = model.raw_attributes(feats)
                    tokens = df.encode_conditions(stack, frame.cond)
                    z_l, _ = df.attend(stack,
                                       df.project_features(stack, feats),
                                       tokens)
                    off = df.predict_offsets(stack, z_l)
                    deformed = {
                        "positions": ad.add(raw["positions"], off.d_pos),
                        "rotations": ad.add(raw["rotations"], off.d_rot),
                        "log_scales": ad.add(raw["log_scales"], off.d_logs),
                        "sh_coeffs": ad.add(raw["sh_coeffs"], off.d_sh),
                        "opacity_logits": ad.add(raw["opacity_logits"],
                                                 off.d_logit),
                    }
                gset = _raw_gaussians(deformed, config.sh_degree)
                projected = ra.project(gset, frame.cond.camera)
                rendered = ra.render_tiled(projected, frame.background,
                                           retain_records=True)
                loss, grad_img, parts = loss_deform(rendered.image,
                                                    frame.image,
                                                    frame.lip_box, config)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                rg = ra.render_backward(rendered, grad_img, projected, gset,
                                        frame.cond.camera)
                gradmap = tape.backward({
                    deformed["positions"]: rg.positions,
                    deformed["rotations"]: rg.rotations,
                    deformed["log_scales"]: rg.log_scales,
                    deformed["sh_coeffs"]: rg.sh_coeffs,
                    deformed["opacity_logits"]: rg.opacity_logits,
                })
                params = _named_params(model, stack)
                grads = {n: gradmap.get(t) for n, t in params.items()}
                adam.step(params, grads, _learning_rates(params, it, config))
            except TrainingDiverged:
                raise
            except FloatingPointError as exc:
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint_last_good.bin",
                                    last_good)
                raise TrainingDiverged(
                    f"aborted at iteration {it}: {exc}",
                    checkpoint=last_good) from exc
            step = it + 1
            if step % config.log_every == 0 or step == config.iterations:
                img = render_deformed(model, stack, probe.cond,
                                      probe.background)
                probe_psnr = _psnr(img, probe.image)
                writer.row({"iteration": step, "loss": loss,
                            "l1": parts["l1"], "dssim": parts["dssim"],
                            "lip": parts["lip"],
                            "probe_psnr": probe_psnr,
                            "seconds": time.perf_counter() - t0})
                if 0 < config.stop_psnr <= probe_psnr:
                    stop_step = step
            if step % config.checkpoint_every == 0:
                last_good = snapshot(step)
                if out_dir is not None:
                    save_checkpoint(out_dir / f"checkpoint_{step:06d}.bin",
                                    last_good)
            if stop_step is not None:
                break
    finally:
        writer.close()
    final = snapshot(stop_step if stop_step is not None
                     else config.iterations)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.bin", final)
    return final
