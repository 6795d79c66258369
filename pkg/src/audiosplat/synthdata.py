"""Deterministic synthetic talking-head datasets.

A procedural Gaussian "head" (skin blob + mouth cluster + two eye clusters)
is animated by a seeded audio-feature track and a periodic blink scalar,
then rendered to ground-truth frames with the reference compositor on an
orbiting camera over a fixed gradient background.

Manifest grammar (one token-separated statement per line):

    dataset-version 1
    name <scenario name>
    frames <count>
    image-size <pixels>
    audio-dim <D_a>
    intrinsics <fx> <fy> <cx> <cy>
    background <relative path>
    points <relative path>                     # optional rest-pose x-y-z file
    region <name> <lo_x> <lo_y> <lo_z> <hi_x> <hi_y> <hi_z>
    labels <name>:<count>,<name>:<count>,...   # GT Gaussians, template order
    frame <index>
    image <relative path>
    split <train|test>
    extrinsic <16 floats, row-major 4x4>
    audio <D_a floats>
    eye <float in [0,1]>
    lipbox <x0> <y0> <x1> <y1>
    end

Frame blocks appear in index order; `region` boxes are world-space AABBs of
the template clusters (padded by the motion range) for evaluation use, and
`labels` run-length encodes per-Gaussian cluster membership.  `points` names
the rest-pose template position file (one `x y z` row per Gaussian, template
order) that training can use to initialize model positions.
"""
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import deform as df
from . import imageio as io
from . import rasterizer as ra
from . import scene as sc

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"

SH0 = 0.28209479177387814  # degree-0 basis constant

TRAIN_TEST_MODULUS = 11  # every 11th frame is held out: 10:1 split


# --------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class SynthScenario:
    """Template + animation recipe; every derived quantity is seeded."""

    name: str
    frames: int
    image_size: int
    seed: int = 0
    n_head: int = 500
    n_mouth: int = 45
    n_eye: int = 14
    audio_dim: int = 32
    audio_amplitude: float = 1.0
    mouth_amplitude: float = 0.11
    mouth_opacity_gain: float = 1.0
    blink_amplitude: float = 1.0
    blink_period: int = 37
    orbit_radius: float = 2.3
    orbit_amplitude: float = 0.6
    orbit_cycles: float = 2.0
    elevation_amplitude: float = 0.18

    def __post_init__(self):
        if self.frames <= 0 or self.image_size <= 0:
            raise ValueError("frames and image_size must be positive")

    def intrinsics(self):
        f = 1.17 * self.image_size
        c = self.image_size / 2.0
        return f, f, c, c


def scenario(name, seed=0) -> SynthScenario:
    """The shipped scenarios: default (dynamic), static, reduced (smoke)."""
    if name == "default":
        return SynthScenario("default", frames=550, image_size=256, seed=seed)
    if name == "static":
        return SynthScenario("static", frames=110, image_size=128, seed=seed,
                             audio_amplitude=0.0, mouth_amplitude=0.0,
                             blink_amplitude=0.0)
    if name == "reduced":
        return SynthScenario("reduced", frames=33, image_size=64, seed=seed,
                             n_head=60, n_mouth=14, n_eye=5)
    raise ValueError(f"unknown scenario {name!r}; "
                     "expected default, static, or reduced")


# ----------------------------------------------------------------- template

MOUTH_CENTER = np.array([0.0, -0.16, -0.30])
EYE_CENTERS = {"eye_left": np.array([-0.15, 0.12, -0.30]),
               "eye_right": np.array([0.15, 0.12, -0.30])}


def _color_to_sh(colors, rng, wobble=0.04):
    """Degree-1 coefficients whose view-averaged color is `colors`."""
    n = len(colors)
    coeffs = rng.normal(0.0, wobble, (n, 4, 3))
    coeffs[:, 0, :] = (colors - 0.5) / SH0
    return coeffs.reshape(n, 12)


@dataclass
class Template:
    """The undeformed GT head plus per-Gaussian cluster labels."""

    gset: sc.GaussianSet
    labels: np.ndarray  # of str, template order

    def mask(self, name):
        return self.labels == name

    @property
    def mouth_mask(self):
        return self.mask("mouth")

    @property
    def eye_mask(self):
        return self.mask("eye_left") | self.mask("eye_right")


def build_template(scn: SynthScenario) -> Template:
    rng = np.random.default_rng((scn.seed, 0))
    chunks = []

    def ball(n, center, radii):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = rng.uniform(0, 1, (n, 1)) ** (1 / 3)
        return center + v * r * radii

    # skin blob
    pos = ball(scn.n_head, np.zeros(3), np.array([0.42, 0.5, 0.38]))
    col = np.array([0.80, 0.62, 0.52]) + rng.normal(0, 0.05, (scn.n_head, 3))
    logit = rng.normal(1.2, 0.3, (scn.n_head, 1))
    logs = np.log(0.055) + rng.normal(0, 0.25, (scn.n_head, 3))
    chunks.append((pos, col, logit, logs, "head"))
    # mouth patch
    pos = ball(scn.n_mouth, MOUTH_CENTER, np.array([0.11, 0.03, 0.02]))
    col = np.array([0.55, 0.20, 0.20]) + rng.normal(0, 0.03, (scn.n_mouth, 3))
    logit = rng.normal(1.8, 0.2, (scn.n_mouth, 1))
    logs = np.log(0.030) + rng.normal(0, 0.15, (scn.n_mouth, 3))
    chunks.append((pos, col, logit, logs, "mouth"))
    # eye clusters
    for name, center in EYE_CENTERS.items():
        pos = ball(scn.n_eye, center, np.array([0.045, 0.045, 0.02]))
        col = np.array([0.18, 0.28, 0.45]) + rng.normal(0, 0.03, (scn.n_eye, 3))
        logit = rng.normal(2.0, 0.2, (scn.n_eye, 1))
        logs = np.log(0.025) + rng.normal(0, 0.15, (scn.n_eye, 3))
        chunks.append((pos, col, logit, logs, name))

    positions = np.concatenate([c[0] for c in chunks])
    colors = np.clip(np.concatenate([c[1] for c in chunks]), 0.05, 0.95)
    logits = np.concatenate([c[2] for c in chunks])
    logs = np.concatenate([c[3] for c in chunks])
    labels = np.concatenate([[c[4]] * len(c[0]) for c in chunks])
    quats = rng.normal(size=(len(positions), 4))
    gset = sc.GaussianSet(
        positions=positions,
        rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        log_scales=logs,
        sh_coeffs=_color_to_sh(colors, rng),
        opacity_logits=logits,
        sh_degree=1,
    )
    return Template(gset=gset, labels=labels)


def region_boxes(template: Template, scn: SynthScenario):
    """World AABBs of the mouth/eye clusters, padded by the motion range."""
    boxes = {}
    pad = 0.05
    for name in ("mouth", "eye_left", "eye_right"):
        pts = template.gset.positions[template.mask(name)]
        lo = pts.min(axis=0) - pad
        hi = pts.max(axis=0) + pad
        if name == "mouth":
            lo[1] -= scn.mouth_amplitude  # the mouth only travels down
        boxes[name] = (lo, hi)
    return boxes


# ------------------------------------------------------------------ tracks

def audio_track(scn: SynthScenario) -> np.ndarray:
    """(frames, D_a) seeded sum of band-limited sinusoids."""
    rng = np.random.default_rng((scn.seed, 1))
    t = np.arange(scn.frames)[:, None, None] / scn.frames
    freqs = rng.uniform(0.5, 6.0, (1, scn.audio_dim, 3))
    phases = rng.uniform(0, 2 * np.pi, (1, scn.audio_dim, 3))
    amps = rng.uniform(0.3, 1.0, (1, scn.audio_dim, 3)) / np.sqrt(3.0)
    waves = amps * np.sin(2 * np.pi * freqs * t + phases)
    return scn.audio_amplitude * waves.sum(axis=2)


def blink_track(scn: SynthScenario) -> np.ndarray:
    """(frames,) eye-closure scalar in [0, 1]; brief periodic closures."""
    n = np.arange(scn.frames)
    phase = (n % scn.blink_period) - scn.blink_period // 2
    e = np.exp(-0.5 * (phase / 1.6) ** 2)
    return np.clip(scn.blink_amplitude * e, 0.0, 1.0)


def driving_signal(scn: SynthScenario, audio) -> np.ndarray:
    """(frames,) mouth driver: seeded mix of the first 4 dims, peak |s| = 1."""
    rng = np.random.default_rng((scn.seed, 2))
    w = rng.normal(size=4)
    w /= np.linalg.norm(w)
    s = audio[:, :4] @ w
    peak = np.abs(s).max()
    return s / peak if peak > 1e-12 else np.zeros_like(s)


def camera_for(scn: SynthScenario, n: int) -> sc.Camera:
    t = n / scn.frames
    theta = scn.orbit_amplitude * np.sin(2 * np.pi * scn.orbit_cycles * t)
    phi = scn.elevation_amplitude * np.sin(2 * np.pi * 3.0 * t + 1.0)
    eye = (scn.orbit_radius * np.sin(theta) * np.cos(phi),
           scn.orbit_radius * np.sin(phi) + 0.05,
           -scn.orbit_radius * np.cos(theta) * np.cos(phi))
    fx, fy, cx, cy = scn.intrinsics()
    return sc.Camera(extrinsic=sc.look_at_extrinsic(eye, [0.0, 0.0, 0.0]),
                     fx=fx, fy=fy, cx=cx, cy=cy,
                     width=scn.image_size, height=scn.image_size)


def deformed_template(template: Template, scn: SynthScenario, s_hat: float,
                      eye: float) -> sc.GaussianSet:
    """GT Gaussians for one frame: mouth shifted/brightened, eyes faded."""
    g = template.gset
    positions = g.positions.copy()
    logits = g.opacity_logits.copy()
    mouth = template.mouth_mask
    positions[mouth, 1] -= 0.5 * scn.mouth_amplitude * (1.0 + s_hat)
    logits[mouth, 0] += scn.mouth_opacity_gain * s_hat
    logits[template.eye_mask, 0] -= 5.0 * eye
    return sc.GaussianSet(positions=positions, rotations=g.rotations,
                          log_scales=g.log_scales, sh_coeffs=g.sh_coeffs,
                          opacity_logits=logits, sh_degree=g.sh_degree)


def make_background(scn: SynthScenario) -> np.ndarray:
    """Fixed vertical gradient, slightly blue at the top."""
    size = scn.image_size
    rows = np.linspace(0.0, 1.0, size)[:, None]
    top = np.array([0.30, 0.34, 0.44])
    bottom = np.array([0.24, 0.22, 0.24])
    img = top[None, None, :] * (1 - rows[:, :, None]) \
        + bottom[None, None, :] * rows[:, :, None]
    return np.broadcast_to(img, (size, size, 3)).copy()


def lip_box_for(gset: sc.GaussianSet, mouth_mask, cam: sc.Camera):
    """Padded pixel AABB of the projected mouth cluster, (x0, y0, x1, y1)."""
    pts = gset.positions[mouth_mask]
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = np.maximum(cam_pts[:, 2], 1e-6)
    px = cam.fx * cam_pts[:, 0] / z + cam.cx
    py = cam.fy * cam_pts[:, 1] / z + cam.cy
    pad = max(3, cam.width // 42)
    x0 = int(np.clip(np.floor(px.min()) - pad, 0, cam.width - 2))
    y0 = int(np.clip(np.floor(py.min()) - pad, 0, cam.height - 2))
    x1 = int(np.clip(np.ceil(px.max()) + pad, x0 + 2, cam.width))
    y1 = int(np.clip(np.ceil(py.max()) + pad, y0 + 2, cam.height))
    return (x0, y0, x1, y1)


@dataclass
class FrameSpec:
    """Everything needed to render and describe one GT frame."""

    index: int
    camera: sc.Camera
    audio: np.ndarray
    eye: float
    lip_box: tuple
    gset: sc.GaussianSet


def frame_specs(scn: SynthScenario, template=None):
    template = template or build_template(scn)
    audio = audio_track(scn)
    s_hat = driving_signal(scn, audio)
    blink = blink_track(scn)
    specs = []
    for n in range(scn.frames):
        cam = camera_for(scn, n)
        gset = deformed_template(template, scn, float(s_hat[n]),
                                 float(blink[n]))
        specs.append(FrameSpec(index=n, camera=cam, audio=audio[n],
                               eye=float(blink[n]),
                               lip_box=lip_box_for(gset, template.mouth_mask,
                                                   cam),
                               gset=gset))
    return template, specs


def render_frame(spec: FrameSpec, background):
    """One GT image via the reference compositor."""
    return ra.composite_reference(ra.project(spec.gset, spec.camera),
                                  background).image


# ---------------------------------------------------------------- manifest

@dataclass
class FrameRecord:
    index: int
    image_path: str
    split: str
    extrinsic: np.ndarray  # (4, 4)
    audio: np.ndarray
    eye: float
    lip_box: tuple


@dataclass
class DatasetManifest:
    name: str
    n_frames: int
    image_size: int
    audio_dim: int
    intrinsics: tuple  # fx, fy, cx, cy
    background_path: str
    regions: dict  # name -> (lo, hi) world AABB
    label_runs: list  # [(name, count), ...] template order
    records: list  # of FrameRecord
    points_path: str = ""  # optional rest-pose init point file

    @property
    def labels(self):
        return np.concatenate([[name] * count
                               for name, count in self.label_runs])


def _fmt(values):
    return " ".join(f"{float(v):.17g}" for v in np.asarray(values).ravel())


def split_of(index):
    return "test" if index % TRAIN_TEST_MODULUS == TRAIN_TEST_MODULUS - 1 \
        else "train"


def write_manifest(path, manifest: DatasetManifest):
    lines = [f"dataset-version {MANIFEST_VERSION}",
             f"name {manifest.name}",
             f"frames {manifest.n_frames}",
             f"image-size {manifest.image_size}",
             f"audio-dim {manifest.audio_dim}",
             "intrinsics " + _fmt(manifest.intrinsics),
             f"background {manifest.background_path}"]
    if manifest.points_path:
        lines.append(f"points {manifest.points_path}")
    for name, (lo, hi) in manifest.regions.items():
        lines.append(f"region {name} {_fmt(lo)} {_fmt(hi)}")
    lines.append("labels " + ",".join(f"{n}:{c}"
                                      for n, c in manifest.label_runs))
    for rec in manifest.records:
        lines += [f"frame {rec.index}",
                  f"image {rec.image_path}",
                  f"split {rec.split}",
                  "extrinsic " + _fmt(rec.extrinsic),
                  "audio " + _fmt(rec.audio),
                  f"eye {rec.eye:.17g}",
                  "lipbox " + " ".join(str(int(v)) for v in rec.lip_box),
                  "end"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    tokens_by_line = [line.split() for line in
                      path.read_text(encoding="utf-8").splitlines()
                      if line.strip()]
    head = {}
    regions = {}
    label_runs = []
    records = []
    current = None

    def fail(msg):
        prefix = f"frame {current['index']}: " if current else ""
        raise ValueError(f"{path}: {prefix}{msg}")

    for toks in tokens_by_line:
        key, args = toks[0], toks[1:]
        if key == "frame":
            if current is not None:
                fail("frame block not closed with 'end'")
            current = {"index": int(args[0])}
        elif current is not None:
            if key == "end":
                try:
                    records.append(FrameRecord(
                        index=current["index"],
                        image_path=current["image"],
                        split=current["split"],
                        extrinsic=current["extrinsic"],
                        audio=current["audio"],
                        eye=current["eye"],
                        lip_box=current["lipbox"]))
                except KeyError as exc:
                    fail(f"missing {exc.args[0]!r} statement")
                current = None
            elif key == "image":
                current["image"] = args[0]
            elif key == "split":
                if args[0] not in ("train", "test"):
                    fail(f"bad split {args[0]!r}")
                current["split"] = args[0]
            elif key == "extrinsic":
                if len(args) != 16:
                    fail(f"extrinsic has {len(args)} values, expected 16")
                current["extrinsic"] = np.array(
                    [float(v) for v in args]).reshape(4, 4)
            elif key == "audio":
                current["audio"] = np.array([float(v) for v in args])
            elif key == "eye":
                current["eye"] = float(args[0])
            elif key == "lipbox":
                current["lipbox"] = tuple(int(v) for v in args)
            else:
                fail(f"unknown statement {key!r}")
        elif key == "region":
            regions[args[0]] = (np.array([float(v) for v in args[1:4]]),
                                np.array([float(v) for v in args[4:7]]))
        elif key == "labels":
            for run in args[0].split(","):
                name, _, count = run.partition(":")
                label_runs.append((name, int(count)))
        else:
            head[key] = args
    if current is not None:
        raise ValueError(f"{path}: frame {current['index']}: unterminated block")
    try:
        version = int(head["dataset-version"][0])
        if version != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        manifest = DatasetManifest(
            name=head["name"][0],
            n_frames=int(head["frames"][0]),
            image_size=int(head["image-size"][0]),
            audio_dim=int(head["audio-dim"][0]),
            intrinsics=tuple(float(v) for v in head["intrinsics"]),
            background_path=head["background"][0],
            regions=regions,
            label_runs=label_runs,
            records=records,
            points_path=head.get("points", [""])[0] if head.get("points")
            else "",
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing header statement {exc.args[0]!r}")
    if len(records) != manifest.n_frames:
        raise ValueError(f"{path}: header declares {manifest.n_frames} frames "
                         f"but {len(records)} blocks follow")
    for i, rec in enumerate(records):
        if rec.index != i:
            raise ValueError(f"{path}: frame {rec.index}: out of order "
                             f"(expected {i})")
        if rec.audio.size != manifest.audio_dim:
            raise ValueError(f"{path}: frame {i}: audio has {rec.audio.size} "
                             f"dims, expected {manifest.audio_dim}")
    return manifest


# ---------------------------------------------------------------- dataset

@dataclass
class FrameSample:
    image: np.ndarray
    background: np.ndarray
    cond: df.ConditionFrame
    lip_box: tuple


class Dataset:
    """Lazy frame access over a generated dataset directory."""

    def __init__(self, manifest: DatasetManifest, root):
        self.manifest = manifest
        self.root = Path(root)
        self.audio_dim = manifest.audio_dim
        self.image_size = manifest.image_size
        self.points_path = (self.root / manifest.points_path
                            if manifest.points_path else None)
        self.train_indices = [r.index for r in manifest.records
                              if r.split == "train"]
        self.test_indices = [r.index for r in manifest.records
                             if r.split == "test"]
        bg_path = self.root / manifest.background_path
        if not bg_path.exists():
            raise ValueError(f"missing background image: {bg_path}")
        self.background = io.read_png(bg_path)

    def __len__(self):
        return self.manifest.n_frames

    def camera(self, i) -> sc.Camera:
        rec = self.manifest.records[i]
        fx, fy, cx, cy = self.manifest.intrinsics
        return sc.Camera(extrinsic=rec.extrinsic, fx=fx, fy=fy, cx=cx, cy=cy,
                         width=self.image_size, height=self.image_size)

    def frame(self, i) -> FrameSample:
        rec = self.manifest.records[i]
        path = self.root / rec.image_path
        if not path.exists():
            raise ValueError(f"frame {i}: missing image {path}")
        image = io.read_png(path)
        cond = df.ConditionFrame(audio=rec.audio, eye=rec.eye,
                                 camera=self.camera(i))
        return FrameSample(image=image, background=self.background, cond=cond,
                           lip_box=rec.lip_box)

    def __iter__(self):
        return (self.frame(i) for i in range(len(self)))

    def iter_split(self, split):
        if split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {split!r}")
        indices = self.train_indices if split == "train" else self.test_indices
        return (self.frame(i) for i in indices)


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValueError(f"no manifest at {manifest_path}")
    return Dataset(parse_manifest(manifest_path), manifest_path.parent)


# --------------------------------------------------------------- generate

def generate(scn: SynthScenario, out_dir, threads=None) -> DatasetManifest:
    """Render and write the full dataset; byte-deterministic per scenario."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "backgrounds").mkdir(parents=True, exist_ok=True)
    template, specs = frame_specs(scn)
    background = make_background(scn)
    io.write_png(out_dir / "backgrounds" / "background.png", background)
    (out_dir / "points.txt").write_text(
        "\n".join(_fmt(p) for p in template.gset.positions) + "\n",
        encoding="utf-8")

    def render_and_write(spec):
        image = render_frame(spec, background)
        io.write_png(out_dir / "images" / f"frame_{spec.index:04d}.png",
                     image)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(render_and_write, specs))

    runs = []
    for label in ("head", "mouth", "eye_left", "eye_right"):
        count = int((template.labels == label).sum())
        if count:
            runs.append((label, count))
    records = [FrameRecord(index=s.index,
                           image_path=f"images/frame_{s.index:04d}.png",
                           split=split_of(s.index),
                           extrinsic=s.camera.extrinsic,
                           audio=s.audio, eye=s.eye, lip_box=s.lip_box)
               for s in specs]
    manifest = DatasetManifest(
        name=scn.name, n_frames=scn.frames, image_size=scn.image_size,
        audio_dim=scn.audio_dim, intrinsics=scn.intrinsics(),
        background_path="backgrounds/background.png",
        regions=region_boxes(template, scn), label_runs=runs,
        records=records, points_path="points.txt")
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    return parse_manifest(out_dir / MANIFEST_NAME)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
