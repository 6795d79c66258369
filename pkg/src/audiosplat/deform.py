"""Audio-conditioned deformation of the canonical head.

Per frame, four condition tokens (audio, eye blink, viewpoint, a shared
learned null token) are built from the driving signals. Per-Gaussian features
query the tokens through a stack of cross-attention + feed-forward layers
(both with skip connections), and five zero-initialized linear heads regress
additive offsets for every Gaussian attribute.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import scene as sc

MODEL_DIM = 64
N_HEADS = 4
HEAD_DIM = 16
FFN_DIM = 128
N_TOKENS = 4
EYE_FREQS = 2.0 ** np.arange(8)  # sinusoidal encoding frequencies 2^0 .. 2^7
TOKEN_NAMES = ("audio", "eye", "view", "null")


@dataclass
class ConditionFrame:
    """Driving signals for one frame: audio vector, blink scalar, camera."""
    audio: np.ndarray
    eye: float
    camera: sc.Camera

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.audio)):
            raise ValueError("non-finite audio feature vector")
        self.eye = float(self.eye)
        if not 0.0 <= self.eye <= 1.0:
            raise ValueError(f"eye scalar {self.eye} outside [0, 1]")


@dataclass
class ConditionTokens:
    """The four embedded tokens, stacked as a 4×d tensor (audio, eye, view, null)."""
    stacked: ad.Tensor


@dataclass
class DeformationOffsets:
    """Additive per-Gaussian attribute offsets (tensors, shapes match the set)."""
    d_pos: ad.Tensor
    d_rot: ad.Tensor
    d_logs: ad.Tensor
    d_sh: ad.Tensor
    d_logit: ad.Tensor


def eye_encoding(e_raw):
    """Sinusoidal features of the blink scalar: (1, 16)."""
    x = EYE_FREQS * e_raw
    return np.concatenate([np.sin(x), np.cos(x)])[None, :]


class AttentionStack:
    """Token builders + L cross-attention layers + offset heads."""

    def __init__(self, feature_dim, audio_dim=32, n_layers=2, sh_degree=1,
                 dim=MODEL_DIM, n_heads=N_HEADS, head_dim=HEAD_DIM,
                 ffn_dim=FFN_DIM, seed=0):
        if n_layers < 1:
            raise ValueError("attention stack needs at least one layer")
        self.feature_dim = feature_dim
        self.audio_dim = audio_dim
        self.n_layers = n_layers
        self.sh_degree = sh_degree
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        rng = np.random.default_rng(seed)

        def param(name, shape, std=None):
            std = std if std is not None else 1.0 / np.sqrt(shape[0])
            return ad.Tensor(rng.normal(0.0, std, shape), trainable=True, name=name)

        def bias(name, width):
            return ad.Tensor(np.zeros((1, width)), trainable=True, name=name)

        d = dim
        self.params = {
            "z_proj_w": param("z_proj_w", (feature_dim, d)),
            "z_proj_b": bias("z_proj_b", d),
            "audio_w": param("audio_w", (audio_dim, d)),
            "audio_b": bias("audio_b", d),
            "eye_w": param("eye_w", (16, d)),
            "eye_b": bias("eye_b", d),
            "view_w1": param("view_w1", (12, d)),
            "view_b1": bias("view_b1", d),
            "view_w2": param("view_w2", (d, d)),
            "view_b2": bias("view_b2", d),
            "null_token": ad.Tensor(rng.normal(0.0, 0.02, (1, d)),
                                    trainable=True, name="null_token"),
        }
        inner = n_heads * head_dim
        for l in range(n_layers):
            for side in ("q", "k", "v"):
                self.params[f"L{l}_w{side}"] = param(f"L{l}_w{side}", (d, inner))
                self.params[f"L{l}_b{side}"] = bias(f"L{l}_b{side}", inner)
            self.params[f"L{l}_wo"] = param(f"L{l}_wo", (inner, d))
            self.params[f"L{l}_bo"] = bias(f"L{l}_bo", d)
            self.params[f"L{l}_ffn_w1"] = param(f"L{l}_ffn_w1", (d, ffn_dim))
            self.params[f"L{l}_ffn_b1"] = bias(f"L{l}_ffn_b1", ffn_dim)
            self.params[f"L{l}_ffn_w2"] = param(f"L{l}_ffn_w2", (ffn_dim, d))
            self.params[f"L{l}_ffn_b2"] = bias(f"L{l}_ffn_b2", d)
        n_sh = 3 * sc.sh_coeff_count(sh_degree)
        for name, width in (("pos", 3), ("rot", 4), ("logs", 3),
                            ("sh", n_sh), ("logit", 1)):
            # zero init: the untrained model deforms nothing
            self.params[f"off_{name}_w"] = ad.Tensor(np.zeros((d, width)),
                                                     trainable=True,
                                                     name=f"off_{name}_w")
            self.params[f"off_{name}_b"] = bias(f"off_{name}_b", width)

    def parameters(self):
        return dict(self.params)


def encode_conditions(stack: AttentionStack, frame: ConditionFrame) -> ConditionTokens:
    """Embed the frame's driving signals into the four condition tokens."""
    p = stack.params
    if frame.audio.shape[0] != stack.audio_dim:
        raise ValueError(f"audio dim {frame.audio.shape[0]} != {stack.audio_dim}")
    audio_in = ad.Tensor(frame.audio[None, :].astype(np.float64))
    eye_in = ad.Tensor(eye_encoding(frame.eye))
    view_in = ad.Tensor(frame.camera.extrinsic[:3, :4].reshape(1, 12).astype(np.float64))
    audio_tok = ad.linear(audio_in, p["audio_w"], p["audio_b"])
    eye_tok = ad.linear(eye_in, p["eye_w"], p["eye_b"])
    view_h = ad.relu(ad.linear(view_in, p["view_w1"], p["view_b1"]))
    view_tok = ad.linear(view_h, p["view_w2"], p["view_b2"])
    stacked = ad.concat([audio_tok, eye_tok, view_tok, p["null_token"]], axis=0)
    return ConditionTokens(stacked=stacked)


def project_features(stack: AttentionStack, features: ad.Tensor) -> ad.Tensor:
    """Linear map of triplane features into the attention model dim."""
    return ad.linear(features, stack.params["z_proj_w"], stack.params["z_proj_b"])


def attend(stack: AttentionStack, z0: ad.Tensor, tokens: ConditionTokens):
    """Run the cross-attention stack.

    Returns (z_L, scores): the refined N×d features and the per-layer
    attention weights as float arrays of shape (N, n_heads, 4).
    """
    if z0.data.shape[1] != stack.dim:
        raise ValueError(f"z0 dim {z0.data.shape[1]} != model dim {stack.dim}")
    p = stack.params
    z = z0
    all_scores = []
    inv_sqrt_dk = 1.0 / np.sqrt(stack.head_dim)
    for l in range(stack.n_layers):
        q = ad.linear(z, p[f"L{l}_wq"], p[f"L{l}_bq"])
        k = ad.linear(tokens.stacked, p[f"L{l}_wk"], p[f"L{l}_bk"])
        v = ad.linear(tokens.stacked, p[f"L{l}_wv"], p[f"L{l}_bv"])
        head_outs = []
        layer_scores = []
        for h in range(stack.n_heads):
            cols = slice(h * stack.head_dim, (h + 1) * stack.head_dim)
            qh = ad.take(q, (slice(None), cols))
            kh = ad.take(k, (slice(None), cols))
            vh = ad.take(v, (slice(None), cols))
            logits = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_dk)
            weights = ad.softmax(logits)            # (N, 4)
            layer_scores.append(weights.data.copy())
            head_outs.append(ad.matmul(weights, vh))
        attn = ad.linear(ad.concat(head_outs, axis=1), p[f"L{l}_wo"], p[f"L{l}_bo"])
        z = ad.add(z, attn)                          # skip connection
        ffn = ad.linear(ad.relu(ad.linear(z, p[f"L{l}_ffn_w1"], p[f"L{l}_ffn_b1"])),
                        p[f"L{l}_ffn_w2"], p[f"L{l}_ffn_b2"])
        z = ad.add(z, ffn)                           # skip connection
        all_scores.append(np.stack(layer_scores, axis=1))  # (N, heads, 4)
    return z, all_scores


def predict_offsets(stack: AttentionStack, z_l: ad.Tensor) -> DeformationOffsets:
    """Regress the five per-Gaussian attribute offsets from attended features."""
    p = stack.params
    return DeformationOffsets(
        d_pos=ad.linear(z_l, p["off_pos_w"], p["off_pos_b"]),
        d_rot=ad.linear(z_l, p["off_rot_w"], p["off_rot_b"]),
        d_logs=ad.linear(z_l, p["off_logs_w"], p["off_logs_b"]),
        d_sh=ad.linear(z_l, p["off_sh_w"], p["off_sh_b"]),
        d_logit=ad.linear(z_l, p["off_logit_w"], p["off_logit_b"]),
    )


def deform(g_can: sc.GaussianSet, off: DeformationOffsets) -> sc.GaussianSet:
    """Apply additive offsets to a canonical set (plain-array path)."""
    rot = g_can.rotations + off.d_rot.data
    out = sc.GaussianSet(
        positions=g_can.positions + off.d_pos.data,
        rotations=sc.normalize_quaternions(rot, tol=np.inf),
        log_scales=g_can.log_scales + off.d_logs.data,
        sh_coeffs=g_can.sh_coeffs + off.d_sh.data,
        opacity_logits=g_can.opacity_logits + off.d_logit.data,
        sh_degree=g_can.sh_degree,
    )
    for name in ("positions", "rotations", "log_scales", "sh_coeffs",
                 "opacity_logits"):
        if not np.all(np.isfinite(getattr(out, name))):
            raise FloatingPointError(f"deform produced non-finite {name}")
    return out


# fixed five-stop colormap (dark blue -> cyan -> green -> yellow -> red)
_CMAP_STOPS = np.array([
    [0.05, 0.03, 0.35],
    [0.00, 0.60, 0.85],
    [0.10, 0.80, 0.25],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.05],
])


def colormap(values):
    """Map scalars in [0, 1] through the fixed 5-stop colormap to N×3 rgb."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * (len(_CMAP_STOPS) - 1)
    i = np.minimum(v.astype(np.int64), len(_CMAP_STOPS) - 2)
    f = (v - i)[:, None]
    return _CMAP_STOPS[i] * (1 - f) + _CMAP_STOPS[i + 1] * f


def attention_to_colors(scores, token, head_reduce="mean"):
    """Per-Gaussian rgb visualizing one token's attention weight.

    scores: (N, heads, 4) weights from one layer of attend. The per-Gaussian
    scalar (mean over heads) is min-max normalized over the frame, then mapped
    through the fixed colormap.
    """
    scores = np.asarray(scores)
    if not 0 <= token < scores.shape[2]:
        raise ValueError(f"token index {token} out of range")
    if head_reduce != "mean":
        raise ValueError(f"unsupported head reduction {head_reduce!r}")
    s = scores[:, :, token].mean(axis=1)
    lo, hi = s.min(), s.max()
    norm = (s - lo) / (hi - lo) if hi - lo > 1e-12 else np.full_like(s, 0.5)
    return colormap(norm)
