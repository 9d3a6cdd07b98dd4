"""Synthetic encoder/decoder "2D vision operators" with per-view inconsistency.

Each operator maps an image to a feature map (the encoder half) and a feature
map back to an output (the decoder half). The encoder corrupts its output
with a view-dependent perturbation drawn from the view seed, which is what
makes per-view predictions disagree across views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import Rng, derive_stream

PALETTE = np.array([
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
    [0.85, 0.2, 0.2],
    [0.2, 0.75, 0.25],
    [0.2, 0.3, 0.85],
    [0.9, 0.85, 0.2],
    [0.2, 0.8, 0.85],
    [0.8, 0.3, 0.8],
])
TEMPERATURE = 0.1
MAX_CONDITION = 50.0


def _orthonormal_rows(n_rows: int, n_cols: int, seed: int) -> np.ndarray:
    g = Rng(seed, derive_stream(0xE3B)).normal(n_rows * n_cols).reshape(n_cols, n_rows)
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def _check_conditioning(M: np.ndarray, name: str) -> float:
    s = np.linalg.svd(M, compute_uv=False)
    kappa = float(s[0] / s[-1])
    if kappa >= MAX_CONDITION:
        raise ValueError(f"{name}: embedding condition number {kappa:.1f} exceeds {MAX_CONDITION}")
    return kappa


def hue_rotation(theta: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis by ``theta`` radians."""
    k = np.ones(3) / np.sqrt(3)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def soft_assign(image: np.ndarray, palette: np.ndarray, temperature: float = TEMPERATURE) -> np.ndarray:
    d = np.linalg.norm(image[..., None, :] - palette, axis=-1)
    z = -d / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _simplex_palette_blend(weights: np.ndarray, palette: np.ndarray) -> np.ndarray:
    w = np.maximum(weights, 0.0)
    s = w.sum(axis=-1, keepdims=True)
    w = np.where(s > 0, w / np.where(s > 0, s, 1.0), 0.0)
    return w @ palette


def adapt_dim(feature: np.ndarray, D: int) -> np.ndarray:
    """Zero-pad or truncate the trailing channel axis to D."""
    Dp = feature.shape[-1]
    if Dp == D:
        return feature
    if Dp > D:
        return feature[..., :D].copy()
    pad = np.zeros(feature.shape[:-1] + (D - Dp,), dtype=feature.dtype)
    return np.concatenate([feature, pad], axis=-1)


@dataclass
class ColorQuant:
    """Soft palette assignment lifted to 32 channels; hue jitter plus additive noise."""

    noise_sigma: float = 0.05
    hue_range: float = 0.3
    temperature: float = TEMPERATURE
    operator_id: str = "colorquant"
    feat_dim: int = 32
    output_kind: str = "rgb"

    def __post_init__(self):
        self.embedding = _orthonormal_rows(8, 32, seed=101)
        self.kappa = _check_conditioning(self.embedding, self.operator_id)
        self.unembed = np.linalg.pinv(self.embedding)

    @property
    def inconsistency_kind(self) -> str:
        return "hue_jitter" if self.hue_range > 0 else "additive_noise"

    def view_theta(self, view_seed: int) -> float:
        u = Rng(view_seed, derive_stream(0x4E, 1)).uniform(1)[0]
        return float(self.hue_range * (2 * u - 1))

    def clean_features(self, image: np.ndarray, theta: float = 0.0) -> np.ndarray:
        pal = PALETTE @ hue_rotation(theta).T
        return soft_assign(np.asarray(image, dtype=np.float64), pal, self.temperature) @ self.embedding

    def noise(self, shape, view_seed: int) -> np.ndarray:
        if self.noise_sigma == 0:
            return np.zeros(shape)
        return self.noise_sigma * Rng(view_seed, derive_stream(0x4E, 2)).normal(int(np.prod(shape))).reshape(shape)

    def encode(self, image, view_seed: int, labels=None) -> np.ndarray:
        f = self.clean_features(image, self.view_theta(view_seed))
        return (f + self.noise(f.shape, view_seed)).astype(np.float32)

    def decode(self, feature) -> np.ndarray:
        w = np.asarray(feature, dtype=np.float64)[..., :32] @ self.unembed
        return _simplex_palette_blend(w, PALETTE)


@dataclass
class GradFeat:
    """Second training operator: 16 local-gradient channels then 16 colorquant channels."""

    noise_sigma: float = 0.05
    hue_range: float = 0.3
    operator_id: str = "gradfeat"
    feat_dim: int = 32
    output_kind: str = "rgb"

    def __post_init__(self):
        self.cq = ColorQuant(noise_sigma=0.0, hue_range=self.hue_range)
        self.lift = _orthonormal_rows(9, 16, seed=202)
        self.sub_embed = self.cq.embedding[:, :16]
        self.kappa = _check_conditioning(self.sub_embed, self.operator_id)
        self.unembed = np.linalg.pinv(self.sub_embed)

    inconsistency_kind = "hue_jitter"

    @staticmethod
    def local_gradients(image: np.ndarray) -> np.ndarray:
        p = np.pad(np.asarray(image, dtype=np.float64), ((1, 1), (1, 1), (0, 0)), mode="reflect")
        gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2
        gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2
        mean = sum(p[i:i + image.shape[0], j:j + image.shape[1]] for i in range(3) for j in range(3)) / 9
        return np.concatenate([gx, gy, mean], axis=-1)

    def encode(self, image, view_seed: int, labels=None) -> np.ndarray:
        g = self.local_gradients(image) @ self.lift
        c = self.cq.clean_features(image, self.cq.view_theta(view_seed))[..., :16]
        f = np.concatenate([g, c], axis=-1)
        if self.noise_sigma > 0:
            f = f + self.noise_sigma * Rng(view_seed, derive_stream(0x6F, 2)).normal(f.size).reshape(f.shape)
        return f.astype(np.float32)

    def decode(self, feature) -> np.ndarray:
        w = np.asarray(feature, dtype=np.float64)[..., 16:32] @ self.unembed
        return _simplex_palette_blend(w, PALETTE)


def label_boundary_band(labels: np.ndarray, radius: int = 2) -> np.ndarray:
    """Pixels within ``radius`` (Chebyshev) of a pixel carrying another label."""
    H, W = labels.shape
    p = np.pad(labels, radius, mode="edge")
    band = np.zeros((H, W), dtype=bool)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            band |= p[dy:dy + H, dx:dx + W] != labels
    return band


@dataclass
class LabelPaint:
    """One-hot label map lifted to 24 channels; labels flip near boundaries per view."""

    flip_prob: float | None = None  # None: drawn per view in [0.05, 0.2]
    operator_id: str = "labelpaint"
    feat_dim: int = 24
    output_kind: str = "labels"
    n_labels: int = 8
    inconsistency_kind = "boundary_flip"

    def __post_init__(self):
        self.embedding = _orthonormal_rows(self.n_labels, 24, seed=303)
        self.kappa = _check_conditioning(self.embedding, self.operator_id)

    def view_flip_prob(self, view_seed: int) -> float:
        if self.flip_prob is not None:
            return float(self.flip_prob)
        return float(0.05 + 0.15 * Rng(view_seed, derive_stream(0x1A, 1)).uniform(1)[0])

    def corrupt_labels(self, labels: np.ndarray, view_seed: int) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        H, W = labels.shape
        band = label_boundary_band(labels)
        rng = Rng(view_seed, derive_stream(0x1A, 2))
        flip = band & (rng.uniform(H * W).reshape(H, W) < self.view_flip_prob(view_seed))
        pick = rng.uniform(H * W).reshape(H, W)
        out = labels.copy()
        p = np.pad(labels, 2, mode="edge")
        # candidate replacement labels: the distinct other labels of the 5x5 window
        window = np.stack([p[dy:dy + H, dx:dx + W] for dy in range(5) for dx in range(5)], axis=-1)
        other = window != labels[..., None]
        n_other = other.sum(axis=-1)
        k = np.minimum((pick * np.maximum(n_other, 1)).astype(np.int64), np.maximum(n_other - 1, 0))
        order = np.argsort(~other, axis=-1, kind="stable")
        repl = np.take_along_axis(window, np.take_along_axis(order, k[..., None], axis=-1), axis=-1)[..., 0]
        sel = flip & (n_other > 0)
        out[sel] = repl[sel]
        return out

    def encode(self, image, view_seed: int, labels=None) -> np.ndarray:
        if labels is None:
            raise ValueError("labelpaint needs the label map")
        lab = self.corrupt_labels(labels, view_seed)
        return self.embedding[lab].astype(np.float32)

    def decode(self, feature) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)[..., :24]
        d = ((f[..., None, :] - self.embedding) ** 2).sum(axis=-1)
        return np.argmin(d, axis=-1)


TONE_GAMMA = np.array([0.7, 1.0, 1.4])


@dataclass
class StyleLite:
    """Colorquant features plus 8 redundant channels (40 total); tone-curved decode."""

    noise_sigma: float = 0.05
    hue_range: float = 0.3
    operator_id: str = "stylelite"
    feat_dim: int = 40
    output_kind: str = "rgb"
    inconsistency_kind = "hue_jitter"

    def __post_init__(self):
        self.cq = ColorQuant(noise_sigma=self.noise_sigma, hue_range=self.hue_range)
        self.kappa = self.cq.kappa

    def encode(self, image, view_seed: int, labels=None) -> np.ndarray:
        f = self.cq.clean_features(image, self.cq.view_theta(derive_stream(view_seed, 0x57)))
        f = f + self.cq.noise(f.shape, derive_stream(view_seed, 0x57))
        return np.concatenate([f, f[..., :8]], axis=-1).astype(np.float32)

    def decode(self, feature) -> np.ndarray:
        rgb = self.cq.decode(np.asarray(feature)[..., :32])
        return np.clip(rgb, 0.0, 1.0) ** TONE_GAMMA


OPERATORS = {
    "colorquant": ColorQuant,
    "gradfeat": GradFeat,
    "labelpaint": LabelPaint,
    "stylelite": StyleLite,
}
TRAINING_OPERATORS = ("colorquant", "gradfeat")
HELD_OUT_OPERATORS = ("labelpaint", "stylelite")


def get_operator(operator_id: str, **overrides):
    try:
        cls = OPERATORS[operator_id]
    except KeyError:
        raise KeyError(f"unknown operator {operator_id!r}; known: {sorted(OPERATORS)}") from None
    return cls(**overrides)


def view_seed(scene_seed: int, view_index: int, operator_id: str) -> int:
    return derive_stream(scene_seed, view_index, sum(ord(c) << (8 * (i % 7)) for i, c in enumerate(operator_id)))


def encode_views(operator, data, seeds=None) -> np.ndarray:
    """Encode every view of a scene independently (the per-view 2D pipeline)."""
    op = get_operator(operator) if isinstance(operator, str) else operator
    out = []
    for i in range(data.n_views):
        s = view_seed(data.seed, i, op.operator_id) if seeds is None else seeds[i]
        out.append(op.encode(data.rgb[i], s, labels=data.labels[i]))
    return np.stack(out)


def to_metric_space(op, decoded: np.ndarray) -> np.ndarray:
    """Float map used by the consistency metric: rgb as-is, labels one-hot."""
    if op.output_kind == "labels":
        return np.eye(op.n_labels)[decoded]
    return decoded
