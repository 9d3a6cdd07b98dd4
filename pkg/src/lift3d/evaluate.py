"""Metrics and evaluation protocols shared by the lifted and per-view 2D pipelines.

Every comparison between the two pipelines goes through the same functions
here: the 2D baseline only differs in where its per-view maps come from.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ParamStore
from .operators import adapt_dim, encode_views, get_operator, to_metric_space
from .renderer import FEAT_DIM, RenderConfig, SourceViews, render_view
from .scenes import BACKGROUND, SceneData, warp

log = logging.getLogger(__name__)

ACC_THRESHOLD = 0.5
MIN_WARP_FRACTION = 0.05
PSNR_CAP = 99.0


class VoidRender(ValueError):
    """Raised when no pixel of a render is opaque enough to be scored."""


# --------------------------------------------------------------------------
# pointwise metrics


def feature_mse(pred, gt, acc=None, threshold: float = ACC_THRESHOLD) -> float:
    """Mean squared feature error over pixels with accumulated weight above threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"feature_mse: shapes {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape[:-1], dtype=bool) if acc is None else np.asarray(acc) > threshold
    if not mask.any():
        raise VoidRender("void render")
    d = pred[mask] - gt[mask]
    return float(np.mean(d * d))


def psnr(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    d = (pred - gt) ** 2
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    mse = float(d.mean())
    if mse <= 0:
        return PSNR_CAP
    return float(min(10 * np.log10(1.0 / mse), PSNR_CAP))


def iou(pred, gt, label: int) -> float:
    p = np.asarray(pred) == label
    g = np.asarray(gt) == label
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mean_iou(pred, gt, labels=None) -> float:
    """Mean IoU over ``labels`` (default: every label present in either map)."""
    if labels is None:
        labels = np.union1d(np.unique(pred), np.unique(gt))
    return float(np.mean([iou(pred, gt, int(k)) for k in labels]))


def masked_rmse(a, b, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    d = np.asarray(a, dtype=np.float64)[mask] - np.asarray(b, dtype=np.float64)[mask]
    return float(np.sqrt(np.mean(d * d)))


# --------------------------------------------------------------------------
# consistency


def warp_consistency(map_a, map_b, cam_a, cam_b, depth_a, depth_b, nearest: bool = False,
                     min_fraction: float = MIN_WARP_FRACTION):
    """RMSE between view b's map and view a's map warped into b, over the valid mask.

    Returns None (and logs) when fewer than ``min_fraction`` of b's pixels are valid.
    """
    warped, mask = warp(np.asarray(map_a, dtype=np.float64), cam_a, cam_b, depth_a, depth_b, nearest=nearest)
    if mask.mean() < min_fraction:
        log.info("warp pair skipped: valid mask covers %.1f%% of pixels", 100 * mask.mean())
        return None
    return masked_rmse(warped, map_b, mask)


def view_pairs(n_views: int) -> dict[str, list[tuple[int, int]]]:
    """Short range: adjacent rig views. Long range: the two ends of the rig."""
    return {"short": [(i, i + 1) for i in range(n_views - 1)], "long": [(0, n_views - 1)]}


def consistency(maps, data: SceneData, nearest: bool = False, views=None) -> dict[str, float]:
    """Mean warped RMSE for short- and long-range pairs of per-view maps (metric space).

    ``maps[i]`` belongs to rig view ``views[i]`` (default: all views in order).
    Both warp directions of each pair are scored.
    """
    views = list(range(data.n_views)) if views is None else list(views)
    pos = {v: i for i, v in enumerate(views)}
    out = {}
    for kind, pairs in view_pairs(len(views)).items():
        vals = []
        for i, j in pairs:
            a, b = views[i], views[j]
            for s, t in ((a, b), (b, a)):
                r = warp_consistency(maps[pos[s]], maps[pos[t]], data.cameras[s], data.cameras[t], data.depth[s],
                                     data.depth[t], nearest=nearest)
                if r is not None:
                    vals.append(r)
        out[kind] = float(np.mean(vals)) if vals else float("nan")
    return out


# --------------------------------------------------------------------------
# PCA visualization


def pca_viz(feat) -> np.ndarray:
    """Top-3 principal components of the pixel features, each min-max scaled to [0, 1]."""
    feat = np.asarray(feat, dtype=np.float64)
    H, W, D = feat.shape
    if H * W < 3:
        raise ValueError("pca_viz needs at least 3 pixels")
    X = feat.reshape(-1, D)
    X = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
    rank = int((s > tol).sum())
    out = np.zeros((H * W, 3))
    for c in range(min(3, rank)):
        p = X @ vt[c]
        lo, hi = p.min(), p.max()
        out[:, c] = (p - lo) / (hi - lo) if hi > lo else 0.0
    return out.reshape(H, W, 3)


# --------------------------------------------------------------------------
# lifting a scene


def nearest_sources(data: SceneData, target: int, n: int) -> np.ndarray:
    c = data.centers()
    d = np.linalg.norm(c - c[target], axis=1)
    order = np.argsort(d, kind="stable")
    return np.sort(order[order != target][:n])


def operator_features(data: SceneData, operator, D: int = FEAT_DIM) -> np.ndarray:
    """Per-view encodings (cached ones when present), adapted to D channels."""
    op = get_operator(operator) if isinstance(operator, str) else operator
    feats = data.features.get(op.operator_id) if isinstance(operator, str) else None
    if feats is None:
        feats = encode_views(op, data)
    return adapt_dim(np.asarray(feats, dtype=np.float32), D)


def decode_map(op, feat, acc=None) -> np.ndarray:
    """Decode a feature map with the operator's own decoder, in its metric space.

    Label outputs are background wherever the render is transparent.
    """
    feat = np.asarray(feat)
    Dp = op.feat_dim
    # undo the width adaptation: truncated channels come back as zeros
    full = adapt_dim(feat, Dp) if feat.shape[-1] != Dp else feat
    out = op.decode(full)
    if op.output_kind == "labels" and acc is not None:
        out = np.where(np.asarray(acc) > ACC_THRESHOLD, out, BACKGROUND)
    return out


def lift_views(data: SceneData, store: ParamStore, operator, targets=None, n_sources: int = 8,
               config: RenderConfig | None = None, seed: int = 0, threads: int = 1, feats=None) -> list[dict]:
    """Render each target view from its nearest sources (target always excluded).

    Each result holds rgb, feat, acc, depth and the decoded operator output.
    """
    op = get_operator(operator) if isinstance(operator, str) else operator
    config = config or RenderConfig(n_coarse=16, n_fine=32, prune_eps=1e-4)
    D = store.values["pred.l2.b"].shape[0]
    if feats is None:
        feats = operator_features(data, operator, D)
    from .renderer import neighborhood_patches

    patches = neighborhood_patches(data.rgb)
    targets = range(data.n_views) if targets is None else targets
    out = []
    for t in targets:
        src_idx = nearest_sources(data, t, n_sources)
        src = SourceViews([data.cameras[i] for i in src_idx], data.rgb[src_idx], feats[src_idx], patches[src_idx])
        r = render_view(data.cameras[t], src, store, config, data.near, data.far, seed=seed, threads=threads)
        r["target"] = int(t)
        r["sources"] = src_idx
        if "feat" in r:
            r["decoded"] = decode_map(op, r["feat"], r["acc"])
        out.append(r)
    return out


def baseline_2d(data: SceneData, operator, views=None) -> list[np.ndarray]:
    """Per-view decoded outputs of the operator applied independently to each image."""
    op = get_operator(operator) if isinstance(operator, str) else operator
    feats = data.features.get(op.operator_id) if isinstance(operator, str) else None
    if feats is None:
        feats = encode_views(op, data)
    views = range(data.n_views) if views is None else views
    return [op.decode(feats[v]) for v in views]


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    operator_id: str
    mode: str
    n_views: int
    per_scene: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        keys = [k for k in self.per_scene[0] if k != "scene_id"] if self.per_scene else []
        agg = {}
        for k in keys:
            vals = [s[k] for s in self.per_scene if s.get(k) is not None]
            if vals and all(isinstance(v, (int, float)) for v in vals):
                agg[k] = float(np.mean(vals))
        return agg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def evaluate_scene(data: SceneData, store: ParamStore, operator, mode: str = "full", n_sources: int = 8,
                   targets=None, config: RenderConfig | None = None, baseline: bool = True, seed: int = 0,
                   threads: int = 1, lifted=None) -> dict:
    """All metrics for one scene and operator; the 2D baseline runs through the same code."""
    op = get_operator(operator) if isinstance(operator, str) else operator
    if config is None:
        config = RenderConfig(n_coarse=16, n_fine=32, prune_eps=1e-4, mode=mode)
    D = store.values["pred.l2.b"].shape[0]
    feats = operator_features(data, operator, D)
    targets = list(range(data.n_views)) if targets is None else list(targets)
    if lifted is None:
        lifted = lift_views(data, store, op, targets, n_sources, config, seed, threads, feats)
    nearest = op.output_kind == "labels"
    row = {"scene_id": data.scene_id}
    row["feature_mse"] = float(np.mean([feature_mse(r["feat"], feats[r["target"]], r["acc"]) for r in lifted]))
    row["psnr"] = float(np.mean([psnr(r["rgb"], data.rgb[r["target"]]) for r in lifted]))
    lifted_maps = [to_metric_space(op, r["decoded"]) for r in lifted]
    if len(targets) >= 2:
        c3 = consistency(lifted_maps, data, nearest=nearest, views=targets)
        row["warped_rmse_3d_short"], row["warped_rmse_3d_long"] = c3["short"], c3["long"]
    if op.output_kind == "labels":
        row["iou_3d"] = float(np.mean([mean_iou(r["decoded"], data.labels[r["target"]]) for r in lifted]))
    if baseline:
        base = baseline_2d(data, op, targets)
        if len(targets) >= 2:
            c2 = consistency([to_metric_space(op, b) for b in base], data, nearest=nearest, views=targets)
            row["warped_rmse_2d_short"], row["warped_rmse_2d_long"] = c2["short"], c2["long"]
        if op.output_kind == "labels":
            row["iou_2d"] = float(np.mean([mean_iou(b, data.labels[t]) for b, t in zip(base, targets)]))
    return row


def views_sweep(data: SceneData, store: ParamStore, operator="labelpaint", counts=(3, 6, 10), targets=None,
                config: RenderConfig | None = None, seed: int = 0, threads: int = 1) -> dict:
    """Lifted label IoU when restricting the sources to the n nearest views."""
    op = get_operator(operator) if isinstance(operator, str) else operator
    targets = list(range(data.n_views)) if targets is None else list(targets)
    rep = {"counts": list(counts), "iou_3d": [], "iou_2d": None}
    for n in counts:
        lifted = lift_views(data, store, op, targets, n, config, seed, threads)
        rep["iou_3d"].append(float(np.mean([mean_iou(r["decoded"], data.labels[r["target"]]) for r in lifted])))
    base = baseline_2d(data, op, targets)
    rep["iou_2d"] = float(np.mean([mean_iou(b, data.labels[t]) for b, t in zip(base, targets)]))
    rep["monotone"] = bool(all(a <= b for a, b in zip(rep["iou_3d"], rep["iou_3d"][1:])))
    return rep
