"""End-to-end training over a pool of synthetic scenes."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .geometry import rays_for_pixels
from .operators import TRAINING_OPERATORS, adapt_dim
from .renderer import FEAT_DIM, RenderConfig, SourceViews, init_params, render_rays
from .scenes import SceneData
from .tensorio import Rng, derive_stream

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_rays_per_step: int = 2048
    lr: float = 5e-4
    steps: int = 20000
    n_src_range: tuple[int, int] = (8, 12)
    k_range: tuple[int, int] = (1, 3)
    lr_final_frac: float = 0.1
    feat_weight: float | None = None  # None -> 1 / D
    feature_dim: int = FEAT_DIM
    operators: tuple[str, ...] = TRAINING_OPERATORS
    mode: str = "full"
    n_coarse: int = 64
    n_fine: int = 128
    fine_pass: str = "merged"
    fetch: str = "bilinear"
    blend_rgb: bool = False
    coarse_loss: bool = True
    feature_loss_mask: str = "foreground"  # or "all"
    prune_eps: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    threads: int = 1

    def render_config(self) -> RenderConfig:
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine, mode=self.mode, fine_pass=self.fine_pass,
                            fetch=self.fetch, blend_rgb=self.blend_rgb, perturb=True, prune_eps=self.prune_eps)

    @property
    def lambda_feat(self) -> float:
        return 1.0 / self.feature_dim if self.feat_weight is None else self.feat_weight

    def lr_at(self, step: int) -> float:
        """Cosine decay from lr to lr_final_frac * lr over ``steps``."""
        frac = min(step / max(self.steps, 1), 1.0)
        lo = self.lr * self.lr_final_frac
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_src_range"] = list(self.n_src_range)
        d["k_range"] = list(self.k_range)
        d["operators"] = list(self.operators)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("n_src_range", "k_range", "operators"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Batch:
    scene_index: int
    target: int
    sources: np.ndarray
    pixels: np.ndarray
    operator_id: str
    n_src: int
    k: int
    pool: np.ndarray = field(repr=False, default=None)


def nearest_views(data: SceneData, target: int, exclude_target: bool = True) -> np.ndarray:
    """View indices sorted by camera-center distance to ``target``."""
    c = data.centers()
    d = np.linalg.norm(c - c[target], axis=1)
    order = np.argsort(d, kind="stable")
    return order[order != target] if exclude_target else order


def sample_batch(scenes: list[SceneData], config: TrainConfig, rng: Rng) -> Batch:
    n_lo, n_hi = config.n_src_range
    k_lo, k_hi = config.k_range
    eligible = [i for i, s in enumerate(scenes) if s.n_views >= n_hi + 1]
    if len(eligible) < len(scenes):
        log.warning("skipping %d scene(s) with fewer than %d views", len(scenes) - len(eligible), n_hi + 1)
    if not eligible:
        raise ValueError(f"no scene has the {n_hi + 1} views needed for sampling")
    si = eligible[rng.integers(0, len(eligible))]
    data = scenes[si]
    target = rng.integers(0, data.n_views)
    n = rng.integers(n_lo, n_hi + 1)
    k = rng.integers(k_lo, k_hi + 1)
    pool = nearest_views(data, target)[: k * n]
    sources = pool[rng.permutation(len(pool))[:n]]
    H, W = data.rgb.shape[1:3]
    pixels = rng.integers(0, H * W, config.n_rays_per_step)
    op = config.operators[rng.integers(0, len(config.operators))]
    return Batch(si, target, np.sort(sources), pixels, op, n, k, pool)


def compute_loss(out, target_rgb, target_feat, fg_mask, lambda_feat: float, D: int, coarse_loss: bool = True,
                 feat_rays: float | None = None):
    """Fine + coarse rgb error (each x3) plus the weighted per-ray feature error.

    ``feat_rays`` overrides the number of masked rays the feature term is
    averaged over (used when a batch is split into shards).
    Returns (loss Var, rgb term, feature term) with the terms as floats.
    """
    rgb_t = target_rgb.astype(out.rgb.value.dtype)
    loss = ad.scale(ad.mse(out.rgb, rgb_t), 3.0)
    rgb_term = float(loss.value)
    if coarse_loss and out.coarse_rgb is not None:
        loss = ad.add(loss, ad.scale(ad.mse(out.coarse_rgb, rgb_t), 3.0))
    feat_term = 0.0
    if out.feat is not None and target_feat is not None:
        R = out.feat.shape[0]
        m = np.ones(R, dtype=bool) if fg_mask is None else np.asarray(fg_mask, dtype=bool)
        n = int(m.sum()) if feat_rays is None else feat_rays
        if m.any():
            mm = np.repeat(m[:, None], D, axis=1).astype(out.feat.value.dtype)
            gt = (target_feat * mm).astype(out.feat.value.dtype)
            # mean over (masked) rays of ||G^ - G||^2, times lambda
            fl = ad.scale(ad.mse(ad.mul(out.feat, mm), gt), lambda_feat * D * R / n)
            feat_term = float(fl.value) / lambda_feat
            loss = ad.add(loss, fl)
    return loss, rgb_term, feat_term


class ScenePool:
    """Training scenes plus per-scene caches (neighbourhood patches, adapted features)."""

    def __init__(self, scenes: list[SceneData], feature_dim: int = FEAT_DIM):
        self.scenes = scenes
        self.D = feature_dim
        self._patches = {}
        self._feats = {}

    def patches(self, si):
        if si not in self._patches:
            from .renderer import neighborhood_patches

            self._patches[si] = neighborhood_patches(self.scenes[si].rgb)
        return self._patches[si]

    def features(self, si, op):
        key = (si, op)
        if key not in self._feats:
            feats = self.scenes[si].features.get(op)
            if feats is None:
                from .operators import encode_views

                feats = encode_views(op, self.scenes[si])
            self._feats[key] = adapt_dim(np.asarray(feats, dtype=np.float32), self.D)
        return self._feats[key]

    def source_views(self, si, views, op=None, dtype=np.float32):
        data = self.scenes[si]
        return SourceViews([data.cameras[i] for i in views], data.rgb[views],
                           None if op is None else self.features(si, op)[views],
                           self.patches(si)[views].astype(dtype))


def train_step(store: ParamStore, pool: ScenePool, config: TrainConfig, step: int):
    """One optimizer step; returns (loss, rgb term, feature term)."""
    rng = Rng(config.seed, derive_stream(0x7A1, step))
    batch = sample_batch(pool.scenes, config, rng)
    data = pool.scenes[batch.scene_index]
    src = pool.source_views(batch.scene_index, batch.sources, batch.operator_id, store.dtype)
    cam = data.cameras[batch.target]
    H, W = data.rgb.shape[1:3]
    tgt_rgb = data.rgb[batch.target].reshape(-1, 3)[batch.pixels]
    tgt_feat = pool.features(batch.scene_index, batch.operator_id)[batch.target].reshape(H * W, -1)[batch.pixels]
    fg = None
    if config.feature_loss_mask == "foreground":
        fg = np.isfinite(data.depth[batch.target].reshape(-1)[batch.pixels])
    rcfg = config.render_config()
    keys = (np.uint64(step) << np.uint64(24)) + batch.pixels.astype(np.uint64)

    shards = np.array_split(np.arange(len(batch.pixels)), max(config.threads, 1))
    n_fg = len(batch.pixels) if fg is None else int(fg.sum())

    def run(ids):
        leaves = store.leaves()
        o, d = rays_for_pixels(cam, batch.pixels[ids])
        out = render_rays(leaves, src, o, d, data.near, data.far, rcfg, seed=config.seed, ray_keys=keys[ids])
        # shards are averaged: scale each shard's loss by its share of rays
        share = len(ids) / len(batch.pixels)
        loss, lr_, lf_ = compute_loss(out, tgt_rgb[ids], tgt_feat[ids], None if fg is None else fg[ids],
                                      config.lambda_feat, config.feature_dim, config.coarse_loss,
                                      feat_rays=n_fg * share)
        ad.backward(ad.scale(loss, share))
        return leaves, float(loss.value) * share, lr_ * share, lf_ * share

    if len(shards) == 1:
        results = [run(shards[0])]
    else:
        with ThreadPoolExecutor(len(shards)) as ex:
            results = list(ex.map(run, shards))
    store.zero_grad()
    for leaves, *_ in results:  # single-writer reduction, fixed order
        store.accumulate(leaves)
    total = sum(r[1] for r in results)
    if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in store.grads.values()):
        raise TrainingDiverged(f"non-finite loss at step {step}")
    adam_step(store, config.lr_at(step))
    return total, sum(r[2] for r in results), sum(r[3] for r in results)


def train(scenes: list[SceneData], config: TrainConfig, out_dir=None, store: ParamStore | None = None,
          progress=None) -> tuple[ParamStore, list[dict]]:
    """Train from scratch (or continue ``store``) until ``config.steps``.

    Writes a checkpoint every ``checkpoint_every`` steps and a metrics CSV
    (step, rgb_loss, feat_loss, lr) under ``out_dir`` when given.
    """
    if store is None:
        store = init_params(config.feature_dim, seed=config.seed, blend_rgb=config.blend_rgb)
    pool = ScenePool(scenes, config.feature_dim)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        if store.step_count == 0 or not metrics_path.exists():
            with metrics_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(["step", "rgb_loss", "feat_loss", "lr"])
    history = []
    pending = []
    for step in range(store.step_count, config.steps):
        lr = config.lr_at(step)
        try:
            loss, rgb_l, feat_l = train_step(store, pool, config, step)
        except TrainingDiverged:
            log.error("training diverged at step %d; last good checkpoint kept", step)
            raise
        row = {"step": step, "loss": loss, "rgb_loss": rgb_l, "feat_loss": feat_l, "lr": lr}
        history.append(row)
        pending.append(row)
        if progress is not None:
            progress(row)
        done = step + 1
        if metrics_path is not None and (done % config.log_every == 0 or done == config.steps):
            with metrics_path.open("a", newline="") as fh:
                w = csv.writer(fh)
                for r in pending:
                    w.writerow([r["step"], repr(r["rgb_loss"]), repr(r["feat_loss"]), repr(r["lr"])])
            pending = []
        if out_dir is not None and (done % config.checkpoint_every == 0 or done == config.steps):
            save_checkpoint(store, out_dir / "checkpoint", meta={"train_config": config.to_dict()})
    return store, history


def resume(out_dir) -> tuple[ParamStore, TrainConfig]:
    store, meta = load_checkpoint(Path(out_dir) / "checkpoint")
    return store, TrainConfig.from_dict(meta["train_config"])


def noise_cancellation_probe(store: ParamStore, data: SceneData, sigmas=(0.05, 0.1, 0.2), targets=None,
                             n_sources: int = 8, config=None, seed: int = 0) -> list[dict]:
    """Rendered-feature error vs single noisy view error, against the clean encoding.

    Uses colorquant without hue jitter so the only inconsistency is additive
    noise of scale sigma. For each target: the rendered error is measured on
    pixels with accumulated weight > 0.5; the single-view error is the mean,
    over sources, of one noisy source map warped into the target.
    """
    from .evaluate import feature_mse, lift_views, nearest_sources
    from .operators import ColorQuant, view_seed
    from .scenes import warp

    targets = list(range(0, data.n_views, 3)) if targets is None else list(targets)
    rows = []
    for sigma in sigmas:
        op = ColorQuant(noise_sigma=sigma, hue_range=0.0)
        feats = np.stack([op.encode(data.rgb[i], view_seed(data.seed, i, "colorquant"))
                          for i in range(data.n_views)])
        clean = np.stack([op.clean_features(data.rgb[i]) for i in range(data.n_views)])
        D = store.values["pred.l2.b"].shape[0]
        feats_d, clean_d = adapt_dim(feats, D), adapt_dim(clean, D)
        lifted = lift_views(data, store, op, targets, n_sources, config, seed, feats=feats_d)
        rendered, single = [], []
        for r in lifted:
            t = r["target"]
            rendered.append(feature_mse(r["feat"], clean_d[t], r["acc"]))
            errs = []
            for s in nearest_sources(data, t, n_sources):
                w, m = warp(feats_d[s], data.cameras[s], data.cameras[t], data.depth[s], data.depth[t])
                if m.any():
                    errs.append(float(np.mean((w[m] - clean_d[t][m]) ** 2)))
            single.append(float(np.mean(errs)))
        rows.append({"sigma": float(sigma), "rendered_mse": float(np.mean(rendered)),
                     "single_view_mse": float(np.mean(single))})
    return rows
