"""Epipolar feature rendering.

For every sample point on a target ray the point is projected into each
source view, where two things are fetched: the learned RGB feature F_i and
the operator feature G_i. A DeepSets network turns the F_i into per-view
blending weights; the *same* weights blend F (giving geometry and color) and
the optionally corrected G (giving the rendered operator feature). Volume
rendering then accumulates both along the ray with the density decoded from
the blended RGB feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .geometry import Camera, bilinear_taps, project, rays_for_pixels
from .sampling import RaySamples, importance, merge, stratified
from .tensorio import Rng, derive_stream, hash_uniform

RGB_FEAT = 16
FEAT_DIM = 32
MODES = ("full", "no_correction", "single_stage", "predict")


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    mode: str = "full"
    fine_pass: str = "merged"  # or "fine_only"
    fetch: str = "bilinear"  # or "nearest"
    blend_rgb: bool = False
    perturb: bool = False
    prune_eps: float = 0.0  # per ray, lowest-weight samples totalling at most this skip the feature branch
    chunk: int = 512

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fine_pass not in ("merged", "fine_only"):
            raise ValueError(f"fine_pass must be merged|fine_only, got {self.fine_pass!r}")
        if self.fetch not in ("bilinear", "nearest"):
            raise ValueError(f"fetch must be bilinear|nearest, got {self.fetch!r}")


# --------------------------------------------------------------------------
# parameters


def _glorot(rng: Rng, n_in: int, n_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return lim * (2 * rng.uniform(n_in * n_out) - 1).reshape(n_in, n_out)


def init_params(feat_dim: int = FEAT_DIM, seed: int = 0, dtype=np.float32, blend_rgb: bool = False,
                zero_residual: bool = True) -> ParamStore:
    """All trainable groups: F_conv, F_w, F_1/F_2, both decoders and the prediction head."""
    rng = Rng(seed, derive_stream(0x9A7A))
    P = ParamStore(dtype)
    D = feat_dim
    per_view = RGB_FEAT + (3 if blend_rgb else 0)

    def dense(name, n_in, n_out, zero=False):
        P.add(f"{name}.W", np.zeros((n_in, n_out)) if zero else _glorot(rng, n_in, n_out))
        P.add(f"{name}.b", np.zeros(n_out))

    dense("conv.l1", 27, 32)
    dense("conv.l2", 32, RGB_FEAT)
    # first blend layer acts on [F_i, mean, var]; split by input block
    P.add("blend.l1.Wf", _glorot(rng, 3 * per_view, 32)[:per_view])
    P.add("blend.l1.Ws", _glorot(rng, 3 * per_view, 32)[per_view:])
    P.add("blend.l1.b", np.zeros(32))
    dense("blend.l2", 32, 1)
    dense("corr.f1", D, RGB_FEAT)
    P.add("corr.f2a.Wp", _glorot(rng, D + RGB_FEAT, 64)[:D])
    P.add("corr.f2a.Wd", _glorot(rng, D + RGB_FEAT, 64)[D:])
    P.add("corr.f2a.b", np.zeros(64))
    dense("corr.f2b", 64, D, zero=zero_residual)
    for stage in ("coarse", "fine"):
        dense(f"dec_{stage}.l1", RGB_FEAT, 32)
        dense(f"dec_{stage}.l2", 32, 4)
    dense("pred.l1", RGB_FEAT, 64)
    dense("pred.l2", 64, D)
    return P


def _lin(x, P, name):
    return ad.linear(x, P[f"{name}.W"], P[f"{name}.b"])


def _zeros_bias(n, dtype):
    return ad.const(np.zeros(n, dtype=dtype))


# --------------------------------------------------------------------------
# source views


def neighborhood_patches(images: np.ndarray) -> np.ndarray:
    """3 x 3 RGB neighbourhoods (27 values) per pixel with reflection padding."""
    images = np.asarray(images)
    N, H, W, _ = images.shape
    p = np.pad(images, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    cols = [p[:, dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


@dataclass
class SourceViews:
    cams: list[Camera]
    images: np.ndarray  # N x H x W x 3
    features: np.ndarray | None = None  # N x H x W x D (already adapted)
    patches: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.cams:
            raise ValueError("need at least one source view")
        if self.patches is None:
            self.patches = neighborhood_patches(self.images)

    @property
    def n(self) -> int:
        return len(self.cams)

    @property
    def hw(self):
        return self.images.shape[1], self.images.shape[2]


def encode_rgb_features(patches, P) -> Var:
    """F_conv: per-pixel 27 -> 32 -> 16 perceptron over the 3 x 3 neighbourhood."""
    h = ad.relu(_lin(ad.const(patches), P, "conv.l1"))
    return _lin(h, P, "conv.l2")


# --------------------------------------------------------------------------
# gather


@dataclass
class EpipolarGather:
    F: Var  # (..., N, 16)
    valid: np.ndarray  # (..., N) bool
    G: np.ndarray | None  # (..., N, D) constant operator features
    rgb: np.ndarray | None  # (..., N, 3)
    taps: sp.csr_matrix | None = field(default=None, repr=False)


def tap_matrix(points: np.ndarray, src: SourceViews, nearest: bool = False):
    """Sparse interpolation matrix from flattened source maps to (point, view) rows."""
    N = src.n
    H, W = src.hw
    lead = points.shape[:-1]
    n_pts = int(np.prod(lead))
    pts = points.reshape(-1, 3)
    idx = np.empty((n_pts, N, 4), dtype=np.int64)
    wts = np.empty((n_pts, N, 4))
    valid = np.empty((n_pts, N), dtype=bool)
    for i, cam in enumerate(src.cams):
        pix, _, ok = project(cam, pts)
        ti, tw, inb = bilinear_taps(pix, H, W, nearest=nearest)
        ok = ok & inb
        idx[:, i] = ti + i * H * W
        wts[:, i] = tw * ok[:, None]
        valid[:, i] = ok
    S = sp.csr_matrix((wts.ravel(), idx.ravel(), np.arange(0, n_pts * N * 4 + 1, 4)), shape=(n_pts * N, N * H * W))
    return S, valid.reshape(lead + (N,))


def gather(points: np.ndarray, src: SourceViews, Fmaps: Var, fetch: str = "bilinear", with_g: bool = True,
           with_rgb: bool = False) -> EpipolarGather:
    """Fetch F_i(proj_i(x)) (differentiable) and G_i(proj_i(x)) for points (..., 3)."""
    S, valid = tap_matrix(points, src, nearest=(fetch == "nearest"))
    lead = valid.shape
    S = S.astype(Fmaps.value.dtype)
    F = ad.reshape(ad.sparse_matmul(S, Fmaps), lead + (RGB_FEAT,))
    G = None
    if with_g and src.features is not None:
        D = src.features.shape[-1]
        G = np.asarray(S @ src.features.reshape(-1, D).astype(Fmaps.value.dtype)).reshape(lead + (D,))
    rgb = None
    if with_rgb:
        rgb = np.asarray(S @ src.images.reshape(-1, 3).astype(Fmaps.value.dtype)).reshape(lead + (3,))
    return EpipolarGather(F, valid, G, rgb, S)


def select_points(g: EpipolarGather, idx: np.ndarray) -> EpipolarGather:
    """Restrict a gather of shape (R, K, N, .) to flat point indices over R*K."""
    N = g.valid.shape[-1]
    P = int(np.prod(g.valid.shape[:-1]))
    F = ad.take(ad.reshape(g.F, (P, N, g.F.shape[-1])), idx, unique=True)
    G = None if g.G is None else g.G.reshape(P, N, -1)[idx]
    rgb = None if g.rgb is None else g.rgb.reshape(P, N, 3)[idx]
    return EpipolarGather(F, g.valid.reshape(P, N)[idx], G, rgb)


# --------------------------------------------------------------------------
# blend / correct / decode


def blend_weights(g: EpipolarGather, P) -> tuple[Var, np.ndarray]:
    """Per-view weights from the DeepSets network; also returns the void-point mask."""
    valid = g.valid
    N = valid.shape[-1]
    dtype = g.F.value.dtype
    void = ~valid.any(axis=-1)
    x = g.F
    if g.rgb is not None:
        x = ad.concat([x, ad.const(g.rgb)], axis=-1)
    m = valid.astype(dtype)
    cnt = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    mw = ad.const(m / cnt)
    mean = ad.weighted_sum(mw, x)
    var = ad.sub(ad.weighted_sum(mw, ad.mul(x, x)), ad.mul(mean, mean))
    stats = ad.concat([mean, var], axis=-1)
    h_view = ad.linear(x, P["blend.l1.Wf"], P["blend.l1.b"])
    h_set = ad.linear(stats, P["blend.l1.Ws"], _zeros_bias(32, dtype))
    h = ad.relu(ad.add(h_view, ad.expand(h_set, -2, N)))
    logits = ad.reshape(_lin(h, P, "blend.l2"), valid.shape)
    soft_mask = valid | void[..., None]  # void points: any weights, their density is zeroed
    return ad.masked_softmax(logits, soft_mask, axis=-1), void


def correct(g: EpipolarGather, P) -> Var:
    """G~_i = G_i + F_2(maxpool_i(G) ++ (F_i - F_1(G_i)))."""
    N = g.valid.shape[-1]
    G = ad.const(g.G)
    delta = ad.sub(g.F, _lin(G, P, "corr.f1"))
    pooled = ad.max_over_axis(G, axis=-2, mask=np.broadcast_to(g.valid[..., None], g.G.shape))
    h_pool = ad.linear(pooled, P["corr.f2a.Wp"], P["corr.f2a.b"])
    h_delta = ad.linear(delta, P["corr.f2a.Wd"], _zeros_bias(64, g.G.dtype))
    h = ad.relu(ad.add(h_delta, ad.expand(h_pool, -2, N)))
    return ad.add(G, _lin(h, P, "corr.f2b"))


def blend(g: EpipolarGather, P, mode: str = "full"):
    """Returns (f, g_feat or None, w, void); f and g use the identical weight tensor."""
    w, void = blend_weights(g, P)
    f = ad.weighted_sum(w, g.F)
    gf = None
    if g.G is not None and mode in ("full", "no_correction", "single_stage"):
        Gt = correct(g, P) if mode in ("full", "single_stage") else ad.const(g.G)
        gf = ad.weighted_sum(w, Gt)
    return f, gf, w, void


def decode_point(f: Var, P, stage: str = "fine", void=None):
    """(sigma >= 0 via softplus, color in (0, 1) via sigmoid)."""
    h = ad.relu(_lin(f, P, f"dec_{stage}.l1"))
    o = _lin(h, P, f"dec_{stage}.l2")
    sigma = ad.reshape(ad.softplus(ad.slice_last(o, 0, 1)), o.shape[:-1])
    if void is not None and void.any():
        sigma = ad.mul(sigma, (~void).astype(o.value.dtype))
    return sigma, ad.sigmoid(ad.slice_last(o, 1, 4))


def predict_feature(f: Var, P) -> Var:
    return _lin(ad.relu(_lin(f, P, "pred.l1")), P, "pred.l2")


def composite_weights(sigma: Var, deltas: np.ndarray) -> Var:
    """w_j = T_j alpha_j with alpha_j = 1 - exp(-sigma_j delta_j), T_j = prod_{k<j}(1 - alpha_k)."""
    sd = ad.mul(sigma, deltas.astype(sigma.value.dtype))
    T = ad.exp(ad.scale(ad.cumsum_exclusive(sd, axis=-1), -1.0))
    alpha = ad.sub(np.ones_like(sd.value), ad.exp(ad.scale(sd, -1.0)))
    return ad.mul(T, alpha)


def composite(samples: RaySamples, sigma, values):
    """Volume-render ``values`` (..., K, C); returns (output, w, W, expected_depth)."""
    sigma = ad.const(sigma)
    w = composite_weights(sigma, samples.deltas)
    out = ad.weighted_sum(w, ad.const(values))
    acc = w.value.sum(axis=-1)
    depth = (w.value * samples.ts).sum(axis=-1) / np.maximum(acc, 1e-8)
    return out, w, acc, depth


# --------------------------------------------------------------------------
# ray batches


def _ray_uniforms(seed: int, ray_keys: np.ndarray, offset: int, n: int) -> np.ndarray:
    """Per-ray jitter; each ray key (pixel index, folded with the step) owns a stream."""
    streams = np.asarray(ray_keys, dtype=np.uint64)[:, None]
    return hash_uniform(seed, streams, np.arange(offset, offset + n, dtype=np.uint64)[None, :])


def kept_samples(w: np.ndarray, eps: float) -> np.ndarray:
    """Flat (ray * K + sample) indices that survive mass pruning.

    Per ray, samples are dropped in ascending weight order while their summed
    weight stays <= eps, so the feature composite loses at most eps of mass.
    """
    R, K = w.shape
    if eps <= 0:
        return np.arange(R * K)
    order = np.argsort(w, axis=1, kind="stable")
    dropped = np.cumsum(np.take_along_axis(w, order, axis=1), axis=1) <= eps
    keep = np.ones((R, K), dtype=bool)
    np.put_along_axis(keep, order, ~dropped, axis=1)
    return np.flatnonzero(keep)


@dataclass
class RayBatchOutput:
    rgb: Var  # (R, 3)
    feat: Var | None  # (R, D)
    acc: np.ndarray
    depth: np.ndarray
    coarse_rgb: Var | None
    weights: np.ndarray  # fine ray weights (R, K)
    ts: np.ndarray


def render_rays(P, src: SourceViews, origins, dirs, near, far, config: RenderConfig, *, seed: int = 0,
                ray_keys=None, Fmaps: Var | None = None, fine_ts: np.ndarray | None = None) -> RayBatchOutput:
    """Render a batch of rays; P maps parameter names to Vars or arrays.

    ``fine_ts`` pins the fine-pass sample positions (used by gradient checks,
    where importance sampling must not move under parameter perturbation).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = origins.shape[0]
    dtype = np.dtype(P["conv.l1.W"].value.dtype if isinstance(P["conv.l1.W"], Var) else P["conv.l1.W"].dtype)
    if ray_keys is None:
        ray_keys = np.arange(R)
    if Fmaps is None:
        H, W = src.hw
        Fmaps = ad.reshape(encode_rgb_features(src.patches.astype(dtype), P), (src.n * H * W, RGB_FEAT))
    near_a = np.full(R, near, dtype=np.float64)
    far_a = np.full(R, far, dtype=np.float64)

    def points(ts):
        return origins[:, None, :] + ts[..., None] * dirs[:, None, :]

    u_c = _ray_uniforms(seed, ray_keys, 0, config.n_coarse) if config.perturb else None
    coarse = stratified(near_a, far_a, config.n_coarse, u=u_c)
    coarse_rgb = None
    if config.mode == "single_stage":
        fine = coarse
    else:
        gc = gather(points(coarse.ts), src, Fmaps, config.fetch, with_g=False, with_rgb=config.blend_rgb)
        fc, _, _, void_c = blend(gc, P, mode="no_correction")
        sig_c, col_c = decode_point(fc, P, "coarse", void_c)
        coarse_rgb, w_c, _, _ = composite(coarse, sig_c, col_c)
        if fine_ts is not None:
            fine = RaySamples(np.asarray(fine_ts, dtype=np.float64), near_a, far_a)
        else:
            if config.perturb:
                u_f = _ray_uniforms(seed, ray_keys, config.n_coarse, config.n_fine)
            else:
                u_f = np.broadcast_to((np.arange(config.n_fine) + 0.5) / config.n_fine, (R, config.n_fine))
            # coarse weights are detached: no gradient through sample positions
            imp = importance(coarse, w_c.value.astype(np.float64), config.n_fine, u=u_f)
            fine = merge(coarse, imp) if config.fine_pass == "merged" else imp

    K = fine.K
    gf = gather(points(fine.ts), src, Fmaps, config.fetch, with_g=config.mode != "predict",
                with_rgb=config.blend_rgb)
    w_views, void = blend_weights(gf, P)
    f = ad.weighted_sum(w_views, gf.F)
    sigma, color = decode_point(f, P, "fine", void)
    rgb, w_ray, acc, depth = composite(fine, sigma, color)

    feat = None
    if config.mode == "predict" or gf.G is not None:
        idx = kept_samples(w_ray.value, config.prune_eps)
        D = gf.G.shape[-1] if gf.G is not None else P["pred.l2.b"].shape[0]
        if idx.size == 0:
            feat = ad.const(np.zeros((R, D), dtype=dtype))
        else:
            N = src.n
            wsel = ad.take(ad.reshape(w_ray, (R * K,)), idx, unique=True)
            if config.mode == "predict":
                gpt = predict_feature(ad.take(ad.reshape(f, (R * K, RGB_FEAT)), idx, unique=True), P)
            else:
                sel = select_points(gf, idx)
                wv = ad.take(ad.reshape(w_views, (R * K, N)), idx, unique=True)
                Gt = correct(sel, P) if config.mode in ("full", "single_stage") else ad.const(sel.G)
                gpt = ad.weighted_sum(wv, Gt)
            contrib = ad.mul(gpt, ad.expand(wsel, -1, D))
            seg = sp.csr_matrix((np.ones(idx.size, dtype=dtype), (idx // K, np.arange(idx.size))), shape=(R, idx.size))
            feat = ad.sparse_matmul(seg, contrib)
    return RayBatchOutput(rgb, feat, acc, depth, coarse_rgb, w_ray.value, fine.ts)


def params_as_vars(P):
    if isinstance(P, ParamStore):
        return {k: ad.const(v) for k, v in P.values.items()}
    return P


def render_pixel(cam: Camera, u: float, v: float, src: SourceViews, P, config: RenderConfig, near, far,
                 seed: int = 0):
    """(coarse rgb or None, fine RayBatchOutput) for one pixel."""
    from .geometry import pixel_directions

    d = pixel_directions(cam, np.array([u]), np.array([v]))
    o = cam.center[None, :]
    with ad.no_grad():
        out = render_rays(params_as_vars(P), src, o, d, near, far, config, seed=seed,
                          ray_keys=np.array([int(round(v)) * cam.width + int(round(u))]))
    return out


def render_view(target: Camera, src: SourceViews, P, config: RenderConfig, near, far, seed: int = 0,
                threads: int = 1) -> dict:
    """Render full-image maps: rgb, feat, acc, depth (and coarse_rgb)."""
    H, W = target.height, target.width
    Pv = params_as_vars(P)
    dtype = Pv["conv.l1.W"].value.dtype
    with ad.no_grad():
        Fmaps = ad.reshape(encode_rgb_features(src.patches.astype(dtype), Pv), (src.n * src.hw[0] * src.hw[1], RGB_FEAT))
    pix = np.arange(H * W)
    chunks = [pix[i:i + config.chunk] for i in range(0, H * W, config.chunk)]

    def run(ids):
        o, d = rays_for_pixels(target, ids)
        with ad.no_grad():
            out = render_rays(Pv, src, o, d, near, far, config, seed=seed, ray_keys=ids, Fmaps=Fmaps)
        return (out.rgb.value, None if out.feat is None else out.feat.value, out.acc, out.depth,
                None if out.coarse_rgb is None else out.coarse_rgb.value)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    res = {
        "rgb": np.concatenate([p[0] for p in parts]).reshape(H, W, 3),
        "acc": np.concatenate([p[2] for p in parts]).reshape(H, W),
        "depth": np.concatenate([p[3] for p in parts]).reshape(H, W),
    }
    if parts[0][1] is not None:
        res["feat"] = np.concatenate([p[1] for p in parts]).reshape(H, W, -1)
    if parts[0][4] is not None:
        res["coarse_rgb"] = np.concatenate([p[4] for p in parts]).reshape(H, W, 3)
    return res
