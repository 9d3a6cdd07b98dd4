import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lift3d import autodiff as ad
from lift3d import renderer as rd
from lift3d.operators import adapt_dim
from lift3d.renderer import EpipolarGather, RenderConfig, SourceViews, init_params
from lift3d.sampling import RaySamples, stratified


def sources(data, ids=(0, 2, 4, 6)):
    return SourceViews([data.cameras[i] for i in ids], data.rgb[list(ids)],
                       adapt_dim(data.features["colorquant"][list(ids)], 32))


def target_rays(data, view=3, n=64, seed=0):
    from lift3d.geometry import rays_for_pixels
    ids = np.random.default_rng(seed).choice(64 * 64, n, replace=False)
    o, d = rays_for_pixels(data.cameras[view], ids)
    return o, d, ids


# --------------------------------------------------------------------------
# straight-line oracles, written per point with plain loops


def blend_oracle(F, G, valid, P):
    n_pts, N, _ = F.shape
    f_out, g_out, w_out = [], [], []
    for p in range(n_pts):
        vi = np.flatnonzero(valid[p])
        x = F[p, vi]
        stats = np.concatenate([x.mean(0), (x * x).mean(0) - x.mean(0) ** 2])
        logits = []
        for i in range(len(vi)):
            h = np.maximum(x[i] @ P["blend.l1.Wf"] + P["blend.l1.b"] + stats @ P["blend.l1.Ws"], 0)
            logits.append((h @ P["blend.l2.W"] + P["blend.l2.b"])[0])
        e = np.exp(np.array(logits) - max(logits))
        w = np.zeros(N)
        w[vi] = e / e.sum()
        pool = G[p, vi].max(axis=0)
        Gt = np.zeros_like(G[p])
        for i in vi:
            delta = F[p, i] - (G[p, i] @ P["corr.f1.W"] + P["corr.f1.b"])
            h = np.maximum(pool @ P["corr.f2a.Wp"] + P["corr.f2a.b"] + delta @ P["corr.f2a.Wd"], 0)
            Gt[i] = G[p, i] + h @ P["corr.f2b.W"] + P["corr.f2b.b"]
        f_out.append(w @ F[p])
        g_out.append(w @ Gt)
        w_out.append(w)
    return np.array(f_out), np.array(g_out), np.array(w_out)


def composite_oracle(sigma, deltas, values):
    out = np.zeros(values.shape[-1])
    W = 0.0
    alpha = 1 - np.exp(-sigma * deltas)
    for j in range(len(sigma)):
        T = 1.0
        for k in range(j):
            T *= 1 - alpha[k]
        out += T * alpha[j] * values[j]
        W += T * alpha[j]
    return out, W


def random_gather(seed, n_pts=2, N=4, D=32):
    r = np.random.default_rng(seed)
    F = r.normal(size=(n_pts, N, 16))
    G = r.normal(size=(n_pts, N, D))
    valid = r.uniform(size=(n_pts, N)) < 0.7
    valid[:, 0] = True
    F[~valid] = 0
    G[~valid] = 0
    return F, G, valid


def test_blend_and_correct_match_oracle():
    P = init_params(seed=3, dtype=np.float64, zero_residual=False)
    for seed in range(20):
        F, G, valid = random_gather(seed)
        g = EpipolarGather(ad.const(F), valid, G, None)
        f, gf, w, void = rd.blend(g, P.values, mode="full")
        fo, go, wo = blend_oracle(F, G, valid, P.values)
        assert not void.any()
        assert np.max(np.abs(f.value - fo)) < 1e-6
        assert np.max(np.abs(gf.value - go)) < 1e-6
        assert np.max(np.abs(w.value - wo)) < 1e-6


@given(st.integers(0, 10**6))
def test_blend_weights_sum_to_one_over_valid(seed):
    P = init_params(seed=1, dtype=np.float64)
    F, G, valid = random_gather(seed, n_pts=5, N=6)
    w, _ = rd.blend_weights(EpipolarGather(ad.const(F), valid, G, None), P.values)
    assert np.all(w.value[~valid] == 0)
    assert np.allclose(w.value.sum(-1), 1, atol=1e-12)


def test_blend_examples():
    P = init_params(seed=1, dtype=np.float64)
    F = np.tile(np.random.default_rng(0).normal(size=16), (1, 5, 1))
    G = np.random.default_rng(1).normal(size=(1, 5, 32))
    _, _, w, _ = rd.blend(EpipolarGather(ad.const(F), np.ones((1, 5), bool), G, None), P.values)
    assert np.allclose(w.value, 0.2)
    valid = np.array([[False, False, True, False, False]])
    f, gf, w, _ = rd.blend(EpipolarGather(ad.const(F * valid[..., None]), valid, G, None), P.values,
                           mode="no_correction")
    assert np.array_equal(w.value, valid.astype(float))
    assert np.allclose(f.value, F[0, 2]) and np.allclose(gf.value, G[0, 2])
    # no valid view: flagged void, density forced to zero
    g = EpipolarGather(ad.const(np.zeros((1, 3, 16))), np.zeros((1, 3), bool), np.zeros((1, 3, 32)), None)
    f, _, _, void = rd.blend(g, P.values)
    sigma, _ = rd.decode_point(f, P.values, "fine", void)
    assert void.all() and np.all(sigma.value == 0)


def test_shared_weight_tensor_is_identical(monkeypatch):
    P = init_params(seed=1, dtype=np.float64)
    F, G, valid = random_gather(0)
    seen = []
    orig = ad.weighted_sum

    def spy(w, x):
        seen.append(w)
        return orig(w, x)

    monkeypatch.setattr(ad, "weighted_sum", spy)
    rd.blend(EpipolarGather(ad.const(F), valid, G, None), P.values, mode="full")
    # the last two blends are f and g; the earlier ones are the set statistics
    f_w, g_w = seen[-2], seen[-1]
    assert f_w is g_w and f_w.op == "masked_softmax"


def test_correction_pool_and_zero_residual():
    P = init_params(seed=2, dtype=np.float64)  # corr.f2b zero-initialised
    F, G, valid = random_gather(4)
    g = EpipolarGather(ad.const(F), valid, G, None)
    assert np.array_equal(rd.correct(g, P.values).value, G)
    Gs = np.broadcast_to(G[:, :1], G.shape).copy()
    pooled = ad.max_over_axis(ad.const(Gs), axis=-2, mask=np.ones(Gs.shape, bool))
    assert np.array_equal(pooled.value, Gs[:, 0])


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_decode_point_ranges(seed):
    P = init_params(seed=seed % 100, dtype=np.float64)
    f = ad.const(np.random.default_rng(seed).normal(scale=5, size=(7, 16)))
    sigma, c = rd.decode_point(f, P.values)
    assert np.all(sigma.value >= 0) and np.all((c.value >= 0) & (c.value <= 1))


def test_composite_examples():
    s = RaySamples(np.array([[1.0, 2.0]]), np.array([0.5]), np.array([2.5]))
    # alpha = (0.5, 1): sigma * delta = (ln 2, inf)
    sigma = np.array([[np.log(2) / s.deltas[0, 0], 1e30]])
    out, w, W, _ = rd.composite(s, sigma, np.array([[[1.0], [0.0]]]))
    assert np.isclose(out.value[0, 0], 0.5) and np.isclose(W[0], 1.0)
    out, w, W, _ = rd.composite(s, np.zeros((1, 2)), np.ones((1, 2, 3)))
    assert np.all(out.value == 0) and W[0] == 0
    s1 = RaySamples(np.array([[1.0]]), np.array([0.5]), np.array([1.5]))
    out, _, W, _ = rd.composite(s1, np.array([[1e30]]), np.array([[[0.25, 0.5, 1.0]]]))
    assert np.allclose(out.value, [0.25, 0.5, 1.0]) and W[0] == 1


def test_composite_matches_brute_force():
    r = np.random.default_rng(0)
    near, far = np.full(200, 1.0), np.full(200, 4.0)
    s = stratified(near, far, 16, u=r.uniform(size=(200, 16)))
    sigma = r.exponential(2.0, size=(200, 16))
    vals = r.uniform(size=(200, 16, 3))
    out, w, W, _ = rd.composite(s, sigma, vals)
    T = np.exp(-np.concatenate([np.zeros((200, 1)), np.cumsum(sigma * s.deltas, 1)[:, :-1]], 1))
    assert np.all(np.diff(T, axis=1) <= 0) and np.all(w.value >= 0) and np.all(W <= 1 + 1e-12)
    for i in range(200):
        o, Wo = composite_oracle(sigma[i], s.deltas[i], vals[i])
        assert np.max(np.abs(out.value[i] - o)) < 1e-6 and abs(W[i] - Wo) < 1e-6


def test_encode_rgb_features_examples():
    P = init_params(seed=0, dtype=np.float64)
    img = np.full((1, 5, 5, 3), 0.3)
    F = rd.encode_rgb_features(rd.neighborhood_patches(img), P.values).value
    assert F.shape == (1, 5, 5, 16) and np.allclose(F, F[0, 0, 0])
    Z = {k: np.zeros_like(v) for k, v in P.values.items()}
    Z["conv.l2.b"] = np.arange(16.0)
    F = rd.encode_rgb_features(rd.neighborhood_patches(np.random.default_rng(0).uniform(size=(1, 4, 4, 3))), Z)
    assert np.array_equal(F.value[0, 2, 3], np.arange(16.0))


def test_gather_examples(scene16):
    src = sources(scene16)
    P = init_params(seed=0)
    H, W = src.hw
    Fm = ad.reshape(rd.encode_rgb_features(src.patches.astype(np.float32), P.values), (src.n * H * W, 16))
    # GT surface points of view 3: fetched rgb agrees across the views that see them
    from lift3d.geometry import unproject
    v, u = np.nonzero(np.isfinite(scene16.depth[3]))
    x = unproject(scene16.cameras[3], u, v, scene16.depth[3][v, u])
    S, valid = rd.tap_matrix(x, src)
    rgb = np.asarray(S @ src.images.reshape(-1, 3)).reshape(len(x), src.n, 3)
    ref = scene16.rgb[3][v, u]
    from lift3d.geometry import project
    vis = np.ones_like(valid)
    for i, cam in enumerate(src.cams):
        pix, z, _ = project(cam, x)
        from lift3d.geometry import fetch_bilinear
        d, _ = fetch_bilinear(scene16.depth[[0, 2, 4, 6][i]][..., None], pix, nearest=True)
        vis[:, i] = np.abs(d[:, 0] - z) < 0.01 * z
    m = valid & vis
    err = np.sqrt(np.mean(((rgb - ref[:, None]) ** 2)[m]))
    assert err < 0.05
    # behind every camera -> nothing valid, and invalid entries are exact zeros
    behind = np.stack([c.center - 2 * c.forward for c in src.cams])
    g = rd.gather(behind, src, Fm)
    assert not g.valid.any() and np.all(g.F.value == 0) and np.all(g.G == 0)
    one = SourceViews(src.cams[:1], src.images[:1], src.features[:1])
    Fm1 = ad.reshape(rd.encode_rgb_features(one.patches.astype(np.float32), P.values), (H * W, 16))
    g1 = rd.gather(x[:50], one, Fm1)
    pix, _, ok = project(one.cams[0], x[:50])
    inb = (pix[:, 0] >= 0) & (pix[:, 0] <= W - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= H - 1)
    assert np.array_equal(g1.valid[:, 0], ok & inb)


def test_full_equals_no_correction_at_init(scene16):
    src = sources(scene16)
    P = init_params(seed=0)
    o, d, ids = target_rays(scene16)
    outs = {}
    for mode in ("full", "no_correction"):
        cfg = RenderConfig(8, 16, mode=mode)
        with ad.no_grad():
            outs[mode] = rd.render_rays(rd.params_as_vars(P), src, o, d, scene16.near, scene16.far, cfg, ray_keys=ids)
    a, b = outs["full"], outs["no_correction"]
    assert a.feat.value.tobytes() == b.feat.value.tobytes()
    assert a.coarse_rgb.value.tobytes() == b.coarse_rgb.value.tobytes()
    # once the residual is non-zero the coarse branch is still shared
    P2 = init_params(seed=0, zero_residual=False)
    with ad.no_grad():
        c = rd.render_rays(rd.params_as_vars(P2), src, o, d, scene16.near, scene16.far, RenderConfig(8, 16), ray_keys=ids)
        n = rd.render_rays(rd.params_as_vars(P2), src, o, d, scene16.near, scene16.far,
                           RenderConfig(8, 16, mode="no_correction"), ray_keys=ids)
    assert c.coarse_rgb.value.tobytes() == n.coarse_rgb.value.tobytes()
    assert c.feat.value.tobytes() != n.feat.value.tobytes()


@pytest.mark.parametrize("mode", ["full", "no_correction", "single_stage", "predict"])
def test_render_rays_modes(scene16, mode):
    src = sources(scene16)
    P = init_params(seed=0)
    o, d, ids = target_rays(scene16, n=16)
    with ad.no_grad():
        out = rd.render_rays(rd.params_as_vars(P), src, o, d, scene16.near, scene16.far, RenderConfig(8, 16, mode=mode),
                             ray_keys=ids)
    K = 8 if mode == "single_stage" else 24
    assert out.weights.shape == (16, K) and out.feat.shape == (16, 32)
    assert (out.coarse_rgb is None) == (mode == "single_stage")
    assert np.all((out.acc >= 0) & (out.acc <= 1 + 1e-6))


def test_void_ray_is_empty(scene16):
    src = sources(scene16)
    P = init_params(seed=0)
    cam = scene16.cameras[3]
    o = cam.center[None]
    d = -cam.forward[None]
    with ad.no_grad():
        out = rd.render_rays(rd.params_as_vars(P), src, o, d, scene16.near, scene16.far, RenderConfig(8, 16))
    assert out.acc[0] == 0 and np.all(out.feat.value == 0)


def test_mass_pruning_bound():
    r = np.random.default_rng(0)
    w = r.dirichlet(np.ones(12), size=50) * r.uniform(size=(50, 1))
    idx = rd.kept_samples(w, 0.03)
    keep = np.zeros(w.size, bool)
    keep[idx] = True
    dropped = (w.ravel() * ~keep).reshape(w.shape).sum(1)
    assert np.all(dropped <= 0.03 + 1e-12)
    # everything dropped is lighter than everything kept on the same ray
    for i in range(50):
        k = keep.reshape(w.shape)[i]
        if k.any() and (~k).any():
            assert w[i][~k].max() <= w[i][k].min()
    assert rd.kept_samples(w, 0).size == w.size


def test_render_view_deterministic_and_fast(scene16):
    src = sources(scene16)
    P = init_params(seed=0)
    cfg = RenderConfig(16, 32, prune_eps=0.03)
    t0 = time.process_time()
    a = rd.render_view(scene16.cameras[3], src, P, cfg, scene16.near, scene16.far, seed=5)
    elapsed = time.process_time() - t0
    b = rd.render_view(scene16.cameras[3], src, P, cfg, scene16.near, scene16.far, seed=5)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert np.all((a["acc"] >= 0) & (a["acc"] <= 1 + 1e-6))
    assert a["feat"].shape == (64, 64, 32)
    assert elapsed < 5.0


def test_render_grad_check_per_group(scene16):
    # small f64 pass over every parameter group with pinned fine samples
    ids = (0, 2)
    src = SourceViews([scene16.cameras[i] for i in ids], scene16.rgb[list(ids), 20:24, 20:24],
                      adapt_dim(scene16.features["colorquant"][list(ids), 20:24, 20:24], 32).astype(np.float64))
    store = init_params(seed=0, dtype=np.float64, zero_residual=False)
    o, d, _ = target_rays(scene16, n=3)
    cfg = RenderConfig(6, 8, mode="full")
    with ad.no_grad():
        ts = rd.render_rays(rd.params_as_vars(store), src, o, d, scene16.near, scene16.far, cfg).ts
    C = np.random.default_rng(0).normal(size=(3, 32))

    def loss(L):
        out = rd.render_rays(L, src, o, d, scene16.near, scene16.far, cfg, fine_ts=ts)
        return ad.add(ad.sum_all(ad.mul(out.feat, C)), ad.sum_all(ad.mul(out.rgb, out.rgb)))

    assert grad_check_ok(loss, store)


def grad_check_ok(fn, store):
    err = ad.grad_check(fn, store, eps=1e-6, max_per_param=6, seed=0)
    return err < 1e-5
