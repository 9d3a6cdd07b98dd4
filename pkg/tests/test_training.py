import numpy as np
import pytest

from lift3d import autodiff as ad
from lift3d.renderer import RayBatchOutput
from lift3d.tensorio import Rng
from lift3d.training import (ScenePool, TrainConfig, compute_loss, nearest_views, resume, sample_batch, train,
                             train_step)
from lift3d.renderer import init_params


def tiny(**kw):
    base = dict(n_rays_per_step=48, n_coarse=8, n_fine=8, steps=100, operators=("colorquant",), prune_eps=0.0,
                checkpoint_every=1000, log_every=10)
    base.update(kw)
    return TrainConfig(**base)


def test_sample_batch_ranges(scene16):
    cfg = TrainConfig()
    rng = Rng(0, 1)
    ks = []
    for _ in range(10_000):
        b = sample_batch([scene16], cfg, rng)
        assert 8 <= b.n_src <= 12 and 1 <= b.k <= 3 and len(b.sources) == b.n_src
        assert b.target not in b.sources and b.target not in b.pool
        assert set(b.sources) <= set(b.pool)
        assert len(b.pool) == min(b.k * b.n_src, 15)
        assert b.operator_id in ("colorquant", "gradfeat")
        ks.append(b.k)
    assert b.pixels.shape == (2048,) and b.pixels.min() >= 0 and b.pixels.max() < 64 * 64
    freq = np.bincount(ks, minlength=4)[1:] / len(ks)
    assert np.all(np.abs(freq - 1 / 3) < 0.02)


def test_k1_selects_nearest(scene16):
    cfg = TrainConfig(k_range=(1, 1))
    rng = Rng(3, 0)
    for _ in range(50):
        b = sample_batch([scene16], cfg, rng)
        near = nearest_views(scene16, b.target)[: b.n_src]
        assert np.array_equal(np.sort(near), b.sources)
        d = np.linalg.norm(scene16.centers() - scene16.centers()[b.target], axis=1)
        others = np.setdiff1d(np.arange(16), np.append(b.sources, b.target))
        assert d[b.sources].max() <= d[others].min()


def test_small_scene_is_skipped(scene16, caplog):
    from dataclasses import replace
    small = replace(scene16, cameras=scene16.cameras[:5])
    b = sample_batch([small, scene16], TrainConfig(), Rng(0, 0))
    assert b.scene_index == 1 and "skipping" in caplog.text
    with pytest.raises(ValueError):
        sample_batch([small], TrainConfig(), Rng(0, 0))


def _fake_out(rgb, coarse, feat):
    return RayBatchOutput(ad.const(rgb), None if feat is None else ad.const(feat), None, None,
                          ad.const(coarse), None, None)


def test_loss_examples():
    r = np.random.default_rng(0)
    I = r.uniform(size=(10, 3))
    G = r.normal(size=(10, 32))
    loss, _, _ = compute_loss(_fake_out(I, I, G), I, G, None, 1 / 32, 32)
    assert loss.value == 0
    loss, rgb_t, feat_t = compute_loss(_fake_out(I + 0.1, I + 0.1, G), I, G, None, 1 / 32, 32)
    assert np.isclose(loss.value, 2 * 0.03) and np.isclose(rgb_t, 0.03) and feat_t == 0
    # feature term: lambda * mean over masked rays of the squared norm
    off = G + 0.5
    mask = np.arange(10) < 4
    loss, _, feat_t = compute_loss(_fake_out(I, I, off), I, G, mask, 1 / 32, 32)
    assert np.isclose(feat_t, 32 * 0.25) and np.isclose(loss.value, 0.25)
    perm = r.permutation(10)
    a, _, _ = compute_loss(_fake_out(I + 0.2, I, off), I, G, mask, 1 / 32, 32)
    b, _, _ = compute_loss(_fake_out((I + 0.2)[perm], I[perm], off[perm]), I[perm], G[perm], mask[perm], 1 / 32, 32)
    assert np.isclose(a.value, b.value, rtol=1e-12)


def test_config_schedule_and_round_trip():
    cfg = TrainConfig(steps=100)
    assert cfg.lambda_feat == 1 / 32
    assert np.isclose(cfg.lr_at(0), 5e-4) and np.isclose(cfg.lr_at(100), 5e-5)
    assert all(cfg.lr_at(s) >= cfg.lr_at(s + 1) for s in range(100))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _grads_after(store, pool, cfg, step):
    train_step(store, pool, cfg, step)
    return {k: float(np.abs(g).max()) for k, g in store.grads.items()}


@pytest.mark.parametrize("mode,unused", [("full", "pred."), ("predict", "corr.")])
def test_no_dead_parameters(scene16, mode, unused):
    cfg = tiny(mode=mode)
    store = init_params(seed=0)
    pool = ScenePool([scene16])
    _grads_after(store, pool, cfg, 0)  # moves the zero-initialised residual layer
    g = _grads_after(store, pool, cfg, 1)
    dead = [k for k, v in g.items() if v == 0 and not k.startswith(unused)]
    assert not dead


def test_short_training_reduces_loss(scene16):
    store, hist = train([scene16], tiny(steps=100, lr=2e-3, n_rays_per_step=64))
    losses = np.array([h["loss"] for h in hist])
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_resume_reproduces_losses(scene16, tmp_path):
    cfg = tiny(steps=6, checkpoint_every=3)
    _, full = train([scene16], cfg)

    class Stop(Exception):
        pass

    def stop(row):
        if row["step"] == 4:
            raise Stop

    with pytest.raises(Stop):
        train([scene16], cfg, out_dir=tmp_path, progress=stop)
    store, cfg2 = resume(tmp_path)
    assert store.step_count == 3 and cfg2 == cfg
    _, rest = train([scene16], cfg2, out_dir=tmp_path, store=store)
    assert [r["loss"] for r in rest] == [r["loss"] for r in full[3:]]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,rgb_loss,feat_loss,lr"


def test_threads_match_single_thread_closely(scene16):
    a = init_params(seed=0)
    b = init_params(seed=0)
    pool = ScenePool([scene16])
    la = train_step(a, pool, tiny(), 0)[0]
    lb = train_step(b, pool, tiny(threads=2), 0)[0]
    assert np.isclose(la, lb, rtol=1e-5)
