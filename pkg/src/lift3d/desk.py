"""The desk-scale experiment profile: fixed scene seeds, training schedule and caches.

The acceptance suite, the CLI ``ablate`` command and the demos all use the
models trained here, so each one is trained once and cached on disk.
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

from .autodiff import load_checkpoint
from .renderer import MODES, RenderConfig
from .scenes import SceneData, build_scene
from .training import TrainConfig, train

log = logging.getLogger(__name__)

TRAIN_SEEDS = tuple(range(1000, 1020))
HELDOUT_SEEDS = (2000, 2001)
N_VIEWS = 16
IMAGE_SIZE = 64

# One CPU core has to fit 20k steps in under an hour, so rays and samples per
# step are cut well below the full-size defaults of TrainConfig.
DESK_TRAIN = dict(steps=20000, n_rays_per_step=96, n_coarse=16, n_fine=32, prune_eps=0.03, seed=0,
                  checkpoint_every=1000, log_every=50)


def default_root() -> Path:
    return Path(os.environ.get("LIFT3D_ARTIFACTS", Path(__file__).resolve().parents[2] / "artifacts"))


def desk_train_config(mode: str = "full", **overrides) -> TrainConfig:
    kw = dict(DESK_TRAIN, mode=mode)
    kw.update(overrides)
    return TrainConfig(**kw)


def desk_render_config(mode: str = "full", **overrides) -> RenderConfig:
    cfg = desk_train_config(mode)
    kw = dict(n_coarse=cfg.n_coarse, n_fine=cfg.n_fine, mode=mode, prune_eps=cfg.prune_eps)
    kw.update(overrides)
    return RenderConfig(**kw)


def training_scenes(seeds=TRAIN_SEEDS) -> list[SceneData]:
    return [build_scene(s, n_views=N_VIEWS, image_size=IMAGE_SIZE, operators=("colorquant", "gradfeat"))
            for s in seeds]


def heldout_scenes(seeds=HELDOUT_SEEDS, operators=()) -> list[SceneData]:
    return [build_scene(s, n_views=N_VIEWS, image_size=IMAGE_SIZE, operators=operators) for s in seeds]


def model_dir(mode: str, root=None) -> Path:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return Path(root or default_root()) / f"model_{mode}"


def is_trained(mode: str, root=None) -> bool:
    d = model_dir(mode, root)
    p = d / "train_summary.json"
    if not p.exists():
        return False
    return json.loads(p.read_text()).get("steps_done") == desk_train_config(mode).steps


def ensure_model(mode: str = "full", root=None, scenes=None, progress=None):
    """Load the cached desk model for ``mode``, training (or resuming) it if needed.

    Returns (ParamStore, summary dict with CPU time and step count).
    """
    d = model_dir(mode, root)
    cfg = desk_train_config(mode)
    if not is_trained(mode, root):
        store = None
        if (d / "checkpoint" / "params.json").exists():
            store, meta = load_checkpoint(d / "checkpoint")
            if meta.get("train_config") != cfg.to_dict():
                log.warning("cached checkpoint for %s has a different config; retraining", mode)
                store = None
        prev = 0.0
        if store is not None and (d / "cpu_seconds.txt").exists():
            prev = float((d / "cpu_seconds.txt").read_text())
        scenes = scenes or training_scenes()
        t0 = time.process_time()

        def prog(row):
            if progress is not None:
                progress(row)
            if (row["step"] + 1) % cfg.checkpoint_every == 0:
                (d / "cpu_seconds.txt").write_text(repr(prev + time.process_time() - t0))

        d.mkdir(parents=True, exist_ok=True)
        (d / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        store, _ = train(scenes, cfg, out_dir=d, store=store, progress=prog)
        cpu = prev + time.process_time() - t0
        (d / "train_summary.json").write_text(json.dumps({"mode": mode, "steps_done": store.step_count,
                                                          "cpu_seconds": cpu}, indent=2))
    store, _ = load_checkpoint(d / "checkpoint")
    return store, json.loads((d / "train_summary.json").read_text())
