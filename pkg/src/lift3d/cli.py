"""Command line entry point: ``lift3d <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("lift3d")


class CliError(Exception):
    """A fault reported as a single-line diagnostic with exit code 1."""


# --------------------------------------------------------------------------
# helpers


def _csv(s: str) -> list[str]:
    return [x for x in (p.strip() for p in s.split(",")) if x]


def _write_run_config(out: Path, args, extra=None, name="run_config.json"):
    """Log the fully resolved configuration of this run next to its outputs."""
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    if extra:
        cfg.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _save_png(path: Path, img: np.ndarray):
    from PIL import Image

    a = np.clip(np.nan_to_num(np.asarray(img, dtype=np.float64)), 0.0, 1.0)
    Image.fromarray((a * 255 + 0.5).astype(np.uint8)).save(path, format="PNG", optimize=False)


def _label_png(path: Path, labels: np.ndarray):
    from .operators import PALETTE

    _save_png(path, PALETTE[np.asarray(labels) % len(PALETTE)])


def _scene_dirs(root: Path) -> list[Path]:
    if (root / "manifest.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists()) if root.is_dir() else []
    if not dirs:
        raise CliError(f"no scene directories under {root}")
    return dirs


def _load_scene(path: Path):
    from .scenes import load_scene_dir

    if not (path / "manifest.json").exists():
        raise CliError(f"{path}: not a scene directory (manifest.json missing)")
    return load_scene_dir(path)


def _checkpoint_for(path: Path, mode: str | None = None) -> Path:
    """Resolve a checkpoint: a checkpoint dir, a training out dir, or a root of per-mode models."""
    cands = []
    if mode is not None:
        cands.append(path / f"model_{mode}" / "checkpoint")
    cands += [path, path / "checkpoint"]
    for c in cands:
        if (c / "params.json").exists():
            return c
    raise CliError(f"no checkpoint found at {path}" + (f" for mode {mode}" if mode else ""))


def _load_params(path: Path, mode: str | None = None):
    from .autodiff import load_checkpoint

    store, meta = load_checkpoint(_checkpoint_for(path, mode))
    return store, meta


def _render_config(args, mode: str, meta: dict):
    from .desk import desk_render_config

    tc = meta.get("train_config", {})
    kw = {}
    for k in ("n_coarse", "n_fine", "prune_eps", "fetch", "fine_pass", "blend_rgb"):
        if k in tc:
            kw[k] = tc[k]
    for k in ("n_coarse", "n_fine"):
        if getattr(args, k, None) is not None:
            kw[k] = getattr(args, k)
    return desk_render_config(mode, **kw)


def _targets(arg: str, n_views: int) -> list[int]:
    if arg == "all":
        return list(range(n_views))
    try:
        ts = [int(x) for x in _csv(arg)]
    except ValueError:
        raise CliError(f"bad --targets {arg!r}; use 'all' or comma-separated view indices") from None
    bad = [t for t in ts if not 0 <= t < n_views]
    if bad:
        raise CliError(f"target view(s) {bad} out of range for a {n_views}-view scene")
    return ts


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args):
    from .operators import OPERATORS
    from .scenes import build_scene, write_scene_dir

    ops = _csv(args.operators)
    unknown = [o for o in ops if o not in OPERATORS]
    if unknown:
        raise CliError(f"unknown operator(s) {unknown}")
    out = Path(args.out)
    seeds = [args.seed + i for i in range(args.count)]
    for s in seeds:
        data = build_scene(s, n_views=args.views, image_size=args.size, operators=ops)
        write_scene_dir(data, out if args.count == 1 else out / data.scene_id)
    _write_run_config(out, args, {"seeds": seeds})
    log.info("wrote %d scene(s) to %s", len(seeds), out)


def cmd_train(args):
    from .scenes import load_scene_dir
    from .training import TrainConfig, train

    scenes = [load_scene_dir(p) for p in _scene_dirs(Path(args.scenes))]
    out = Path(args.out)
    kw = dict(steps=args.steps, seed=args.seed, operators=tuple(_csv(args.operators)), mode=args.mode,
              n_rays_per_step=args.rays, n_coarse=args.n_coarse, n_fine=args.n_fine, prune_eps=args.prune_eps,
              threads=args.threads, checkpoint_every=args.checkpoint_every, lr=args.lr)
    if args.feat_weight is not None:
        kw["feat_weight"] = args.feat_weight
    cfg = TrainConfig(**kw)
    store = None
    if args.resume and (out / "checkpoint" / "params.json").exists():
        from .training import resume

        store, cfg_saved = resume(out)
        if cfg_saved.to_dict() != cfg.to_dict():
            raise CliError("--resume: checkpoint was trained with a different configuration")
    _write_run_config(out, args, {"train_config": cfg.to_dict(), "scenes": [s.scene_id for s in scenes]})
    train(scenes, cfg, out_dir=out, store=store)


def _source_indices(data, target_center, n, exclude=None):
    c = data.centers()
    order = np.argsort(np.linalg.norm(c - target_center, axis=1), kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return np.sort(order[:n])


def cmd_render(args):
    from .evaluate import decode_map, operator_features
    from .geometry import Camera
    from .operators import get_operator
    from .renderer import SourceViews, render_view
    from .tensorio import write_tensor

    data = _load_scene(Path(args.scene))
    store, meta = _load_params(Path(args.checkpoint), args.mode)
    op = get_operator(args.operator)
    if args.target_view.isdigit():
        t = int(args.target_view)
        if t >= data.n_views:
            raise CliError(f"target view {t} out of range for a {data.n_views}-view scene")
        cam, exclude = data.cameras[t], t
    else:
        cam = Camera.from_dict(json.loads(Path(args.target_view).read_text()))
        exclude = None
    src_idx = _source_indices(data, cam.center, args.n_sources, exclude)
    D = store.values["pred.l2.b"].shape[0]
    feats = operator_features(data, args.operator, D)
    src = SourceViews([data.cameras[i] for i in src_idx], data.rgb[src_idx], feats[src_idx])
    cfg = _render_config(args, args.mode, meta)
    r = render_view(cam, src, store, cfg, data.near, data.far, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_png(out / "rgb.png", r["rgb"])
    write_tensor(out / "feature.lt3d", r["feat"].astype(np.float32))
    dec = decode_map(op, r["feat"], r["acc"])
    if op.output_kind == "labels":
        write_tensor(out / "labels.lt3d", dec.astype(np.float32))
        _label_png(out / "labels.png", dec)
    else:
        _save_png(out / "decoded.png", dec)
    _write_run_config(out, args, {"render_config": vars(cfg), "sources": src_idx.tolist()})


def cmd_lift(args):
    from .evaluate import consistency, lift_views, mean_iou
    from .operators import get_operator, to_metric_space
    from .tensorio import write_tensor

    data = _load_scene(Path(args.scene))
    store, meta = _load_params(Path(args.checkpoint), args.mode)
    op = get_operator(args.operator)
    targets = _targets(args.targets, data.n_views)
    cfg = _render_config(args, args.mode, meta)
    lifted = lift_views(data, store, op, targets, args.n_sources, cfg, args.seed, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in lifted:
        t = r["target"]
        write_tensor(out / f"view_{t:03d}_feature.lt3d", r["feat"].astype(np.float32))
        if op.output_kind == "labels":
            write_tensor(out / f"view_{t:03d}_labels.lt3d", r["decoded"].astype(np.float32))
            _label_png(out / f"view_{t:03d}_labels.png", r["decoded"])
        else:
            _save_png(out / f"view_{t:03d}_decoded.png", r["decoded"])
    report = {"operator": op.operator_id, "targets": targets}
    if len(targets) >= 2:
        nearest = op.output_kind == "labels"
        report["warped_rmse_3d"] = consistency([to_metric_space(op, r["decoded"]) for r in lifted], data,
                                               nearest=nearest, views=targets)
    if op.output_kind == "labels":
        report["iou_3d"] = float(np.mean([mean_iou(r["decoded"], data.labels[r["target"]]) for r in lifted]))
    (out / "consistency.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, args, {"render_config": vars(cfg)})


def _modes(arg: str) -> list[str]:
    from .renderer import MODES

    modes = list(MODES) if arg == "all" else _csv(arg)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CliError(f"unknown mode(s) {bad}; known: {list(MODES)}")
    return modes


def _eval_rows(data, ckpt: Path, op_id: str, modes, args, baseline: bool, targets):
    from .evaluate import evaluate_scene

    rows = []
    for mode in modes:
        store, meta = _load_params(ckpt, mode)
        cfg = _render_config(args, mode, meta)
        row = evaluate_scene(data, store, op_id, mode, args.n_sources, targets, cfg, baseline=baseline,
                             seed=args.seed, threads=args.threads)
        row.update(mode=mode, operator_id=op_id)
        rows.append(row)
    return rows


def cmd_eval(args):
    data = _load_scene(Path(args.scene))
    targets = _targets(args.targets, data.n_views)
    rows = _eval_rows(data, Path(args.checkpoint), args.operator, _modes(args.modes), args, args.baseline_2d,
                      targets)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"scene_id": data.scene_id, "rows": rows}, indent=2, sort_keys=True) + "\n")
    _write_run_config(out.parent, args, name=f"{out.stem}.run_config.json")


def cmd_ablate(args):
    scenes = [_load_scene(p) for p in _scene_dirs(Path(args.scenes))]
    modes = _modes(args.modes)
    ops = _csv(args.operators)
    table = []
    for op_id in ops:
        for mode in modes:
            vals = []
            for data in scenes:
                targets = _targets(args.targets, data.n_views)
                vals.append(_eval_rows(data, Path(args.checkpoint), op_id, [mode], args, False, targets)[0])
            table.append({"operator_id": op_id, "mode": mode,
                          "feature_mse": float(np.mean([v["feature_mse"] for v in vals])),
                          "psnr": float(np.mean([v["psnr"] for v in vals]))})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, args)


def cmd_viz_pca(args):
    from .evaluate import pca_viz
    from .operators import adapt_dim
    from .tensorio import read_tensor

    if args.features:
        feat = read_tensor(args.features)
    else:
        if args.scene is None or args.operator is None:
            raise CliError("viz-pca needs --features, or --scene with --operator")
        data = _load_scene(Path(args.scene))
        from .evaluate import operator_features

        if args.view >= data.n_views:
            raise CliError(f"view {args.view} out of range")
        feat = operator_features(data, args.operator, 32)[args.view]
    if feat.ndim != 3:
        raise CliError(f"expected an H x W x D feature map, got shape {feat.shape}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(out, pca_viz(adapt_dim(feat, feat.shape[-1])))
    _write_run_config(out.parent, args, name=f"{out.stem}.run_config.json")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="1 = fully deterministic")

    render_opts = argparse.ArgumentParser(add_help=False)
    render_opts.add_argument("--n-sources", type=int, default=8)
    render_opts.add_argument("--n-coarse", type=int, default=None)
    render_opts.add_argument("--n-fine", type=int, default=None)

    p = argparse.ArgumentParser(prog="lift3d", description="Lift per-view 2D operator features to 3D.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene directory")
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--count", type=int, default=1, help="scenes with seeds seed..seed+count-1")
    s.add_argument("--operators", default="colorquant,gradfeat", help="operators to pre-encode")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("train", parents=[common], help="train on a directory of scenes")
    s.add_argument("--scenes", required=True)
    s.add_argument("--operators", default="colorquant,gradfeat")
    s.add_argument("--steps", type=int, default=20000)
    s.add_argument("--mode", default="full", choices=["full", "no_correction", "single_stage", "predict"])
    s.add_argument("--rays", type=int, default=96)
    s.add_argument("--n-coarse", type=int, default=16)
    s.add_argument("--n-fine", type=int, default=32)
    s.add_argument("--prune-eps", type=float, default=0.03)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--feat-weight", type=float, default=None, help="default 1/D")
    s.add_argument("--checkpoint-every", type=int, default=1000)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common, render_opts], help="render one target view")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--operator", required=True)
    s.add_argument("--target-view", required=True, help="view index or camera JSON file")
    s.add_argument("--mode", default="full", choices=["full", "no_correction", "single_stage", "predict"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("lift", parents=[common, render_opts], help="lift an operator to consistent outputs")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--operator", required=True)
    s.add_argument("--targets", default="all")
    s.add_argument("--mode", default="full", choices=["full", "no_correction", "single_stage", "predict"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("eval", parents=[common, render_opts], help="metrics for one scene and operator")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--operator", required=True)
    s.add_argument("--modes", default="full")
    s.add_argument("--targets", default="all")
    s.add_argument("--baseline-2d", action="store_true")
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common, render_opts], help="feature MSE per mode and operator")
    s.add_argument("--scenes", required=True)
    s.add_argument("--checkpoint", required=True, help="root holding model_<mode>/ directories")
    s.add_argument("--modes", default="all")
    s.add_argument("--operators", default="labelpaint,stylelite")
    s.add_argument("--targets", default="0,5,10,15")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("viz-pca", parents=[common], help="PCA image of a feature map")
    s.add_argument("--features", help="H x W x D tensor file")
    s.add_argument("--scene")
    s.add_argument("--operator")
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--out", required=True, help="PNG path")
    s.set_defaults(func=cmd_viz_pca)
    return p


def _setup_logging():
    level = os.environ.get("LIFT3D_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)  # exits 2 on misuse
    if args.threads < 1:
        build_parser().error("--threads must be >= 1")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("lift3d: interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # every fault becomes one diagnostic line
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"lift3d: error: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
