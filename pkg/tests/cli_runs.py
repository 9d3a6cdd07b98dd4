"""Run every CLI subcommand twice on a tiny pipeline and hash the outputs."""

import hashlib
import json
from pathlib import Path

from lift3d.cli import main

FAST = ["--n-coarse", "4", "--n-fine", "4"]


def digest(path: Path) -> str:
    """Hash of every output file; run configs are hashed without their --out path."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    h = hashlib.sha256()
    for f in files:
        h.update(str(f.relative_to(path.parent if path.is_file() else path)).encode())
        data = f.read_bytes()
        if f.name.endswith("run_config.json"):
            cfg = json.loads(data)
            cfg = {k: v for k, v in cfg.items() if k not in ("out", "scene", "scenes", "checkpoint", "features")}
            data = json.dumps(cfg, sort_keys=True).encode()
        h.update(data)
    return h.hexdigest()


def run_all(root: Path) -> dict:
    """Two independent runs of each subcommand; returns name -> (digest a, digest b)."""
    root = Path(root)
    res = {}

    def twice(name, argv_for, target_for):
        ds = []
        for run in ("a", "b"):
            rc = main(argv_for(run))
            assert rc == 0, f"{name} exited {rc}"
            ds.append(digest(target_for(run)))
        res[name] = tuple(ds)

    twice("gen-scene", lambda r: ["gen-scene", "--seed", "7", "--views", "13", "--size", "24",
                                  "--operators", "colorquant", "--out", str(root / r / "scene")],
          lambda r: root / r / "scene")
    scene = str(root / "a" / "scene")
    twice("train", lambda r: ["train", "--scenes", scene, "--operators", "colorquant", "--steps", "2", "--rays", "16",
                              "--n-coarse", "4", "--n-fine", "4", "--out", str(root / r / "models" / "model_full")],
          lambda r: root / r / "models" / "model_full")
    ck = str(root / "a" / "models")
    twice("render", lambda r: ["render", "--scene", scene, "--checkpoint", ck, "--operator", "labelpaint",
                               "--target-view", "3", *FAST, "--out", str(root / r / "render")],
          lambda r: root / r / "render")
    twice("lift", lambda r: ["lift", "--scene", scene, "--checkpoint", ck, "--operator", "stylelite",
                             "--targets", "0,1", *FAST, "--out", str(root / r / "lift")],
          lambda r: root / r / "lift")
    twice("eval", lambda r: ["eval", "--scene", scene, "--checkpoint", ck, "--operator", "labelpaint",
                             "--targets", "0,1", "--baseline-2d", *FAST, "--out", str(root / r / "eval" / "rep.json")],
          lambda r: root / r / "eval")
    twice("ablate", lambda r: ["ablate", "--scenes", scene, "--checkpoint", ck, "--modes", "full",
                               "--operators", "labelpaint", "--targets", "0", *FAST, "--out", str(root / r / "abl")],
          lambda r: root / r / "abl")
    twice("viz-pca", lambda r: ["viz-pca", "--scene", scene, "--operator", "colorquant", "--view", "2",
                                "--out", str(root / r / "pca" / "pca.png")],
          lambda r: root / r / "pca")
    return res
