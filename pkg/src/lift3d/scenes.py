"""Procedural scenes with exact ground truth.

Scenes are a handful of spheres, axis-aligned boxes and square plane patches
inside the unit bounding sphere, each with a label and a view-independent
albedo. ``render_gt`` ray-traces them analytically, so depth and labels are
exact for any camera.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, bilinear_taps, look_at, pixel_directions, project, unproject
from .tensorio import Rng, SceneManifest, derive_stream, read_tensor, write_tensor

BACKGROUND = 0
MAX_LABELS = 8
_EPS_T = 1e-6


@dataclass
class Primitive:
    kind: str  # "sphere" | "box" | "plane"
    params: dict
    label: int
    albedo: dict  # {"kind": "flat"|"checker", "c0": rgb, "c1": rgb, "cell": float}

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Nearest positive hit distance per ray, +inf on a miss."""
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sphere":
                return _hit_sphere(o, d, np.asarray(self.params["center"]), self.params["radius"])
            if self.kind == "box":
                return _hit_box(o, d, np.asarray(self.params["min"]), np.asarray(self.params["max"]))
            if self.kind == "plane":
                return _hit_plane(o, d, np.asarray(self.params["point"]), np.asarray(self.params["normal"]),
                                  self.params["extent"])
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def color(self, x: np.ndarray) -> np.ndarray:
        c0 = np.asarray(self.albedo["c0"], dtype=np.float64)
        if self.albedo["kind"] == "flat":
            return np.broadcast_to(c0, x.shape).copy()
        c1 = np.asarray(self.albedo["c1"], dtype=np.float64)
        cell = self.albedo["cell"]
        parity = np.floor(x / cell).astype(np.int64).sum(axis=-1) % 2
        return np.where(parity[..., None] == 0, c0, c1)

    def corners(self) -> np.ndarray:
        """Points whose containment in the bounding sphere implies the primitive's."""
        p = self.params
        if self.kind == "sphere":
            c, r = np.asarray(p["center"]), p["radius"]
            return np.concatenate([c + r * np.eye(3), c - r * np.eye(3)])
        if self.kind == "box":
            lo, hi = np.asarray(p["min"]), np.asarray(p["max"])
            return np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                             for i in range(8)])
        a1, a2 = _plane_axes(np.asarray(p["normal"]))
        e = p["extent"]
        return np.array([np.asarray(p["point"]) + s1 * e * a1 + s2 * e * a2 for s1 in (-1, 1) for s2 in (-1, 1)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params), "label": self.label,
                "albedo": _jsonable(self.albedo)}

    @classmethod
    def from_dict(cls, d) -> "Primitive":
        return cls(d["kind"], d["params"], int(d["label"]), d["albedo"])


def _jsonable(d: dict) -> dict:
    return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else
                (float(v) if isinstance(v, (np.floating, float)) else v)) for k, v in d.items()}


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("...i,...i->...", d, oc)
    cc = np.einsum("...i,...i->...", oc, oc) - r * r
    disc = b * b - cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS_T, t0, np.where(t1 > _EPS_T, t1, np.inf))
    return np.where(disc >= 0, t, np.inf)


def _hit_box(o, d, lo, hi):
    inv = 1.0 / d
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    t = np.where(tmin > _EPS_T, tmin, tmax)
    return np.where((tmax >= tmin) & (t > _EPS_T), t, np.inf)


def _plane_axes(n):
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    a1 = np.cross(n, helper)
    a1 /= np.linalg.norm(a1)
    return a1, np.cross(n, a1)


def _hit_plane(o, d, p, n, extent):
    n = n / np.linalg.norm(n)
    dn = d @ n
    t = ((p - o) @ n) / np.where(np.abs(dn) > 1e-12, dn, np.nan)
    x = o + np.nan_to_num(t, nan=0.0, posinf=0.0, neginf=0.0)[..., None] * d
    a1, a2 = _plane_axes(n)
    inside = (np.abs((x - p) @ a1) <= extent) & (np.abs((x - p) @ a2) <= extent)
    ok = np.isfinite(t) & (t > _EPS_T) & inside
    return np.where(ok, t, np.inf)


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    seed: int
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def intersect(self, o, d):
        """(t, primitive index or -1) of the first hit for rays o + t d."""
        shape = d.shape[:-1]
        best = np.full(shape, np.inf)
        which = np.full(shape, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, i, which)
        return best, which

    def to_dict(self):
        return {"seed": self.seed, "center": self.center.tolist(), "radius": self.radius,
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d):
        return cls([Primitive.from_dict(p) for p in d["primitives"]], int(d["seed"]),
                   np.asarray(d["center"], dtype=np.float64), float(d["radius"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class GtView:
    rgb: np.ndarray  # H x W x 3, float32
    depth: np.ndarray  # H x W, camera z, +inf on background
    labels: np.ndarray  # H x W, int


def render_gt(scene: SyntheticScene, cam: Camera) -> GtView:
    H, W = cam.height, cam.width
    v, u = np.mgrid[0:H, 0:W]
    d = pixel_directions(cam, u, v)
    o = np.broadcast_to(cam.center, d.shape)
    t, which = scene.intersect(o, d)
    hit = which >= 0
    x = o + np.where(hit, t, 0.0)[..., None] * d
    rgb = np.zeros((H, W, 3))
    labels = np.full((H, W), BACKGROUND, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        sel = which == i
        if sel.any():
            rgb[sel] = prim.color(x[sel])
            labels[sel] = prim.label
    depth = np.where(hit, t * (d @ cam.forward), np.inf)
    return GtView(rgb.astype(np.float32), depth, labels)


# --------------------------------------------------------------------------
# generation


def _random_albedo(rng: Rng) -> dict:
    c0 = 0.15 + 0.7 * rng.uniform(3)
    if rng.uniform(1)[0] < 0.5:
        return {"kind": "flat", "c0": c0.tolist(), "c1": c0.tolist(), "cell": 1.0}
    # low-contrast checker: keeps edge aliasing under the warp noise floor
    delta = 0.06 * (2 * rng.uniform(3) - 1)
    c1 = np.clip(c0 + delta, 0.0, 1.0)
    return {"kind": "checker", "c0": c0.tolist(), "c1": c1.tolist(), "cell": float(0.3 + 0.3 * rng.uniform(1)[0])}


# primitives cluster toward the middle so the rig views are well covered
CENTER_PULL = 0.7


def _random_primitive(rng: Rng, label: int) -> Primitive:
    kind = ["sphere", "sphere", "box", "box", "plane"][rng.integers(0, 5)]
    albedo = _random_albedo(rng)
    if kind == "sphere":
        r = 0.3 + 0.3 * rng.uniform(1)[0]
        c = _in_ball(rng, CENTER_PULL * (1.0 - r))
        return Primitive("sphere", {"center": c.tolist(), "radius": float(r)}, label, albedo)
    if kind == "box":
        ext = 0.25 + 0.25 * rng.uniform(3)
        reach = 1.0 - np.linalg.norm(ext)
        c = _in_ball(rng, CENTER_PULL * max(reach, 0.0))
        return Primitive("box", {"min": (c - ext).tolist(), "max": (c + ext).tolist()}, label, albedo)
    e = 0.4 + 0.25 * rng.uniform(1)[0]
    c = _in_ball(rng, CENTER_PULL * max(1.0 - e * np.sqrt(2), 0.0))
    # mostly facing the rig (which looks along +z)
    n = np.array([0.6 * (2 * rng.uniform(1)[0] - 1), 0.6 * (2 * rng.uniform(1)[0] - 1), -1.0])
    return Primitive("plane", {"point": c.tolist(), "normal": (n / np.linalg.norm(n)).tolist(), "extent": float(e)},
                     label, albedo)


def _in_ball(rng: Rng, radius: float) -> np.ndarray:
    while True:
        p = 2 * rng.uniform(3) - 1
        if p @ p <= 1:
            return p * radius


def generate_scene(seed: int, n_primitives: int | None = None, image_size: int = 64,
                   min_coverage: float = 0.3, max_tries: int = 200) -> SyntheticScene:
    """Deterministic random scene; re-draws until the rig-center view is covered enough."""
    for attempt in range(max_tries):
        rng = Rng(seed, derive_stream(0x5CE7E, attempt))
        n = n_primitives if n_primitives is not None else rng.integers(3, 7)
        prims = [_random_primitive(rng, label=i + 1) for i in range(n)]
        scene = SyntheticScene(prims, seed)
        cam = rig_center_camera(scene, image_size)
        gt = render_gt(scene, cam)
        if np.isfinite(gt.depth).mean() >= min_coverage:
            return scene
    raise RuntimeError(f"could not generate a scene with coverage >= {min_coverage} for seed {seed}")


RIG_FACTOR = 3.0


def focal_for(scene: SyntheticScene, image_size: int) -> float:
    # bounding sphere fills the image width
    half_angle = np.arcsin(scene.radius / (RIG_FACTOR * scene.radius))
    return 1.0 * (image_size / 2) / np.tan(half_angle)


def rig_center_camera(scene: SyntheticScene, image_size: int = 64) -> Camera:
    r = RIG_FACTOR * scene.radius
    f = focal_for(scene, image_size)
    return look_at(scene.center + np.array([0.0, 0.0, -r]), scene.center, fx=f, width=image_size, height=image_size)


def camera_rig(scene: SyntheticScene, n_views: int, arc_degrees: float = 60.0, jitter_degrees: float = 5.0,
               image_size: int = 64) -> list[Camera]:
    """Forward-facing horizontal arc of cameras, all looking at the scene center."""
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    r = RIG_FACTOR * scene.radius
    f = focal_for(scene, image_size)
    rng = Rng(scene.seed, derive_stream(0x816))
    phis = np.deg2rad(np.linspace(-arc_degrees / 2, arc_degrees / 2, n_views))
    psis = np.deg2rad(jitter_degrees) * (2 * rng.uniform(n_views) - 1)
    cams = []
    for phi, psi in zip(phis, psis):
        eye = scene.center + r * np.array([np.sin(phi) * np.cos(psi), np.sin(psi), -np.cos(phi) * np.cos(psi)])
        cams.append(look_at(eye, scene.center, fx=f, width=image_size, height=image_size))
    return cams


def near_far(scene: SyntheticScene) -> tuple[float, float]:
    r = RIG_FACTOR * scene.radius
    return 0.5 * r, r + 1.5 * scene.radius


# --------------------------------------------------------------------------
# warping


def warp(map_a: np.ndarray, cam_a: Camera, cam_b: Camera, depth_a: np.ndarray, depth_b: np.ndarray,
         nearest: bool = False, rel_tol: float = 0.01):
    """Resample ``map_a`` onto the pixel grid of view b.

    Every pixel of b with finite depth is lifted to 3D and projected into a,
    where ``map_a`` is interpolated. The mask drops pixels whose projection
    leaves a, or where a sees a different surface (depth disagreement beyond
    ``rel_tol``, checked on every interpolation tap).
    Returns (warped H_b x W_b x C, mask H_b x W_b).
    """
    squeeze = map_a.ndim == 2
    if squeeze:
        map_a = map_a[..., None]
    Hb, Wb = cam_b.height, cam_b.width
    v, u = np.mgrid[0:Hb, 0:Wb]
    fin = np.isfinite(depth_b)
    x = unproject(cam_b, u, v, np.where(fin, depth_b, 1.0))
    pix, z, valid = project(cam_a, x)
    # snap roundoff so a self-warp lands exactly on pixel centres
    r = np.rint(pix)
    pix = np.where(np.abs(pix - r) < 1e-9, r, pix)
    idx, w, inb = bilinear_taps(pix, cam_a.height, cam_a.width, nearest=nearest)
    da = depth_a.reshape(-1)[idx]
    # roundoff can leave ~1e-15 weight on a neighbouring tap; ignore it
    used = w > 1e-6 if not nearest else np.zeros_like(w, dtype=bool)
    if nearest:
        used[..., 0] = True
    agree = np.abs(da - z[..., None]) <= rel_tol * z[..., None]
    ok = np.where(used, agree, True).all(axis=-1)
    mask = fin & valid & inb & ok
    flat = map_a.reshape(-1, map_a.shape[-1]).astype(np.float64)
    out = np.einsum("...k,...kc->...c", w, flat[idx])
    out[~mask] = 0
    return (out[..., 0] if squeeze else out), mask


# --------------------------------------------------------------------------
# on-disk scenes


@dataclass
class SceneData:
    """A loaded scene directory: cameras, GT maps and cached operator features."""

    scene_id: str
    seed: int
    cameras: list[Camera]
    rgb: np.ndarray  # V x H x W x 3
    depth: np.ndarray  # V x H x W
    labels: np.ndarray  # V x H x W (int)
    features: dict[str, np.ndarray]  # operator id -> V x H x W x D'
    near: float
    far: float
    scene: SyntheticScene | None = None
    root: Path | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def centers(self) -> np.ndarray:
        return np.stack([c.center for c in self.cameras])


def build_scene(seed: int, n_views: int = 16, image_size: int = 64, operators=(), arc_degrees=60.0) -> SceneData:
    from .operators import encode_views

    scene = generate_scene(seed, image_size=image_size)
    cams = camera_rig(scene, n_views, arc_degrees=arc_degrees, image_size=image_size)
    views = [render_gt(scene, c) for c in cams]
    near, far = near_far(scene)
    data = SceneData(f"scene_{seed:06d}", seed, cams, np.stack([v.rgb for v in views]),
                     np.stack([v.depth for v in views]), np.stack([v.labels for v in views]), {}, near, far, scene)
    for op_id in operators:
        data.features[op_id] = encode_views(op_id, data)
    return data


def write_scene_dir(data: SceneData, out) -> None:
    out = Path(out)
    (out / "views").mkdir(parents=True, exist_ok=True)
    views = []
    for i in range(data.n_views):
        rec = {"rgb": f"views/{i:03d}_rgb.lt3d", "depth": f"views/{i:03d}_depth.lt3d",
               "labels": f"views/{i:03d}_labels.lt3d", "features": {}}
        write_tensor(out / rec["rgb"], data.rgb[i].astype(np.float32))
        write_tensor(out / rec["depth"], data.depth[i].astype(np.float32))
        write_tensor(out / rec["labels"], data.labels[i].astype(np.float32))
        for op_id, feats in sorted(data.features.items()):
            rec["features"][op_id] = f"views/{i:03d}_{op_id}.lt3d"
            write_tensor(out / rec["features"][op_id], feats[i].astype(np.float32))
        views.append(rec)
    extra = {"near": data.near, "far": data.far}
    if data.scene is not None:
        extra["scene"] = data.scene.to_dict()
    SceneManifest(data.scene_id, data.seed, [c.to_dict() for c in data.cameras], views, extra).write(out / "manifest.json")


def load_scene_dir(root) -> SceneData:
    root = Path(root)
    man = SceneManifest.read(root / "manifest.json")
    cams = [Camera.from_dict(c) for c in man.cameras]
    rgb, depth, labels = [], [], []
    feats: dict[str, list] = {}
    for cam, rec in zip(cams, man.views):
        r = read_tensor(root / rec["rgb"])
        if r.shape != (cam.height, cam.width, 3):
            raise ValueError(f"{rec['rgb']}: shape {r.shape} does not match camera {cam.height}x{cam.width}")
        rgb.append(r)
        depth.append(read_tensor(root / rec["depth"]).astype(np.float64))
        labels.append(read_tensor(root / rec["labels"]).astype(np.int64))
        for op_id, p in rec.get("features", {}).items():
            feats.setdefault(op_id, []).append(read_tensor(root / p))
    scene = SyntheticScene.from_dict(man.extra["scene"]) if "scene" in man.extra else None
    return SceneData(man.scene_id, man.seed, cams, np.stack(rgb), np.stack(depth), np.stack(labels),
                     {k: np.stack(v) for k, v in feats.items()}, float(man.extra["near"]), float(man.extra["far"]),
                     scene, root)
