"""Pinhole cameras, rays, projection and map fetching.

Convention: x_cam = R @ x_world + t, the camera looks down +z, image x grows
right and y grows down, pixel centers sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5 or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[2].copy()

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": [float(v) for v in self.R.ravel()], "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["R"]), np.array(d["t"]))


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height, cx=None, cy=None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(fx, fy if fy is not None else fx,
                  (width - 1) / 2 if cx is None else cx,
                  (height - 1) / 2 if cy is None else cy,
                  width, height, R, -R @ eye)


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    near: float
    far: float

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.dir)


def project(cam: Camera, x):
    """Project world points (..., 3) to (pixel (..., 2), depth (...), valid (...))."""
    x = np.asarray(x, dtype=np.float64)
    xc = x @ cam.R.T + cam.t
    z = xc[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    u = cam.fx * xc[..., 0] / zs + cam.cx
    v = cam.fy * xc[..., 1] / zs + cam.cy
    valid = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return np.stack([u, v], axis=-1), z, valid


def pixel_directions(cam: Camera, u, v) -> np.ndarray:
    """Unit world-space directions for pixel coordinates (broadcast shapes)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(np.broadcast(u, v).shape)], axis=-1)
    d = d_cam @ cam.R  # R^T applied on the right
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(cam: Camera, u, v, near, far) -> Ray:
    return Ray(cam.center, pixel_directions(cam, u, v), near, far)


def rays_for_pixels(cam: Camera, pix_idx: np.ndarray):
    """Origins (R, 3) and directions (R, 3) for flat pixel indices."""
    v, u = np.divmod(np.asarray(pix_idx), cam.width)
    d = pixel_directions(cam, u, v)
    return np.broadcast_to(cam.center, d.shape).copy(), d


def unproject(cam: Camera, u, v, depth) -> np.ndarray:
    """World points for pixels at camera-frame z = depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    xc = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=-1)
    return (xc - cam.t) @ cam.R


def bilinear_taps(pixel, height: int, width: int, nearest: bool = False):
    """Flat indices (..., 4) and weights (..., 4) of the lattice taps for `pixel`.

    Out-of-bounds pixels get valid=False and all-zero weights.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    u, v = pixel[..., 0], pixel[..., 1]
    valid = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    u = np.clip(np.where(valid, u, 0.0), 0, width - 1)
    v = np.clip(np.where(valid, v, 0.0), 0, height - 1)
    if nearest:
        ui = np.floor(u + 0.5).astype(np.int64).clip(0, width - 1)
        vi = np.floor(v + 0.5).astype(np.int64).clip(0, height - 1)
        idx = np.repeat((vi * width + ui)[..., None], 4, axis=-1)
        w = np.zeros(idx.shape)
        w[..., 0] = 1.0
    else:
        u0 = np.minimum(np.floor(u).astype(np.int64), max(width - 2, 0))
        v0 = np.minimum(np.floor(v).astype(np.int64), max(height - 2, 0))
        u1 = np.minimum(u0 + 1, width - 1)
        v1 = np.minimum(v0 + 1, height - 1)
        a = u - u0
        b = v - v0
        idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=-1)
        w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
    w = w * valid[..., None]
    return idx, w, valid


def fetch_bilinear(fmap: np.ndarray, pixel, nearest: bool = False):
    """Interpolate an H x W x C map at continuous pixel positions (..., 2).

    Returns (values (..., C), valid (...)); invalid fetches are exact zeros.
    """
    fmap = np.asarray(fmap)
    if fmap.ndim != 3:
        raise ValueError(f"map must be H x W x C, got shape {fmap.shape}")
    H, W, C = fmap.shape
    idx, w, valid = bilinear_taps(pixel, H, W, nearest)
    flat = fmap.reshape(H * W, C)
    val = np.einsum("...k,...kc->...c", w.astype(fmap.dtype), flat[idx])
    return val, valid
