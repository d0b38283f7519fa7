"""Pseudo 3D labels from a depth map: point cloud, ground plane, per-box depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box2D, CameraIntrinsics

KAPPA_VISIBLE = 1.0
KAPPA_FALLBACK = 0.05
DEFAULT_NORMAL = np.array([0.0, -1.0, 0.0])
EDGE_MARGIN = 10


class DimensionMismatch(ValueError):
    pass


class DegenerateCloud(ValueError):
    pass


class NoValidDepth(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal + self.offset


@dataclass(frozen=True)
class RansacConfig:
    iters: int = 256
    inlier_tol: float = 0.05
    min_inlier_frac: float = 0.2
    min_mask_frac: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class GroundEstimate:
    normal: np.ndarray
    kappa: float
    inlier_fraction: float

    def to_dict(self) -> dict:
        return {"normal": [float(x) for x in self.normal], "kappa": float(self.kappa),
                "inlier_fraction": float(self.inlier_fraction)}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundEstimate":
        return cls(np.array(d["normal"], dtype=float), float(d["kappa"]),
                   float(d["inlier_fraction"]))


def depth_to_pointcloud(depth: np.ndarray, cam: CameraIntrinsics, mask=None) -> np.ndarray:
    """Back-project every valid pixel (and mask-true pixel, if given) to an (N, 3) cloud.

    Pixel (u, v) is column u, row v; NaN and non-positive depths are skipped.
    """
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (cam.height, cam.width):
        raise DimensionMismatch(f"depth {depth.shape} vs camera {(cam.height, cam.width)}")
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise DimensionMismatch(f"mask {mask.shape} vs depth {depth.shape}")
        valid &= mask
    v, u = np.nonzero(valid)
    z = depth[v, u]
    return np.stack([(u - cam.cx) * z / cam.f, (v - cam.cy) * z / cam.f, z], axis=-1)


def _fit_plane_lstsq(pts: np.ndarray) -> Plane:
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[-1]
    return Plane(n, float(-n @ centroid))


def _is_collinear(pts: np.ndarray) -> bool:
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] == 0 or s[1] <= 1e-9 * s[0]


def ransac_plane(pc: np.ndarray, seed: int = 0, iters: int = 256,
                 inlier_tol: float = 0.05) -> tuple[Plane, float]:
    """Largest plane by inlier count over ``iters`` random 3-point samples.

    The winning hypothesis is refit by least squares on its inliers, and the
    returned inlier fraction is measured against the refit plane.

    Raises:
        DegenerateCloud: fewer than 3 points, or all points collinear.
    """
    pc = np.asarray(pc, dtype=float)
    n_pts = len(pc)
    if n_pts < 3 or _is_collinear(pc):
        raise DegenerateCloud(f"cannot fit a plane to {n_pts} points")
    rng = np.random.default_rng(seed)
    # three distinct indices per hypothesis
    i0 = rng.integers(0, n_pts, size=iters)
    i1 = (i0 + 1 + rng.integers(0, n_pts - 1, size=iters)) % n_pts
    i2 = rng.integers(0, n_pts - 2, size=iters)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)

    p0, p1, p2 = pc[i0], pc[i1], pc[i2]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] /= norms[ok, None]
    offsets = -np.sum(normals * p0, axis=1)

    best_count, best = -1, None
    chunk = max(1, 2_000_000 // n_pts)
    for start in range(0, iters, chunk):
        sl = slice(start, start + chunk)
        d = np.abs(pc @ normals[sl].T + offsets[sl])
        counts = np.where(ok[sl], np.count_nonzero(d <= inlier_tol, axis=0), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best = int(counts[k]), start + k
    if best is None or best_count < 3:
        raise DegenerateCloud("no non-degenerate sample found")

    inliers = np.abs(pc @ normals[best] + offsets[best]) <= inlier_tol
    plane = _fit_plane_lstsq(pc[inliers])
    frac = np.count_nonzero(np.abs(plane.distance(pc)) <= inlier_tol) / n_pts
    return plane, float(frac)


def orient_up(normal) -> np.ndarray:
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    return -normal if normal[1] > 0 else normal


def estimate_ground(depth: np.ndarray, cam: CameraIntrinsics, mask=None,
                    cfg: RansacConfig = RansacConfig()) -> GroundEstimate:
    """Ground normal and confidence from the masked depth cloud.

    Falls back to the default up normal with the low confidence whenever the
    mask is missing or too small, RANSAC fails, or too few points are inliers.
    """
    depth = np.asarray(depth)
    if depth.shape != (cam.height, cam.width):
        raise DimensionMismatch(f"depth {depth.shape} vs camera {(cam.height, cam.width)}")
    fallback = GroundEstimate(DEFAULT_NORMAL.copy(), KAPPA_FALLBACK, 0.0)
    if mask is None:
        return fallback
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise DimensionMismatch(f"mask {mask.shape} vs depth {depth.shape}")
    if mask.mean() < cfg.min_mask_frac:
        return fallback
    pc = depth_to_pointcloud(depth, cam, mask)
    try:
        plane, frac = ransac_plane(pc, cfg.seed, cfg.iters, cfg.inlier_tol)
    except DegenerateCloud:
        return fallback
    if frac < cfg.min_inlier_frac:
        return GroundEstimate(orient_up(plane.normal), KAPPA_FALLBACK, frac)
    return GroundEstimate(orient_up(plane.normal), KAPPA_VISIBLE, frac)


def sample_depth_at_center(depth: np.ndarray, box: Box2D, margin: int = EDGE_MARGIN) -> float:
    """Depth at the box center pixel, clamped to ``margin`` pixels inside the image.

    A NaN center falls back to the median of the valid depths in the
    surrounding 5x5 window.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    cu, cv = box.center
    # round half up, not to even
    x = int(np.clip(np.floor(cu + 0.5), margin, w - 1 - margin))
    y = int(np.clip(np.floor(cv + 0.5), margin, h - 1 - margin))
    z = depth[y, x]
    if np.isfinite(z) and z > 0:
        return float(z)
    win = depth[max(y - 2, 0):y + 3, max(x - 2, 0):x + 3]
    win = win[np.isfinite(win) & (win > 0)]
    if win.size == 0:
        raise NoValidDepth(f"no valid depth near pixel ({x}, {y})")
    return float(np.median(win))
