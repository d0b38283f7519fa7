"""Pinhole camera, rotation representations and cube projection.

Conventions: camera frame is x right, y down, z forward. A cube's body frame
puts width along x, height along y and length along z, so the cube's local
"up" is -y. Rotations are stored allocentrically (relative to the viewing ray
through the cube center) and made egocentric when corners are generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_MIN = 1e-3

# Corner k uses sign (-1)**(1 - bit) per axis: bit0 -> w, bit1 -> h, bit2 -> l.
CORNER_SIGNS = np.array(
    [[1.0 if (k >> axis) & 1 else -1.0 for axis in range(3)] for k in range(8)]
)

LOCAL_UP = np.array([0.0, -1.0, 0.0])


class DegenerateRotation(ValueError):
    pass


class BehindCamera(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["f"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Box2D":
        return cls(*(float(x) for x in a))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)


@dataclass
class Cube:
    """The 13-parameter cube: projected center, depth, dimensions, 6D rotation, uncertainty.

    ``rot`` holds the two unnormalized columns ``a1 = rot[:3]`` and
    ``a2 = rot[3:]`` of the allocentric rotation.
    """

    u: float
    v: float
    z: float
    w: float
    h: float
    l: float
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0, 1.0, 0]))
    mu: float = 0.0

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float).reshape(6)
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError("cube dimensions must be positive")
        if not self.z > 0:
            raise ValueError("cube depth must be positive")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.w, self.h, self.l])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.u, self.v, self.z, self.w, self.h, self.l], self.rot, [self.mu]])

    @classmethod
    def from_vector(cls, x) -> "Cube":
        x = np.asarray(x, dtype=float)
        return cls(*(float(t) for t in x[:6]), rot=x[6:12].copy(), mu=float(x[12]))

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "z": self.z, "w": self.w, "h": self.h,
                "l": self.l, "rot6d": [float(t) for t in self.rot], "mu": self.mu}

    @classmethod
    def from_dict(cls, d: dict) -> "Cube":
        return cls(float(d["u"]), float(d["v"]), float(d["z"]), float(d["w"]),
                   float(d["h"]), float(d["l"]), rot=np.array(d["rot6d"], dtype=float),
                   mu=float(d.get("mu", 0.0)))


def _normalize(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a (..., 6) array into rotation matrices of shape (..., 3, 3).

    Raises:
        DegenerateRotation: if ``a1`` is near zero or ``a1`` and ``a2`` are
            near parallel.
    """
    r = np.asarray(r, dtype=float)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 < 1e-12):
        raise DegenerateRotation("first 6D column is near zero")
    b1 = a1 / n1[..., None]
    e = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    ne = np.linalg.norm(e, axis=-1)
    # |a2| sin(angle) must not vanish; 1e-6 rad relative to |a2|
    if np.any(ne <= 1e-6 * np.linalg.norm(a2, axis=-1)) or np.any(ne < 1e-12):
        raise DegenerateRotation("6D columns are near parallel")
    b2 = e / ne[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def pixel_ray(u, v, cam: CameraIntrinsics) -> np.ndarray:
    """Direction ``((u-cx)/f, (v-cy)/f, 1)``; scaling it by depth gives the 3D point."""
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    return np.stack([(u - cam.cx) / cam.f, (v - cam.cy) / cam.f, np.ones_like(u)], axis=-1)


def ray_rotation(u, v, cam: CameraIntrinsics) -> np.ndarray:
    """Minimal rotation taking the optical axis onto the unit ray through (u, v).

    Uses R = c I + [s]x + s s^T / (1 + c) with s = e_z x r and c = r_z, which
    is smooth everywhere since c > 0 for any pixel.
    """
    r = _normalize(pixel_ray(u, v, cam))
    c = r[..., 2]
    s1, s2 = -r[..., 1], r[..., 0]
    k = 1.0 / (1.0 + c)
    R = np.zeros(r.shape[:-1] + (3, 3))
    R[..., 0, 0] = c + s1 * s1 * k
    R[..., 0, 1] = s1 * s2 * k
    R[..., 0, 2] = s2
    R[..., 1, 0] = s1 * s2 * k
    R[..., 1, 1] = c + s2 * s2 * k
    R[..., 1, 2] = -s1
    R[..., 2, 0] = -s2
    R[..., 2, 1] = s1
    R[..., 2, 2] = c
    return R


def allocentric_to_egocentric(R_allo, u, v, cam: CameraIntrinsics) -> np.ndarray:
    return ray_rotation(u, v, cam) @ np.asarray(R_allo, dtype=float)


def egocentric_to_allocentric(R_ego, u, v, cam: CameraIntrinsics) -> np.ndarray:
    return np.swapaxes(ray_rotation(u, v, cam), -1, -2) @ np.asarray(R_ego, dtype=float)


def backproject(u, v, z, cam: CameraIntrinsics) -> np.ndarray:
    return pixel_ray(u, v, cam) * np.asarray(z, dtype=float)[..., None]


def cube_center(cube: Cube, cam: CameraIntrinsics) -> np.ndarray:
    return backproject(cube.u, cube.v, cube.z, cam)


def cube_rotation(cube: Cube, cam: CameraIntrinsics) -> np.ndarray:
    """Egocentric rotation of ``cube`` in the camera frame."""
    return allocentric_to_egocentric(rot6d_to_matrix(cube.rot), cube.u, cube.v, cam)


def box_corners(center, dims, R) -> np.ndarray:
    """Corners (..., 8, 3) of boxes with given centers (..., 3), dims (..., 3) and rotations (..., 3, 3)."""
    center = np.asarray(center, dtype=float)
    local = CORNER_SIGNS * (0.5 * np.asarray(dims, dtype=float))[..., None, :]
    return center[..., None, :] + local @ np.swapaxes(np.asarray(R, dtype=float), -1, -2)


def cube_corners(cube: Cube, cam: CameraIntrinsics) -> np.ndarray:
    """The 8 corners of ``cube`` in camera coordinates, ordered by CORNER_SIGNS."""
    return box_corners(cube_center(cube, cam), cube.dims, cube_rotation(cube, cam))


def cube_from_box(center, dims, R_ego, cam: CameraIntrinsics, mu: float = 0.0) -> Cube:
    """Inverse of (cube_center, cube_rotation): parameterize a camera-frame box as a Cube."""
    center = np.asarray(center, dtype=float)
    u = cam.f * center[0] / center[2] + cam.cx
    v = cam.f * center[1] / center[2] + cam.cy
    R_allo = egocentric_to_allocentric(R_ego, u, v, cam)
    return Cube(float(u), float(v), float(center[2]), *(float(d) for d in dims),
                rot=matrix_to_rot6d(R_allo), mu=mu)


def project_points(P, cam: CameraIntrinsics, clamp: bool = False):
    """Project camera-frame points (..., 3) to pixels (..., 2).

    With ``clamp=False`` any depth at or below ``Z_MIN`` raises BehindCamera.
    With ``clamp=True`` such depths are clamped to ``Z_MIN`` and the function
    returns ``(pixels, clamped)`` where ``clamped`` flags whether that happened.
    """
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    bad = z <= Z_MIN
    if not clamp:
        if np.any(bad):
            raise BehindCamera("point at or behind the camera plane")
        zc = z
    else:
        zc = np.maximum(z, Z_MIN)
    px = np.stack([cam.f * P[..., 0] / zc + cam.cx, cam.f * P[..., 1] / zc + cam.cy], axis=-1)
    if clamp:
        return px, bool(np.any(bad))
    return px


def project_cube_to_aabb(cube: Cube, cam: CameraIntrinsics) -> tuple[Box2D, bool]:
    """Axis-aligned box around the projected corners, plus a flag set when any corner was clamped."""
    px, clamped = project_points(cube_corners(cube, cam), cam, clamp=True)
    lo, hi = px.min(axis=0), px.max(axis=0)
    return Box2D(lo[0], lo[1], hi[0], hi[1]), clamped


def rotation_about(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle`` radians about ``axis``."""
    k = _normalize(np.asarray(axis, dtype=float))
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
