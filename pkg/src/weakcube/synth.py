"""Seeded synthetic indoor scenes: upright boxes on a floor, seen by a pitched pinhole camera.

World frame matches an unpitched camera (x right, y down, z forward) with
the floor at y = camera_height. Pitching the camera down by ``pitch``
radians maps world to camera coordinates with a rotation about x.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .eval3d import GroundTruth, OrientedBox
from .fileio import read_json, read_pfm, read_pgm, write_json, write_pfm, write_pgm
from .geometry import Box2D, CameraIntrinsics, Cube, cube_from_box, pixel_ray, project_cube_to_aabb
from .losses import ClassPrior

DEFAULT_PRIORS = (
    ClassPrior("chair", (0.55, 0.90, 0.55), (0.06, 0.08, 0.06)),
    ClassPrior("table", (1.20, 0.75, 0.80), (0.12, 0.05, 0.08)),
    ClassPrior("cabinet", (0.90, 1.10, 0.50), (0.10, 0.12, 0.05)),
    ClassPrior("sofa", (1.90, 0.85, 0.90), (0.15, 0.06, 0.08)),
)


class InfeasiblePlacement(RuntimeError):
    pass


@dataclass
class SynthConfig:
    width: int = 320
    height: int = 240
    focal: float = 260.0
    min_objects: int = 2
    max_objects: int = 6
    priors: tuple[ClassPrior, ...] = DEFAULT_PRIORS
    dim_sigma_clip: float = 1.5
    yaw_range: tuple[float, float] = (-0.35, 0.35)
    alignment_fraction: float = 0.8
    x_extent: tuple[float, float] = (-2.2, 2.2)
    z_extent: tuple[float, float] = (2.5, 8.0)
    camera_height: tuple[float, float] = (1.3, 1.6)
    pitch_range: tuple[float, float] = (0.10, 0.30)
    depth_noise: float = 0.01
    min_gap: float = 0.1
    max_range: float = 50.0
    max_attempts: int = 1000

    def __post_init__(self):
        self.priors = tuple(p if isinstance(p, ClassPrior) else
                            ClassPrior(p["class"], tuple(p["mu"]), tuple(p["sigma"]))
                            for p in self.priors)
        for name in ("yaw_range", "x_extent", "z_extent", "camera_height", "pitch_range"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object counts must satisfy 1 <= min_objects <= max_objects")
        if self.x_extent[1] <= self.x_extent[0] or self.z_extent[1] <= self.z_extent[0]:
            raise ValueError("placement extents must be positive")
        if not 0.0 <= self.alignment_fraction <= 1.0:
            raise ValueError("alignment_fraction must lie in [0, 1]")
        if self.depth_noise < 0 or not self.priors:
            raise ValueError("invalid depth noise or empty class set")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.width / 2, self.height / 2, self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priors"] = [{"class": p.name, "mu": list(p.mean), "sigma": list(p.std)}
                       for p in self.priors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneObject:
    cls: str
    box: OrientedBox
    cube: Cube
    box2d: Box2D
    truncation: float
    occlusion: float = 0.0

    def to_dict(self) -> dict:
        return {"class": self.cls, "box3d": self.box.to_dict(), "cube": self.cube.to_dict(),
                "box2d": [self.box2d.x1, self.box2d.y1, self.box2d.x2, self.box2d.y2],
                "truncation": self.truncation, "occlusion": self.occlusion}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["class"], OrientedBox.from_dict(d["box3d"]), Cube.from_dict(d["cube"]),
                   Box2D(*d["box2d"]), float(d["truncation"]), float(d["occlusion"]))

    def ground_truth(self, image: str) -> GroundTruth:
        return GroundTruth(image, self.cls, self.box, self.box2d, self.truncation, self.occlusion)


@dataclass
class Scene:
    camera: CameraIntrinsics
    pitch: float
    camera_height: float
    objects: list[SceneObject]
    depth: np.ndarray | None = None
    ground_mask: np.ndarray | None = None
    seed: int = 0
    floor_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))

    def to_dict(self) -> dict:
        return {"camera": self.camera.to_dict(), "pitch": self.pitch,
                "camera_height": self.camera_height,
                "floor_normal": [float(x) for x in self.floor_normal], "seed": self.seed,
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(CameraIntrinsics.from_dict(d["camera"]), float(d["pitch"]),
                   float(d["camera_height"]), [SceneObject.from_dict(o) for o in d["objects"]],
                   seed=int(d["seed"]), floor_normal=np.array(d["floor_normal"], dtype=float))


def pitch_rotation(pitch: float) -> np.ndarray:
    """World-to-camera rotation for a camera tilted down by ``pitch`` radians."""
    c, s = np.cos(pitch), np.sin(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def clip_box(box: Box2D, cam: CameraIntrinsics) -> tuple[Box2D, float]:
    """Clip to the image extent; the second value is the fraction of area cut away."""
    x1, x2 = np.clip([box.x1, box.x2], -0.5, cam.width - 0.5)
    y1, y2 = np.clip([box.y1, box.y2], -0.5, cam.height - 0.5)
    full = box.width * box.height
    kept = (x2 - x1) * (y2 - y1)
    trunc = 1.0 - kept / full if full > 0 else 1.0
    return Box2D(float(x1), float(y1), float(x2), float(y2)), float(min(max(trunc, 0.0), 1.0))


def _ray_box_depth(dirs: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Ray parameter of the first hit along ``dirs`` (rays from the origin); inf on a miss."""
    half = 0.5 * np.asarray(box.dims)
    o = -(box.R.T @ box.center)
    d = dirs @ box.R
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def render_depth(boxes: list[OrientedBox], floor_normal, floor_offset: float,
                 cam: CameraIntrinsics, noise: float = 0.0, seed: int = 0,
                 max_range: float = 50.0):
    """Ray-cast the floor plane and boxes.

    Returns ``(depth, ground_mask, ids, hits)``: float32 z-depth with NaN
    where no surface is hit, the mask of pixels whose nearest hit is the
    floor, the index of the nearest box per pixel (-1 for floor, -2 for
    nothing), and one boolean map per box of the pixels whose ray hits it.
    Since the ray direction has unit z, the ray parameter equals the depth.
    """
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    dirs = pixel_ray(uu.astype(float), vv.astype(float), cam)
    n = np.asarray(floor_normal, dtype=float)
    nd = dirs @ n
    with np.errstate(divide="ignore"):
        t_floor = np.where(nd < 0, -floor_offset / nd, np.inf)
    t_floor[t_floor > max_range] = np.inf

    best = t_floor.copy()
    ids = np.where(np.isfinite(t_floor), -1, -2)
    per_box_hits = []
    for k, b in enumerate(boxes):
        t = _ray_box_depth(dirs, b)
        t[t > max_range] = np.inf
        per_box_hits.append(np.isfinite(t))
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = k

    depth = np.where(np.isfinite(best), best, np.nan)
    if noise > 0:
        rng = np.random.default_rng(seed)
        depth = depth + rng.normal(0.0, noise, size=depth.shape)
    return depth.astype(np.float32), ids == -1, ids, per_box_hits


def _sample_dims(prior: ClassPrior, clip: float, rng) -> np.ndarray:
    mean, std = np.array(prior.mean), np.array(prior.std)
    return mean + std * np.clip(rng.standard_normal(3), -clip, clip)


def generate_scene(cfg: SynthConfig, seed: int) -> Scene:
    """Place upright boxes on the floor without footprint overlap, then render depth.

    Raises:
        InfeasiblePlacement: if an object cannot be placed in ``max_attempts`` tries.
    """
    seq = np.random.SeedSequence(seed)
    place_seed, noise_seed = seq.spawn(2)
    rng = np.random.default_rng(place_seed)
    cam = cfg.camera
    cam_h = float(rng.uniform(*cfg.camera_height))
    pitch = float(rng.uniform(*cfg.pitch_range))
    R_cw = pitch_rotation(pitch)
    floor_normal = R_cw @ np.array([0.0, -1.0, 0.0])
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    dominant_yaw = float(rng.uniform(*cfg.yaw_range))

    placed: list[tuple[np.ndarray, float]] = []
    objects: list[SceneObject] = []
    for _ in range(n_obj):
        prior = cfg.priors[int(rng.integers(len(cfg.priors)))]
        dims = _sample_dims(prior, cfg.dim_sigma_clip, rng)
        aligned = rng.random() < cfg.alignment_fraction
        yaw = dominant_yaw if aligned else float(rng.uniform(*cfg.yaw_range))
        radius = 0.5 * float(np.hypot(dims[0], dims[2]))
        for _attempt in range(cfg.max_attempts):
            zf = rng.uniform(*cfg.z_extent)
            # stay within the horizontal field of view at this depth
            half_fov = zf * (0.5 * cam.width) / cam.f
            x_lo, x_hi = max(cfg.x_extent[0], -half_fov), min(cfg.x_extent[1], half_fov)
            if x_hi <= x_lo:
                continue
            xz = np.array([rng.uniform(x_lo, x_hi), zf])
            if any(np.linalg.norm(xz - p) < radius + r + cfg.min_gap for p, r in placed):
                continue
            center_w = np.array([xz[0], cam_h - 0.5 * dims[1], xz[1]])
            center = R_cw @ center_w
            R = R_cw @ yaw_rotation(yaw)
            box = OrientedBox(center, dims, R)
            if box.corners()[:, 2].min() < 0.3:
                continue
            cube = cube_from_box(center, dims, R, cam)
            if not (0 <= cube.u < cam.width and 0 <= cube.v < cam.height):
                continue
            full, _ = project_cube_to_aabb(cube, cam)
            box2d, trunc = clip_box(full, cam)
            placed.append((xz, radius))
            objects.append(SceneObject(prior.name, box, cube, box2d, trunc))
            break
        else:
            raise InfeasiblePlacement(f"could not place object {len(objects)} (seed {seed})")

    depth, mask, ids, hits = render_depth([o.box for o in objects], floor_normal, cam_h, cam,
                                          cfg.depth_noise, noise_seed, cfg.max_range)
    for k, o in enumerate(objects):
        total = int(np.count_nonzero(hits[k]))
        visible = int(np.count_nonzero(ids == k))
        o.occlusion = 1.0 - visible / total if total else 1.0
    return Scene(cam, pitch, cam_h, objects, depth, mask, seed, floor_normal)


SCENE_JSON, DEPTH_PFM, MASK_PGM = "scene.json", "depth.pfm", "ground_mask.pgm"


def save_scene(scene: Scene, directory) -> None:
    """Write scene.json, depth.pfm and ground_mask.pgm into ``directory``."""
    directory = Path(directory)
    write_json(directory / SCENE_JSON, scene.to_dict())
    write_pfm(directory / DEPTH_PFM, scene.depth)
    write_pgm(directory / MASK_PGM, scene.ground_mask)


def load_scene(directory, with_maps: bool = True) -> Scene:
    directory = Path(directory)
    scene = Scene.from_dict(read_json(directory / SCENE_JSON))
    if with_maps:
        scene.depth = read_pfm(directory / DEPTH_PFM)
        mask_path = directory / MASK_PGM
        scene.ground_mask = read_pgm(mask_path) if mask_path.exists() else None
    return scene
