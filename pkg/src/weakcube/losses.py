"""Weak 3D losses on cube parameters and their weighted, uncertainty-scaled total.

Two layers live here. The scalar functions (``giou_2d``, ``loss_z``, ...)
evaluate one term on one cube and read like the formulas. ``scene_objective``
evaluates every term for all cubes of a scene at once, vectorized over
cubes, and returns the exact gradient with respect to all 13 parameters of
every cube by reverse-mode differentiation written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import (
    CORNER_SIGNS,
    LOCAL_UP,
    Z_MIN,
    Box2D,
    CameraIntrinsics,
    Cube,
    DegenerateRotation,
    cube_rotation,
    pixel_ray,
    project_cube_to_aabb,
    ray_rotation,
)
from .pseudo_gt import GroundEstimate

COS_EPS = 1e-8
SQRT2 = float(np.sqrt(2.0))
TERMS = ("giou", "z", "dim", "normal", "pose")


@dataclass(frozen=True)
class ClassPrior:
    name: str
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("priors need three dimensions (w, h, l)")
        if min(self.mean) <= 0 or min(self.std) <= 0:
            raise ValueError(f"prior for {self.name!r} must be positive")


def load_priors(records) -> dict[str, ClassPrior]:
    """Build ``{class: ClassPrior}`` from ``[{class, mu: [w,h,l], sigma: [w,h,l]}, ...]``."""
    out = {}
    for r in records:
        p = ClassPrior(r["class"], tuple(float(x) for x in r["mu"]),
                       tuple(float(x) for x in r["sigma"]))
        out[p.name] = p
    return out


def dump_priors(priors: dict[str, ClassPrior]) -> list[dict]:
    return [{"class": p.name, "mu": list(p.mean), "sigma": list(p.std)}
            for p in sorted(priors.values(), key=lambda p: p.name)]


@dataclass(frozen=True)
class LossWeights:
    giou: float = 4.0
    z: float = 1.0
    dim: float = 0.1
    normal: float = 70.0
    pose: float = 7.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, t) for t in TERMS])

    def to_dict(self) -> dict:
        return {t: float(getattr(self, t)) for t in TERMS}

    def ablate(self, term: str) -> "LossWeights":
        if term not in TERMS:
            raise ValueError(f"unknown loss term {term!r}; expected one of {TERMS}")
        return LossWeights(**{**self.to_dict(), term: 0.0})


@dataclass
class LossBreakdown:
    giou: float = 0.0
    z: float = 0.0
    dim: float = 0.0
    normal: float = 0.0
    pose: float = 0.0
    l3d: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


# ----------------------------------------------------------------- scalar terms


def _box_array(b) -> np.ndarray:
    return b.as_array() if isinstance(b, Box2D) else np.asarray(b, dtype=float)


def giou_2d(a, b) -> float:
    """Generalized IoU of two boxes given as Box2D or (x1, y1, x2, y2)."""
    g, _ = _giou_and_grad(_box_array(a)[None], _box_array(b)[None])
    return float(g[0])


def loss_giou(cube: Cube, gt_box: Box2D, cam: CameraIntrinsics) -> float:
    pred, _ = project_cube_to_aabb(cube, cam)
    return 1.0 - giou_2d(gt_box, pred)


def loss_z(z_pseudo: float, cube: Cube) -> float:
    return abs(z_pseudo - cube.z)


def dim_zscore(dims, prior: ClassPrior) -> float:
    """Mean absolute z-score of the dimensions against the class prior."""
    d = np.asarray(dims, dtype=float)
    return float(np.mean(np.abs(d - np.array(prior.mean)) / np.array(prior.std)))


def loss_dim(cube: Cube, prior: ClassPrior) -> float:
    z = dim_zscore(cube.dims, prior)
    return z if z > 1.0 else 0.0


def cos_sim(n1, n2, eps: float = COS_EPS) -> float:
    n1, n2 = np.asarray(n1, dtype=float), np.asarray(n2, dtype=float)
    return float(n1 @ n2 / max(np.linalg.norm(n1) * np.linalg.norm(n2), eps))


def cube_up(cube: Cube, cam: CameraIntrinsics) -> np.ndarray:
    """The cube's local up axis expressed in the camera frame."""
    return cube_rotation(cube, cam) @ LOCAL_UP


def loss_normal(ground: GroundEstimate, cube: Cube, cam: CameraIntrinsics) -> float:
    return (1.0 - cos_sim(ground.normal, cube_up(cube, cam))) * ground.kappa


def pairwise_pose_cos(R1, R2) -> float:
    """|cos| of the relative rotation angle; 180-degree offsets count as aligned."""
    tr = float(np.sum(np.asarray(R1) * np.asarray(R2)))  # Tr(R1 R2^T)
    return abs(0.5 * (tr - 1.0))


def loss_pose(cubes: list[Cube], cam: CameraIntrinsics) -> float:
    """Mean of 1 - pairwise_pose_cos over unordered pairs; 0 for fewer than two cubes."""
    if len(cubes) < 2:
        return 0.0
    Rs = [cube_rotation(c, cam) for c in cubes]
    vals = [1.0 - pairwise_pose_cos(Rs[i], Rs[j])
            for i in range(len(Rs)) for j in range(i + 1, len(Rs))]
    return float(np.mean(vals))


def combine_l3d(terms, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of the five terms; ``terms`` is a LossBreakdown, mapping or 5-sequence."""
    if isinstance(terms, LossBreakdown):
        vals = np.array([getattr(terms, t) for t in TERMS])
    elif isinstance(terms, dict):
        vals = np.array([terms[t] for t in TERMS])
    else:
        vals = np.asarray(terms, dtype=float)
    return float(vals @ weights.as_array())


def total_loss(l3d: float, mu: float) -> float:
    return SQRT2 * float(np.exp(-mu)) * l3d + mu


# ------------------------------------------------------------- scene objective


def _giou_and_grad(g: np.ndarray, p: np.ndarray):
    """GIoU(g, p) for (n, 4) box arrays and its gradient with respect to ``p``.

    Ties in min/max route the gradient to ``p`` for both the intersection and
    the hull, which makes the gradient vanish at ``p == g``.
    """
    ix1 = np.maximum(g[:, 0], p[:, 0])
    iy1 = np.maximum(g[:, 1], p[:, 1])
    ix2 = np.minimum(g[:, 2], p[:, 2])
    iy2 = np.minimum(g[:, 3], p[:, 3])
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    area_p = pw * ph
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_p + area_g - inter
    cw = np.maximum(g[:, 2], p[:, 2]) - np.minimum(g[:, 0], p[:, 0])
    ch = np.maximum(g[:, 3], p[:, 3]) - np.minimum(g[:, 1], p[:, 1])
    hull = cw * ch

    u_ok, h_ok = union > 0, hull > 0
    u_s = np.where(u_ok, union, 1.0)
    h_s = np.where(h_ok, hull, 1.0)
    iou = np.where(u_ok, inter / u_s, 0.0)
    giou = iou - np.where(h_ok, (hull - union) / h_s, 0.0)

    d_inter = np.where(u_ok, 1.0 / u_s + inter / u_s**2, 0.0) - np.where(h_ok, 1.0 / h_s, 0.0)
    d_area_p = np.where(u_ok, -inter / u_s**2, 0.0) + np.where(h_ok, 1.0 / h_s, 0.0)
    d_hull = np.where(h_ok, -union / h_s**2, 0.0)

    grad = np.zeros_like(p)
    active = (iw_raw > 0) & (ih_raw > 0)
    di_w = np.where(active, d_inter * ih, 0.0)
    di_h = np.where(active, d_inter * iw, 0.0)
    grad[:, 0] -= di_w * (p[:, 0] >= g[:, 0])
    grad[:, 2] += di_w * (p[:, 2] <= g[:, 2])
    grad[:, 1] -= di_h * (p[:, 1] >= g[:, 1])
    grad[:, 3] += di_h * (p[:, 3] <= g[:, 3])

    grad[:, 0] -= d_area_p * ph
    grad[:, 2] += d_area_p * ph
    grad[:, 1] -= d_area_p * pw
    grad[:, 3] += d_area_p * pw

    grad[:, 0] -= d_hull * ch * (p[:, 0] <= g[:, 0])
    grad[:, 2] += d_hull * ch * (p[:, 2] >= g[:, 2])
    grad[:, 1] -= d_hull * cw * (p[:, 1] <= g[:, 1])
    grad[:, 3] += d_hull * cw * (p[:, 3] >= g[:, 3])
    return giou, grad


@dataclass
class SceneTargets:
    """Everything the losses compare a scene's cubes against, one row per cube."""

    boxes: np.ndarray          # (n, 4) target 2D boxes
    z_pseudo: np.ndarray       # (n,)
    prior_mean: np.ndarray     # (n, 3)
    prior_std: np.ndarray      # (n, 3)
    ground: GroundEstimate = field(
        default_factory=lambda: GroundEstimate(np.array([0.0, -1.0, 0.0]), 0.05, 0.0))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        n = len(self.boxes)
        self.z_pseudo = np.asarray(self.z_pseudo, dtype=float).reshape(n)
        self.prior_mean = np.asarray(self.prior_mean, dtype=float).reshape(n, 3)
        self.prior_std = np.asarray(self.prior_std, dtype=float).reshape(n, 3)

    @classmethod
    def build(cls, boxes, z_pseudo, priors: list[ClassPrior], ground: GroundEstimate):
        return cls(np.array([_box_array(b) for b in boxes]).reshape(-1, 4), z_pseudo,
                   [p.mean for p in priors], [p.std for p in priors], ground)


@dataclass
class SceneEval:
    total: float
    terms: np.ndarray      # (n, 5) per-cube values in TERMS order
    l3d: np.ndarray        # (n,)
    per_cube_total: np.ndarray
    clamped: np.ndarray    # (n,) bool, some corner was clamped to Z_MIN
    grad: np.ndarray | None = None

    def breakdown(self, i: int) -> LossBreakdown:
        return LossBreakdown(*(float(x) for x in self.terms[i]), float(self.l3d[i]),
                             float(self.per_cube_total[i]))

    def scene_breakdown(self) -> LossBreakdown:
        """Mean terms over cubes (the mean pose share is the scene pose loss) and the summed total."""
        if len(self.terms) == 0:
            return LossBreakdown()
        m = self.terms.mean(axis=0)
        return LossBreakdown(*(float(x) for x in m), float(self.l3d.mean()), float(self.total))


def _gram_schmidt(a1, a2):
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 < 1e-12):
        raise DegenerateRotation("first 6D column is near zero")
    b1 = a1 / n1[:, None]
    e = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    ne = np.linalg.norm(e, axis=-1)
    if np.any(ne <= 1e-6 * np.linalg.norm(a2, axis=-1)) or np.any(ne < 1e-12):
        raise DegenerateRotation("6D columns are near parallel")
    b2 = e / ne[:, None]
    return b1, b2, np.cross(b1, b2), n1, ne


def scene_objective(X, targets: SceneTargets, cam: CameraIntrinsics,
                    weights: LossWeights = LossWeights(), grad: bool = True) -> SceneEval:
    """Summed uncertainty-weighted loss of all cubes in a scene.

    ``X`` is an (n, 13) array of cube vectors (``Cube.as_vector`` layout).
    Each cube's L3D carries its share of the pose loss, the mean of
    (1 - pairwise_pose_cos) over its n - 1 partners, so the mean share over
    cubes equals ``loss_pose``. The scene total is the sum over cubes of
    ``total_loss(l3d_i, mu_i)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(X)
    u, v, z = X[:, 0], X[:, 1], X[:, 2]
    dims = X[:, 3:6]
    mu = X[:, 12]
    lam = weights.as_array()

    b1, b2, b3, n1, ne = _gram_schmidt(X[:, 6:9], X[:, 9:12])
    R_allo = np.stack([b1, b2, b3], axis=-1)
    q = pixel_ray(u, v, cam)
    nq = np.linalg.norm(q, axis=-1)
    r = q / nq[:, None]
    R_ray = ray_rotation(u, v, cam)
    R = R_ray @ R_allo

    center = q * z[:, None]
    local = CORNER_SIGNS[None] * (0.5 * dims)[:, None, :]
    corners = center[:, None, :] + local @ np.swapaxes(R, -1, -2)
    Pz = corners[..., 2]
    Pzc = np.maximum(Pz, Z_MIN)
    px = cam.f * corners[..., 0] / Pzc + cam.cx
    py = cam.f * corners[..., 1] / Pzc + cam.cy
    rows = np.arange(n)
    kx0, ky0 = np.argmin(px, axis=1), np.argmin(py, axis=1)
    kx1, ky1 = np.argmax(px, axis=1), np.argmax(py, axis=1)
    pred = np.stack([px[rows, kx0], py[rows, ky0], px[rows, kx1], py[rows, ky1]], axis=-1)
    giou, dgiou = _giou_and_grad(targets.boxes, pred)
    L_giou = 1.0 - giou

    dz = z - targets.z_pseudo
    L_z = np.abs(dz)

    zs_terms = (dims - targets.prior_mean) / targets.prior_std
    Zs = np.mean(np.abs(zs_terms), axis=1)
    hinge = Zs > 1.0
    L_dim = np.where(hinge, Zs, 0.0)

    nvec = np.asarray(targets.ground.normal, dtype=float)
    kappa = float(targets.ground.kappa)
    up = -R[:, :, 1]
    dot = up @ nvec
    nn, nu = np.linalg.norm(nvec), np.linalg.norm(up, axis=1)
    D = nn * nu
    d_ok = D > COS_EPS
    Ds = np.where(d_ok, D, COS_EPS)
    cs = dot / Ds
    L_normal = (1.0 - cs) * kappa

    if n >= 2:
        T = np.einsum("aij,bij->ab", R, R)
        xc = 0.5 * (T - 1.0)
        cpair = np.abs(xc)
        off = ~np.eye(n, dtype=bool)
        L_pose = np.where(off, 1.0 - cpair, 0.0).sum(axis=1) / (n - 1)
    else:
        L_pose = np.zeros(n)

    terms = np.stack([L_giou, L_z, L_dim, L_normal, L_pose], axis=1)
    l3d = terms @ lam
    wgt = SQRT2 * np.exp(-mu)
    per_cube = wgt * l3d + mu
    clamped = np.any(Pz <= Z_MIN, axis=1)
    out = SceneEval(float(per_cube.sum()), terms, l3d, per_cube, clamped)
    if not grad:
        return out

    G = np.zeros_like(X)
    G[:, 12] = 1.0 - wgt * l3d
    Gt = wgt[:, None] * lam[None, :]  # d total / d term, per cube

    G[:, 2] += Gt[:, 1] * np.sign(dz)
    G[:, 3:6] += (Gt[:, 2] * hinge)[:, None] * np.sign(zs_terms) / (3.0 * targets.prior_std)

    # GIoU -> box -> projected corners -> corners
    Gp = -Gt[:, 0:1] * dgiou
    Gpx = np.zeros_like(px)
    Gpy = np.zeros_like(py)
    np.add.at(Gpx, (rows, kx0), Gp[:, 0])
    np.add.at(Gpy, (rows, ky0), Gp[:, 1])
    np.add.at(Gpx, (rows, kx1), Gp[:, 2])
    np.add.at(Gpy, (rows, ky1), Gp[:, 3])
    Gc = np.empty_like(corners)
    Gc[..., 0] = cam.f / Pzc * Gpx
    Gc[..., 1] = cam.f / Pzc * Gpy
    Gc[..., 2] = np.where(Pz > Z_MIN,
                          -cam.f * (corners[..., 0] * Gpx + corners[..., 1] * Gpy) / Pzc**2, 0.0)

    G_center = Gc.sum(axis=1)
    GR = np.einsum("nki,nkj->nij", Gc, local)
    G_local = Gc @ R
    G[:, 3:6] += 0.5 * np.sum(G_local * CORNER_SIGNS[None], axis=1)

    # normal: up = -R[:, :, 1]
    dcs = np.where(d_ok[:, None],
                   nvec[None] / Ds[:, None]
                   - (dot / Ds**2 * nn / np.where(nu > 0, nu, 1.0))[:, None] * up,
                   nvec[None] / COS_EPS)
    GR[:, :, 1] += (Gt[:, 3] * kappa)[:, None] * dcs

    if n >= 2:
        Gcp = -(Gt[:, 4][:, None] + Gt[:, 4][None, :]) / (n - 1)
        M = np.where(off, Gcp * np.sign(xc) * 0.5, 0.0)
        GR += np.einsum("ab,bij->aij", M, R)

    # R = R_ray @ R_allo
    G_Rray = GR @ np.swapaxes(R_allo, -1, -2)
    G_Rallo = np.swapaxes(R_ray, -1, -2) @ GR

    # Gram-Schmidt
    Gb1 = G_Rallo[:, :, 0] + np.cross(b2, G_Rallo[:, :, 2])
    Gb2 = G_Rallo[:, :, 1] + np.cross(G_Rallo[:, :, 2], b1)
    Ge = (Gb2 - b2 * np.sum(b2 * Gb2, axis=1, keepdims=True)) / ne[:, None]
    a2 = X[:, 9:12]
    b1a2 = np.sum(b1 * a2, axis=1, keepdims=True)
    b1Ge = np.sum(b1 * Ge, axis=1, keepdims=True)
    G[:, 9:12] += Ge - b1 * b1Ge
    Gb1 = Gb1 - b1a2 * Ge - a2 * b1Ge
    G[:, 6:9] += (Gb1 - b1 * np.sum(b1 * Gb1, axis=1, keepdims=True)) / n1[:, None]

    # ray rotation R = c I + [s]x + s s^T / (1 + c), s = (-r_y, r_x, 0), c = r_z
    c = r[:, 2]
    s1, s2 = -r[:, 1], r[:, 0]
    k = 1.0 / (1.0 + c)
    g = G_Rray
    sym01 = g[:, 0, 1] + g[:, 1, 0]
    d_c = (g[:, 0, 0] + g[:, 1, 1] + g[:, 2, 2]
           - k**2 * (s1 * s1 * g[:, 0, 0] + s1 * s2 * sym01 + s2 * s2 * g[:, 1, 1]))
    d_s1 = -g[:, 1, 2] + g[:, 2, 1] + k * (2 * s1 * g[:, 0, 0] + s2 * sym01)
    d_s2 = g[:, 0, 2] - g[:, 2, 0] + k * (2 * s2 * g[:, 1, 1] + s1 * sym01)
    Gr = np.stack([d_s2, -d_s1, d_c], axis=1)
    Gq = (Gr - r * np.sum(r * Gr, axis=1, keepdims=True)) / nq[:, None]
    Gq += z[:, None] * G_center
    G[:, 2] += np.sum(q * G_center, axis=1)
    G[:, 0] += Gq[:, 0] / cam.f
    G[:, 1] += Gq[:, 1] / cam.f
    out.grad = G
    return out
