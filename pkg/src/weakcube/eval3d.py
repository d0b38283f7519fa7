"""Oriented 3D IoU, ground-truth filtering and mean AP3D over IoU thresholds."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Box2D, box_corners

WELD_TOL = 1e-12
DEFAULT_TAUS = tuple(round(0.05 * k, 2) for k in range(1, 11))


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    dims: np.ndarray
    R: np.ndarray

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    def corners(self) -> np.ndarray:
        return box_corners(self.center, self.dims, self.R)

    def to_dict(self) -> dict:
        return {"center": [float(x) for x in self.center], "dims": [float(x) for x in self.dims],
                "R": [[float(x) for x in row] for row in self.R]}

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(np.array(d["center"], dtype=float), np.array(d["dims"], dtype=float),
                   np.array(d["R"], dtype=float))


@dataclass(eq=False)
class Detection:
    image: str
    cls: str
    box: OrientedBox
    score: float


@dataclass(eq=False)
class GroundTruth:
    image: str
    cls: str
    box: OrientedBox
    box2d: Box2D | None = None
    truncation: float = 0.0
    occlusion: float = 0.0


@dataclass(frozen=True)
class EvalConfig:
    taus: tuple[float, ...] = DEFAULT_TAUS
    max_occlusion: float = 0.66
    max_truncation: float = 0.33
    min_height_frac: float = 0.0625

    def __post_init__(self):
        t = np.asarray(self.taus, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValueError("IoU thresholds must be strictly increasing in (0, 1)")


# ------------------------------------------------------------------ IoU3D


def _box_faces(box: OrientedBox) -> list[np.ndarray]:
    c = box.corners()
    faces = []
    for axis in range(3):
        b, d = [a for a in range(3) if a != axis]
        for side in (0, 1):
            cycle = [(0, 0), (1, 0), (1, 1), (0, 1)]
            idx = [(side << axis) | (i << b) | (j << d) for i, j in cycle]
            faces.append(c[idx])
    return faces


def _clip_polygon(poly: np.ndarray, dist: np.ndarray):
    """Keep the part of a planar polygon with signed distance <= 0; also return points on the cut."""
    out, cut = [], []
    m = len(poly)
    for i in range(m):
        p, q = poly[i], poly[(i + 1) % m]
        dp, dq = dist[i], dist[(i + 1) % m]
        if dp <= 0:
            out.append(p)
            if dp == 0:
                cut.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            x = p + (q - p) * (dp / (dp - dq))
            out.append(x)
            cut.append(x)
    return (np.array(out) if len(out) >= 3 else None), cut


def _order_planar(pts: np.ndarray, n: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    e1 = pts[np.argmax(np.linalg.norm(pts - c, axis=1))] - c
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    d = pts - c
    return pts[np.argsort(np.arctan2(d @ e2, d @ e1))]


def _weld(pts: list[np.ndarray], tol: float) -> np.ndarray:
    kept: list[np.ndarray] = []
    for p in pts:
        if all(np.linalg.norm(p - k) > tol for k in kept):
            kept.append(p)
    return np.array(kept)


def clip_polytope(faces: list[np.ndarray], n: np.ndarray, off: float) -> list[np.ndarray]:
    """Clip a convex polytope (list of ordered planar faces) to the half-space n.x + off <= 0.

    Distances within the weld tolerance snap to zero, so a face lying in the
    cutting plane is kept as is and no duplicate cap is built.
    """
    scale = max(1.0, max(float(np.abs(f).max()) for f in faces))
    tol = WELD_TOL * scale
    new_faces, cut_pts = [], []
    has_cap = False
    for f in faces:
        dist = f @ n + off
        dist[np.abs(dist) <= tol] = 0.0
        if np.all(dist == 0):
            new_faces.append(f)
            has_cap = True
            continue
        clipped, cut = _clip_polygon(f, dist)
        if clipped is not None:
            new_faces.append(clipped)
        cut_pts.extend(cut)
    if cut_pts and not has_cap:
        cap = _weld(cut_pts, tol)
        if len(cap) >= 3:
            new_faces.append(_order_planar(cap, n))
    return new_faces


def polytope_volume(faces: list[np.ndarray]) -> float:
    """Volume of a convex polytope as a sum of pyramids from its vertex centroid."""
    if len(faces) < 4:
        return 0.0
    c = np.concatenate(faces).mean(axis=0)
    vol = 0.0
    for f in faces:
        cr = np.cross(f, np.roll(f, -1, axis=0)).sum(axis=0)
        area2 = np.linalg.norm(cr)
        if area2 <= 0:
            continue
        nrm = cr / area2
        vol += abs(nrm @ (f[0] - c)) * 0.5 * area2 / 3.0
    return vol


def intersection_volume(a: OrientedBox, b: OrientedBox) -> float:
    faces = _box_faces(a)
    for axis in range(3):
        axis_dir = b.R[:, axis]
        half = 0.5 * b.dims[axis]
        for sgn in (1.0, -1.0):
            n = sgn * axis_dir
            faces = clip_polytope(faces, n, -(n @ b.center) - half)
            if not faces:
                return 0.0
    return polytope_volume(faces)


def iou3d(a: OrientedBox, b: OrientedBox) -> float:
    # quick reject on bounding spheres
    ra = 0.5 * np.linalg.norm(a.dims)
    rb = 0.5 * np.linalg.norm(b.dims)
    if np.linalg.norm(np.asarray(a.center) - np.asarray(b.center)) >= ra + rb:
        return 0.0
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# --------------------------------------------------------------- filtering


def filter_objects(gts: list[GroundTruth], cfg: EvalConfig,
                   cam: CameraIntrinsics) -> list[GroundTruth]:
    """Drop heavily occluded, truncated or tiny objects."""
    kept = []
    for g in gts:
        if g.occlusion > cfg.max_occlusion or g.truncation > cfg.max_truncation:
            continue
        if g.box2d is not None and g.box2d.height < cfg.min_height_frac * cam.height:
            continue
        kept.append(g)
    return kept


# ---------------------------------------------------------------------- AP


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class APResult:
    per_class: dict[str, dict] = field(default_factory=dict)
    mean_ap: float = 0.0
    mean_ap_per_tau: dict[float, float] = field(default_factory=dict)
    curves: dict[tuple[str, float], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _match_class(dets, gts, ignored, taus):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    by_img_gt = defaultdict(list)
    for j, g in enumerate(gts):
        by_img_gt[g.image].append(j)
    by_img_ig = defaultdict(list)
    for j, g in enumerate(ignored):
        by_img_ig[g.image].append(j)
    ious = [np.array([iou3d(d.box, gts[j].box) for j in by_img_gt[d.image]]) for d in dets]
    ig_ious = [np.array([iou3d(d.box, ignored[j].box) for j in by_img_ig[d.image]]) for d in dets]

    out = {}
    for tau in taus:
        used = set()
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for i, d in enumerate(dets):
            cand = [(iou, j) for iou, j in zip(ious[i], by_img_gt[d.image])
                    if iou >= tau and j not in used]
            if cand:
                # highest IoU first, lowest index on ties
                _, j = max(cand, key=lambda t: (t[0], -t[1]))
                used.add(j)
                tp[i] = 1
            elif len(ig_ious[i]) and ig_ious[i].max() >= tau:
                continue
            else:
                fp[i] = 1
        keep = (tp + fp) > 0
        ctp, cfp = np.cumsum(tp[keep]), np.cumsum(fp[keep])
        npos = len(gts)
        rec = ctp / npos
        prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
        out[tau] = (average_precision(rec, prec), rec, prec)
    return out


def ap3d(dets: list[Detection], gts: list[GroundTruth], cfg: EvalConfig = EvalConfig(),
         ignored: list[GroundTruth] | None = None) -> APResult:
    """Per-class AP averaged over thresholds, and its mean over classes present in ``gts``.

    Detections whose best match is an ``ignored`` ground truth count as
    neither true nor false positives.
    """
    ignored = ignored or []
    classes = sorted({g.cls for g in gts})
    res = APResult()
    for cls in classes:
        cd = [d for d in dets if d.cls == cls]
        cg = [g for g in gts if g.cls == cls]
        ci = [g for g in ignored if g.cls == cls]
        matched = _match_class(cd, cg, ci, cfg.taus)
        per_tau = {tau: matched[tau][0] for tau in cfg.taus}
        for tau in cfg.taus:
            res.curves[(cls, tau)] = matched[tau][1:]
        res.per_class[cls] = {"ap_per_tau": per_tau, "ap": float(np.mean(list(per_tau.values()))),
                              "num_gt": len(cg), "num_det": len(cd)}
    if classes:
        res.mean_ap = float(np.mean([res.per_class[c]["ap"] for c in classes]))
        res.mean_ap_per_tau = {tau: float(np.mean([res.per_class[c]["ap_per_tau"][tau]
                                                  for c in classes])) for tau in cfg.taus}
    else:
        res.mean_ap_per_tau = {tau: 0.0 for tau in cfg.taus}
    return res
