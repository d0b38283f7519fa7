"""Per-scene cube fitting: minimize the weak total loss over every cube's 13 parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box2D, CameraIntrinsics, Cube, DegenerateRotation, matrix_to_rot6d, rot6d_to_matrix
from .losses import ClassPrior, LossBreakdown, LossWeights, SceneTargets, scene_objective
from .pseudo_gt import GroundEstimate


class MissingPrior(KeyError):
    pass


class MissingPseudoDepth(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    Step sizes are per parameter group and define the unit of the normalized
    coordinates the descent moves in: pixels for (u, v), relative change for
    depth and dimensions (both optimized in log space), raw units for the 6D
    rotation, and raw units for the uncertainty.
    """

    max_iters: int = 500
    tol: float = 1e-7
    fd_step: float = 1e-5
    uv_step: float = 2.0
    depth_step: float = 0.02
    dim_step: float = 0.02
    rot_step: float = 0.02
    mu_step: float = 0.05
    mu_bounds: tuple[float, float] = (-5.0, 5.0)
    armijo_c: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    max_alpha: float = 8.0
    min_alpha: float = 1e-10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.fd_step <= 0 or self.tol <= 0:
            raise ValueError("need max_iters >= 1, fd_step > 0 and tol > 0")

    def scales(self) -> np.ndarray:
        return np.array([self.uv_step, self.uv_step, self.depth_step,
                         self.dim_step, self.dim_step, self.dim_step,
                         *([self.rot_step] * 6), self.mu_step])

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "weights"}
        d["mu_bounds"] = list(self.mu_bounds)
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class PseudoGT:
    depths: list[float]
    ground: GroundEstimate
    priors: dict[str, ClassPrior]


@dataclass
class FitResult:
    cubes: list[Cube]
    classes: list[str]
    breakdowns: list[LossBreakdown]
    scene: LossBreakdown
    iterations: int
    converged: bool
    scores: list[float]
    history: list[float]

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[-1]

    def to_dict(self) -> dict:
        return {
            "objects": [{"class": c, "cube": cube.to_dict(), "loss": b.to_dict(), "score": s}
                        for c, cube, b, s in zip(self.classes, self.cubes, self.breakdowns, self.scores)],
            "scene_loss": self.scene.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "history": self.history,
        }


def init_cube(box: Box2D, z_pseudo: float, prior: ClassPrior, cam: CameraIntrinsics) -> Cube:
    if not z_pseudo > 0:
        raise MissingPseudoDepth(f"pseudo depth must be positive, got {z_pseudo}")
    u, v = box.center
    return Cube(u, v, float(z_pseudo), *prior.mean)


_LOG = np.array([False, False, True, True, True, True] + [False] * 7)


def _to_theta(X: np.ndarray) -> np.ndarray:
    T = X.copy()
    T[:, _LOG] = np.log(X[:, _LOG])
    return T


def _from_theta(T: np.ndarray) -> np.ndarray:
    X = T.copy()
    X[:, _LOG] = np.exp(T[:, _LOG])
    return X


def _renormalize(X: np.ndarray) -> np.ndarray:
    X = X.copy()
    X[:, 6:12] = matrix_to_rot6d(rot6d_to_matrix(X[:, 6:12]))
    return X


def build_targets(boxes: list[tuple[Box2D, str]], pseudo: PseudoGT) -> SceneTargets:
    if len(pseudo.depths) != len(boxes):
        raise MissingPseudoDepth(f"{len(boxes)} boxes but {len(pseudo.depths)} pseudo depths")
    priors = []
    for _, cls in boxes:
        if cls not in pseudo.priors:
            raise MissingPrior(cls)
        priors.append(pseudo.priors[cls])
    for d in pseudo.depths:
        if d is None or not np.isfinite(d) or d <= 0:
            raise MissingPseudoDepth(f"invalid pseudo depth {d}")
    return SceneTargets.build([b for b, _ in boxes], pseudo.depths, priors, pseudo.ground)


def fit_scene(boxes: list[tuple[Box2D, str]], pseudo: PseudoGT, cam: CameraIntrinsics,
              cfg: FitConfig = FitConfig(), init: list[Cube] | None = None) -> FitResult:
    """Jointly fit one cube per box by descent with backtracking line search.

    The descent direction is the negative gradient in step-size-normalized
    coordinates, scaled to unit length; the step length adapts, growing after
    each accepted step and halving on every failed Armijo test. Accepted
    steps never increase the loss, so ``history`` is non-increasing.
    """
    targets = build_targets(boxes, pseudo)
    if init is None:
        init = [init_cube(b, z, pseudo.priors[c], cam)
                for (b, c), z in zip(boxes, pseudo.depths)]
    classes = [c for _, c in boxes]
    if not boxes:
        return FitResult([], [], [], LossBreakdown(), 0, True, [], [0.0])
    X = np.array([c.as_vector() for c in init])
    lo, hi = cfg.mu_bounds
    X[:, 12] = np.clip(X[:, 12], lo, hi)
    s = cfg.scales()
    w = cfg.weights

    def evaluate(Xc, grad):
        try:
            return scene_objective(Xc, targets, cam, w, grad=grad)
        except DegenerateRotation:
            return None

    ev = evaluate(X, True)
    f = ev.total
    history = [f]
    alpha = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        theta = _to_theta(X)
        g_theta = ev.grad.copy()
        g_theta[:, _LOG] *= X[:, _LOG]
        gs = g_theta * s
        # bound-active uncertainties do not move
        pinned = ((theta[:, 12] <= lo) & (gs[:, 12] > 0)) | ((theta[:, 12] >= hi) & (gs[:, 12] < 0))
        gs[pinned, 12] = 0.0
        gnorm = np.linalg.norm(gs)
        if gnorm == 0.0 or not np.isfinite(gnorm):
            converged = True
            break
        direction = -(gs / gnorm) * s
        accepted = None
        while alpha >= cfg.min_alpha:
            trial = theta + alpha * direction
            trial[:, 12] = np.clip(trial[:, 12], lo, hi)
            Xt = _from_theta(trial)
            et = evaluate(Xt, False)
            if et is not None and np.isfinite(et.total):
                decrease = float(np.sum(g_theta * (trial - theta)))
                if et.total <= f + cfg.armijo_c * decrease:
                    accepted = (Xt, et)
                    break
            alpha *= cfg.shrink
        if accepted is None:
            converged = True
            break
        Xt, et = accepted
        try:
            Xr = _renormalize(Xt)
            er = evaluate(Xr, False)
            if er is not None and er.total <= et.total:
                Xt, et = Xr, er
        except DegenerateRotation:
            pass
        drop = f - et.total
        X, f = Xt, et.total
        history.append(f)
        alpha = min(alpha * cfg.grow, cfg.max_alpha)
        ev = evaluate(X, True)
        if drop < cfg.tol:
            converged = True
            break

    final = evaluate(X, False)
    cubes = [Cube.from_vector(x) for x in X]
    return FitResult(
        cubes=cubes,
        classes=classes,
        breakdowns=[final.breakdown(i) for i in range(len(cubes))],
        scene=final.scene_breakdown(),
        iterations=it,
        converged=converged,
        scores=[float(np.exp(-l)) for l in final.l3d],
        history=history,
    )
