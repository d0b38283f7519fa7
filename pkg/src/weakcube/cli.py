"""Command-line front end: synth, pseudo-gt, fit and eval.

Exit codes: 0 on success (possibly with per-scene warnings), 2 on usage or
configuration errors, 3 on IO errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .eval3d import DEFAULT_TAUS, Detection, EvalConfig, OrientedBox, ap3d, filter_objects, iou3d
from .fileio import FormatError, atomic_write_text, fmt6, read_json, write_json
from .fit import FitConfig, MissingPrior, MissingPseudoDepth, PseudoGT, fit_scene
from .geometry import Cube, cube_center, cube_rotation
from .losses import TERMS, LossWeights, dim_zscore, dump_priors, load_priors
from .pseudo_gt import GroundEstimate, NoValidDepth, RansacConfig, estimate_ground, sample_depth_at_center
from .synth import SCENE_JSON, InfeasiblePlacement, SynthConfig, generate_scene, load_scene, save_scene

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3
MANIFEST = "manifest.json"
PRIORS_JSON = "priors.json"
PSEUDO_JSON = "pseudo_gt.json"
FIT_JSON = "fit.json"
UP_TOLERANCE_DEG = 5.0


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _rel(path, base) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(base))


def _workers(requested: int | None) -> int:
    env = os.environ.get("WEAKCUBE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"WEAKCUBE_THREADS must be an integer, got {env!r}") from None
    else:
        n = requested or 1
    if n < 1:
        raise UsageError("worker count must be at least 1")
    return n


def _map(fn, items, workers):
    """Apply ``fn`` over ``items`` preserving order, optionally in worker processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _scene_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / SCENE_JSON).exists())


def _warn(msg: str, warnings: list[str]) -> None:
    warnings.append(msg)
    print(f"warning: {msg}", file=sys.stderr)


def _write_manifest(out: Path, command: str, config: dict, seeds, inputs: dict,
                    outputs: list[str], started: float, warnings=(), failures=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: _rel(v, out) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "version": __version__,
        "warnings": list(warnings),
        "failures": failures or {},
        "wall_clock": {
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "elapsed_s": round(time.time() - started, 3),
        },
    }
    write_json(out / MANIFEST, manifest)


def _load_priors(path: Path) -> dict:
    try:
        records = read_json(path)
    except json.JSONDecodeError as exc:
        raise UsageError(f"priors file {path} is not valid JSON: {exc}") from None
    try:
        return load_priors(records)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad priors file {path}: {exc}") from None


# -------------------------------------------------------------------- synth


SYNTH_REDRAWS = 10


def scene_seed(seed: int, index: int, redraw: int = 0) -> int:
    """Per-scene seed derived from the run seed, the scene index and the redraw count."""
    key = [seed, index] if redraw == 0 else [seed, index, redraw]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def cmd_synth(args) -> int:
    started = time.time()
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    cfg = SynthConfig()
    if args.config:
        try:
            raw = read_json(args.config)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        try:
            cfg = SynthConfig.from_dict(raw)
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"bad synth config: {exc}") from None
    out = Path(args.out)
    jobs = [(cfg, args.seed, i, out / f"scene_{i:04d}") for i in range(args.count)]
    results = _map(_synth_one, jobs, _workers(args.workers))
    warnings, failures, outputs, seeds = [], {}, [PRIORS_JSON], []
    for (_, _, _, d), (seed, errors, ok) in zip(jobs, results):
        seeds.append(seed)
        for err in errors:
            _warn(f"{d.name}: {err}" + ("; redrawn" if ok else ""), warnings)
        if ok:
            outputs.append(d.name)
        else:
            failures[d.name] = errors[-1]
    write_json(out / PRIORS_JSON, dump_priors({p.name: p for p in cfg.priors}))
    _write_manifest(out, "synth", {"synth": cfg.to_dict(), "count": args.count},
                    {"run": args.seed, "scenes": seeds}, {}, outputs, started, warnings, failures)
    print(f"wrote {len(outputs) - 1} scenes to {out}")
    return EXIT_OK


def _synth_one(job):
    """Generate one scene, redrawing infeasible layouts; returns (seed used, errors, success)."""
    cfg, run_seed, index, directory = job
    errors = []
    for redraw in range(SYNTH_REDRAWS):
        seed = scene_seed(run_seed, index, redraw)
        try:
            scene = generate_scene(cfg, seed)
        except InfeasiblePlacement as exc:
            errors.append(str(exc))
            continue
        save_scene(scene, directory)
        return seed, errors, True
    return seed, errors, False


# ---------------------------------------------------------------- pseudo-gt


def cmd_pseudo_gt(args) -> int:
    started = time.time()
    rcfg = RansacConfig(iters=args.ransac_iters, inlier_tol=args.inlier_tol, seed=args.seed)
    if rcfg.iters < 1 or rcfg.inlier_tol <= 0:
        raise UsageError("--ransac-iters must be >= 1 and --inlier-tol > 0")
    scenes = Path(args.scenes)
    out = Path(args.out)
    dirs = _scene_dirs(scenes)
    jobs = [(d, out / d.name, rcfg, args.no_mask) for d in dirs]
    results = _map(_pseudo_one, jobs, _workers(args.workers))
    warnings, failures, outputs = [], {}, []
    for d, err in zip(dirs, results):
        if err:
            failures[d.name] = err
            _warn(f"{d.name}: {err}", warnings)
        else:
            outputs.append(d.name)
    config = {"ransac": {"iters": rcfg.iters, "inlier_tol": rcfg.inlier_tol,
                         "min_inlier_frac": rcfg.min_inlier_frac,
                         "min_mask_frac": rcfg.min_mask_frac},
              "no_mask": bool(args.no_mask)}
    _write_manifest(out, "pseudo-gt", config, {"ransac": rcfg.seed}, {"scenes": scenes},
                    outputs, started, warnings, failures)
    print(f"pseudo labels for {len(outputs)}/{len(dirs)} scenes ({len(warnings)} warnings)")
    return EXIT_OK


def _pseudo_one(job):
    src, dst, rcfg, no_mask = job
    try:
        scene = load_scene(src)
        mask = None if no_mask else scene.ground_mask
        ground = estimate_ground(scene.depth, scene.camera, mask, rcfg)
        depths = [sample_depth_at_center(scene.depth, o.box2d) for o in scene.objects]
    except (FormatError, NoValidDepth, ValueError, KeyError, OSError) as exc:
        return f"{type(exc).__name__}: {exc}"
    write_json(dst / PSEUDO_JSON, {"per_box_depth": [float(z) for z in depths],
                                   "ground": ground.to_dict()})
    return None


# ---------------------------------------------------------------------- fit


def _fit_weights(args) -> LossWeights:
    base = LossWeights(giou=args.lambda_giou, z=args.lambda_z, dim=args.lambda_dim,
                       normal=args.lambda_normal, pose=args.lambda_pose)
    if any(v < 0 for v in base.as_array()):
        raise UsageError("loss weights must be non-negative")
    for term in args.ablate or []:
        try:
            base = base.ablate(term)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return base


def cmd_fit(args) -> int:
    started = time.time()
    weights = _fit_weights(args)
    try:
        cfg = FitConfig(max_iters=args.max_iters, tol=args.tol, weights=weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scenes, pseudo_dir, out = Path(args.scenes), Path(args.pseudo), Path(args.out)
    priors_path = Path(args.priors) if args.priors else scenes / PRIORS_JSON
    priors = _load_priors(priors_path)
    if not pseudo_dir.is_dir():
        raise FileNotFoundError(f"pseudo-label directory not found: {pseudo_dir}")
    dirs = _scene_dirs(scenes)
    jobs = [(d, pseudo_dir / d.name / PSEUDO_JSON, out / d.name, priors, cfg) for d in dirs]
    results = _map(_fit_one, jobs, _workers(args.workers))

    warnings, failures, outputs, histories = [], {}, [], {}
    for d, res in zip(dirs, results):
        if isinstance(res, str):
            failures[d.name] = res
            _warn(f"{d.name}: {res}", warnings)
        else:
            outputs.append(d.name)
            histories[d.name] = res
    _write_loss_curves(out, histories)
    outputs += ["loss_curves.csv", "loss_curves.png"]
    config = {"fit": cfg.to_dict(), "ablate": sorted(args.ablate or [])}
    _write_manifest(out, "fit", config, {"fit": cfg.seed},
                    {"scenes": scenes, "pseudo": pseudo_dir, "priors": priors_path},
                    outputs, started, warnings, failures)
    if histories:
        first = np.mean([h[0] for h in histories.values()])
        last = np.mean([h[-1] for h in histories.values()])
        print(f"fitted {len(histories)}/{len(dirs)} scenes: mean loss {fmt6(first)} -> {fmt6(last)}")
    else:
        print(f"fitted 0/{len(dirs)} scenes")
    return EXIT_OK


def _fit_one(job):
    src, pseudo_path, dst, priors, cfg = job
    try:
        scene = load_scene(src, with_maps=False)
        raw = read_json(pseudo_path)
        pseudo = PseudoGT([float(z) for z in raw["per_box_depth"]],
                          GroundEstimate.from_dict(raw["ground"]), priors)
        boxes = [(o.box2d, o.cls) for o in scene.objects]
        result = fit_scene(boxes, pseudo, scene.camera, cfg)
    except MissingPrior as exc:
        return f"MissingPrior: no prior for class {exc}"
    except (MissingPseudoDepth, ValueError, KeyError, OSError) as exc:
        return f"{type(exc).__name__}: {exc}"
    record = result.to_dict()
    for obj, cube, cls in zip(record["objects"], result.cubes, result.classes):
        obj["dim_zscore"] = dim_zscore(cube.dims, priors[cls])
    write_json(dst / FIT_JSON, record)
    return result.history


def _write_loss_curves(out: Path, histories: dict) -> None:
    from .plotting import plot_loss_curves

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scene", "iteration", "loss"])
    for name in sorted(histories):
        for k, v in enumerate(histories[name]):
            writer.writerow([name, k, repr(fmt6(v))])
    atomic_write_text(out / "loss_curves.csv", buf.getvalue())
    plot_loss_curves(histories, out / "loss_curves.png")


# --------------------------------------------------------------------- eval


def _cube_box(cube: Cube, cam) -> OrientedBox:
    return OrientedBox(cube_center(cube, cam), cube.dims, cube_rotation(cube, cam))


def _up_error_deg(R_fit, R_gt) -> float:
    up = np.array([0.0, -1.0, 0.0])
    c = np.clip((R_fit @ up) @ (R_gt @ up), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def evaluate_dirs(fits: Path, scenes: Path, cfg: EvalConfig, warnings: list[str]):
    """Pair each fitted scene with its ground truth and score it.

    Returns the AP result and per-object diagnostics for the evaluated
    (unfiltered) objects.
    """
    if not fits.is_dir():
        raise FileNotFoundError(f"fit directory not found: {fits}")
    scene_dirs = {d.name: d for d in _scene_dirs(scenes)}
    fit_names = sorted(p.parent.name for p in fits.glob(f"*/{FIT_JSON}"))
    unknown = [n for n in fit_names if n not in scene_dirs]
    if unknown:
        raise UsageError(f"fits without a matching scene: {', '.join(unknown)}")
    if not fit_names:
        _warn("no fits found; every ground truth counts as missed", warnings)
    dets, gts, ignored = [], [], []
    diag = {"iou3d": [], "up_error_deg": [], "dim_zscore": []}
    for name in sorted(scene_dirs):
        scene = load_scene(scene_dirs[name], with_maps=False)
        all_gt = [o.ground_truth(name) for o in scene.objects]
        kept = filter_objects(all_gt, cfg, scene.camera)
        kept_ids = {id(g) for g in kept}
        gts += kept
        ignored += [g for g in all_gt if id(g) not in kept_ids]
        if name not in fit_names:
            if fit_names:
                _warn(f"{name}: no fit, its objects count as missed", warnings)
            continue
        record = read_json(fits / name / FIT_JSON)
        objs = record["objects"]
        if len(objs) != len(scene.objects):
            raise UsageError(f"{name}: fit has {len(objs)} objects, scene has {len(scene.objects)}")
        for obj, gt in zip(objs, all_gt):
            if obj["class"] != gt.cls:
                raise UsageError(f"{name}: class mismatch {obj['class']} vs {gt.cls}")
            box = _cube_box(Cube.from_dict(obj["cube"]), scene.camera)
            dets.append(Detection(name, obj["class"], box, float(obj["score"])))
            if id(gt) in kept_ids:
                diag["iou3d"].append(iou3d(box, gt.box))
                diag["up_error_deg"].append(_up_error_deg(box.R, gt.box.R))
                if "dim_zscore" in obj:
                    diag["dim_zscore"].append(float(obj["dim_zscore"]))
    return ap3d(dets, gts, cfg, ignored), diag, len(scene_dirs), len(fit_names)


def build_report(result, diag, n_scenes, n_fits, cfg: EvalConfig, warnings) -> dict:
    def stat(values, fn):
        return fmt6(fn(values)) if values else None

    return {
        "taus": [fmt6(t) for t in cfg.taus],
        "mean_ap": fmt6(result.mean_ap),
        "mean_ap_per_tau": {f"{t:g}": fmt6(v) for t, v in result.mean_ap_per_tau.items()},
        "per_class": {
            cls: {"ap": fmt6(rec["ap"]),
                  "ap_per_tau": {f"{t:g}": fmt6(v) for t, v in rec["ap_per_tau"].items()},
                  "num_gt": rec["num_gt"], "num_det": rec["num_det"]}
            for cls, rec in sorted(result.per_class.items())
        },
        "diagnostics": {
            "num_scenes": n_scenes,
            "num_fitted_scenes": n_fits,
            "num_evaluated_objects": len(diag["iou3d"]),
            "mean_iou3d": stat(diag["iou3d"], np.mean),
            "mean_dim_zscore": stat(diag["dim_zscore"], np.mean),
            "median_up_error_deg": stat(diag["up_error_deg"], np.median),
            "frac_up_error_below_5deg": stat(
                diag["up_error_deg"], lambda v: np.mean(np.asarray(v) < UP_TOLERANCE_DEG)),
        },
        "warnings": list(warnings),
    }


def format_table(report: dict) -> str:
    taus = [f"{t:g}" for t in report["taus"]]
    header = ["class"] + [f"@{t}" for t in taus] + ["mean"]
    rows = [[cls] + [f"{rec['ap_per_tau'][t]:.4f}" for t in taus] + [f"{rec['ap']:.4f}"]
            for cls, rec in report["per_class"].items()]
    rows.append(["all"] + [f"{report['mean_ap_per_tau'][t]:.4f}" for t in taus]
                + [f"{report['mean_ap']:.4f}"])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def _report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    taus = [f"{t:g}" for t in report["taus"]]
    writer.writerow(["class"] + [f"ap@{t}" for t in taus] + ["ap_mean", "num_gt", "num_det"])
    for cls, rec in report["per_class"].items():
        writer.writerow([cls] + [repr(rec["ap_per_tau"][t]) for t in taus]
                        + [repr(rec["ap"]), rec["num_gt"], rec["num_det"]])
    writer.writerow(["mean"] + [repr(report["mean_ap_per_tau"][t]) for t in taus]
                    + [repr(report["mean_ap"]), "", ""])
    return buf.getvalue()


def cmd_eval(args) -> int:
    from .plotting import plot_ap_vs_tau, plot_pr_curves

    started = time.time()
    try:
        cfg = EvalConfig(taus=tuple(args.taus)) if args.taus else EvalConfig()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pr_tau = args.pr_tau
    if pr_tau not in cfg.taus:
        raise UsageError(f"--pr-tau {pr_tau:g} is not one of the evaluated thresholds")
    fits, scenes, out = Path(args.fits), Path(args.scenes), Path(args.out)
    warnings: list[str] = []
    result, diag, n_scenes, n_fits = evaluate_dirs(fits, scenes, cfg, warnings)
    report = build_report(result, diag, n_scenes, n_fits, cfg, warnings)
    write_json(out / "report.json", report)
    atomic_write_text(out / "report.csv", _report_csv(report))
    plot_ap_vs_tau(result, out / "ap_vs_tau.png")
    pr_name = f"pr_curves_tau{pr_tau:g}.png"
    plot_pr_curves(result, pr_tau, out / pr_name)
    _write_manifest(out, "eval", {"taus": list(cfg.taus), "max_occlusion": cfg.max_occlusion,
                                  "max_truncation": cfg.max_truncation,
                                  "min_height_frac": cfg.min_height_frac, "pr_tau": pr_tau},
                    {}, {"fits": fits, "scenes": scenes},
                    ["report.json", "report.csv", "ap_vs_tau.png", pr_name], started, warnings)
    print(format_table(report))
    d = report["diagnostics"]
    print(f"mean IoU3D {d['mean_iou3d']}  up-axis < 5 deg: {d['frac_up_error_below_5deg']}  "
          f"mean dim z-score {d['mean_dim_zscore']}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakcube", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--config", help="JSON file overriding synthetic-world settings")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("pseudo-gt", help="pseudo depth and ground normal per scene")
    g.add_argument("--scenes", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--no-mask", action="store_true", help="ignore ground masks (low-confidence fallback)")
    g.add_argument("--ransac-iters", type=int, default=RansacConfig.iters)
    g.add_argument("--inlier-tol", type=float, default=RansacConfig.inlier_tol)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_pseudo_gt)

    f = sub.add_parser("fit", help="fit cubes to every scene")
    f.add_argument("--scenes", required=True)
    f.add_argument("--pseudo", required=True)
    f.add_argument("--priors", help="class priors JSON (default: <scenes>/priors.json)")
    f.add_argument("--out", required=True)
    f.add_argument("--ablate", action="append", metavar="TERM",
                   help=f"zero one loss weight; one of {', '.join(TERMS)} (repeatable)")
    d = LossWeights()
    for term in TERMS:
        f.add_argument(f"--lambda-{term}", type=float, default=getattr(d, term))
    f.add_argument("--max-iters", type=int, default=FitConfig.max_iters)
    f.add_argument("--tol", type=float, default=FitConfig.tol)
    f.add_argument("--workers", type=int)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score fits against ground truth")
    e.add_argument("--fits", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--taus", type=float, nargs="+", help=f"IoU thresholds (default {DEFAULT_TAUS[0]:g}..{DEFAULT_TAUS[-1]:g})")
    e.add_argument("--pr-tau", type=float, default=0.25)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
