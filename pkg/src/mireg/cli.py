"""Command-line entry point: synth, register, baseline, eval, bench.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
Config files hold flat dotted keys (see ``PipelineConfig``); flags given on
the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import geom
from .matching import write_correspondence_csv
from .metrics import PROFILES, PairCounts, aggregate, get_profile, match_instances
from .pipeline import MODES, PipelineConfig, register, run_baseline
from .pose import STRATEGIES, RegistrationResult
from .scenegen import SceneAnnotation, SceneConfig, generate_scene, load_bundle, make_robot_model, save_bundle

log = logging.getLogger("mireg")


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _pipeline_config(args) -> PipelineConfig:
    try:
        cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
        return cfg.with_overrides(
            seed=getattr(args, "seed", None),
            mode=getattr(args, "mode", None),
            profile=getattr(args, "profile", None),
            strategy=getattr(args, "strategy", None),
            weights=getattr(args, "weights", None),
            inlier_ratio=getattr(args, "inlier_ratio", None),
        )
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _load(bundle):
    try:
        return load_bundle(bundle)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read bundle {bundle}: {exc}") from exc


# ---------------------------------------------------------------------------
# synth


def make_scene(instances: int, seed: int, noise_fraction: float = 0.0, outlier_fraction: float = 0.0,
               occlusion_fraction: float = 0.0, spacing: float = 0.03, normals: bool = False):
    model = make_robot_model(spacing)
    if normals:
        model = geom.estimate_normals_curvature(model, 16)
    sigma = noise_fraction * geom.bbox_diagonal(model)
    cfg = SceneConfig(instances=instances, noise_sigma=sigma, outlier_fraction=outlier_fraction,
                      occlusion_fraction=occlusion_fraction)
    target, ann = generate_scene(model, cfg, seed, with_normals=normals)
    ann.config["spacing"] = spacing
    ann.config["normals"] = normals
    return model, target, ann


def cmd_synth(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    if not 0.0 <= args.outliers < 1.0 or args.noise < 0 or not 0.0 <= args.occlusion < 1.0:
        raise UsageError("--noise must be >= 0; --outliers and --occlusion must lie in [0, 1)")
    model, target, ann = make_scene(args.instances, args.seed, args.noise, args.outliers,
                                    args.occlusion, args.spacing, args.normals)
    out = save_bundle(args.out, model, target, ann)
    log.info("wrote %s (%d scene points, %d instances)", out, len(target), len(ann.instance_transforms))
    return 0


# ---------------------------------------------------------------------------
# register / baseline


def _results_doc(result: RegistrationResult, cfg: PipelineConfig) -> dict:
    doc = result.to_json()
    doc["config"] = cfg.to_dict()
    return doc


def _run(args, baseline: bool) -> int:
    cfg = _pipeline_config(args)
    if cfg.mode == "weights-file" and (not cfg.weights or not Path(cfg.weights).is_file()):
        raise UsageError(f"weights file not found: {cfg.weights}")
    model, target, ann = _load(args.bundle)
    try:
        if baseline:
            out = run_baseline(model, target, ann, cfg)
        else:
            out = register(model, target, cfg, ann)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(args.out)
    _write(out_dir / "results.json", _dump(_results_doc(out.result, cfg)))
    _write(out_dir / "timing.json", _dump({"runtime_seconds": out.runtime_seconds}))
    if not baseline:
        out_dir.mkdir(parents=True, exist_ok=True)
        sets = [(-1, out.sparse)] + list(out.candidates)
        write_correspondence_csv(out_dir / "correspondences.csv", sets)
    log.info("%d instances in %.2fs", len(out.result.instances), out.runtime_seconds)
    return 0


def cmd_register(args) -> int:
    return _run(args, baseline=False)


def cmd_baseline(args) -> int:
    return _run(args, baseline=True)


# ---------------------------------------------------------------------------
# eval


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _transforms(doc: dict, path):
    """Predicted transforms from a results file, or ground truth from an annotation."""
    try:
        if "instances" in doc:
            return RegistrationResult.from_json(doc).transforms
        if "instance_transforms" in doc:
            return SceneAnnotation.from_json(doc).instance_transforms
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    raise UsageError(f"{path}: neither a results file nor an annotation")


def _counts_from_file(doc: dict, path) -> list[PairCounts]:
    try:
        return [PairCounts(int(r["M_suc"]), int(r["M_gt"]), int(r["M_pred"]), scene_id=str(r.get("scene_id", i)))
                for i, r in enumerate(doc["per_pair"])]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: bad counts file: {exc}") from exc


def cmd_eval(args) -> int:
    profile = get_profile(args.profile)
    if args.counts:
        per_pair = _counts_from_file(_read_json(args.counts), args.counts)
        if not per_pair:
            raise UsageError("counts file lists no scene pairs")
    else:
        if not (args.results and args.annotation):
            raise UsageError("eval needs RESULTS and ANNOTATION, or --counts")
        pred = _transforms(_read_json(args.results), args.results)
        ann_doc = _read_json(args.annotation)
        if "instance_transforms" not in ann_doc:
            raise UsageError(f"{args.annotation}: not an annotation file")
        gt = _transforms(ann_doc, args.annotation)
        c = match_instances(pred, gt, profile)
        c.scene_id = str(Path(args.annotation).parent.name or args.annotation)
        timing = Path(args.results).parent / "timing.json"
        if timing.is_file():
            c.runtime_seconds = float(_read_json(timing).get("runtime_seconds", 0.0))
        per_pair = [c]
    report = aggregate(per_pair)
    doc = report.to_json()
    doc["profile"] = {"name": profile.name, "re_max": profile.re_max, "te_max": profile.te_max}
    out = Path(args.out)
    _write(out / "report.json", _dump(doc))
    _write(out / "report.csv", report.to_csv())
    print(f"MR={report.mr:.4f} MP={report.mp:.4f} MF={report.mf:.4f}")
    return 0


# ---------------------------------------------------------------------------
# bench

SUITE_DEFAULTS = {
    "suite.seeds": [0, 1, 2],
    "suite.instances": [2, 4],
    "suite.noise_fraction": 0.0,
    "suite.outlier_fraction": 0.0,
    "suite.spacing": 0.03,
    "suite.methods": ["register"],
}


def load_suite(path) -> tuple[dict, PipelineConfig]:
    doc = yaml.safe_load(Path(path).read_text()) if path else {}
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ValueError("suite config must be a mapping of dotted keys")
    suite = dict(SUITE_DEFAULTS)
    suite.update({k: v for k, v in doc.items() if k.startswith("suite.")})
    unknown = sorted(set(suite) - set(SUITE_DEFAULTS))
    if unknown:
        raise ValueError(f"unknown suite keys: {unknown}")
    bad = [m for m in suite["suite.methods"] if m not in ("register", "baseline")]
    if bad:
        raise ValueError(f"unknown methods {bad}")
    cfg = PipelineConfig.from_dict({k: v for k, v in doc.items() if not k.startswith("suite.")})
    return suite, cfg


def run_cell(job) -> dict:
    """One (method, instance count, seed) cell; failures become a status string."""
    method, instances, seed, suite, cfg_doc = job
    row = {"method": method, "instances": instances, "seed": seed}
    try:
        cfg = PipelineConfig.from_dict(cfg_doc).with_overrides(seed=seed)
        model, target, ann = make_scene(instances, seed, suite["suite.noise_fraction"],
                                        suite["suite.outlier_fraction"], 0.0, suite["suite.spacing"],
                                        cfg.strategy == "point-to-plane")
        out = register(model, target, cfg, ann) if method == "register" else run_baseline(model, target, ann, cfg)
        c = match_instances(out.result.transforms, ann.instance_transforms, get_profile(cfg.profile))
        row.update(status="ok", M_suc=c.m_suc, M_gt=c.m_gt, M_pred=c.m_pred, runtime_seconds=out.runtime_seconds)
    except Exception as exc:  # one bad cell must not sink the suite
        row.update(status=f"error: {type(exc).__name__}: {exc}", M_suc="", M_gt="", M_pred="", runtime_seconds="")
    return row


def run_suite(suite: dict, cfg: PipelineConfig, workers: int = 1) -> list[dict]:
    jobs = [(m, int(j), int(s), suite, cfg.to_dict())
            for m in suite["suite.methods"] for j in suite["suite.instances"] for s in suite["suite.seeds"]]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_cell, jobs))
    return [run_cell(j) for j in jobs]


CELL_FIELDS = ["method", "instances", "seed", "status", "M_suc", "M_gt", "M_pred"]
SUMMARY_FIELDS = ["method", "instances", "scenes", "failed", "MR", "MR_std", "MP", "MP_std", "MF"]


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    keys = sorted({(r["method"], r["instances"]) for r in rows})
    for method, j in keys:
        cell = [r for r in rows if r["method"] == method and r["instances"] == j]
        ok = [r for r in cell if r["status"] == "ok"]
        entry = {"method": method, "instances": j, "scenes": len(cell), "failed": len(cell) - len(ok)}
        if ok:
            counts = [PairCounts(r["M_suc"], r["M_gt"], r["M_pred"]) for r in ok]
            rep = aggregate(counts)
            rec = [c.m_suc / c.m_gt if c.m_gt else 0.0 for c in counts]
            prec = [c.m_suc / c.m_pred if c.m_pred else 0.0 for c in counts]
            entry.update(MR=f"{rep.mr:.6f}", MR_std=f"{np.std(rec):.6f}", MP=f"{rep.mp:.6f}",
                         MP_std=f"{np.std(prec):.6f}", MF=f"{rep.mf:.6f}")
        out.append(entry)
    return out


def _write_csv(path: Path, fieldnames, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_bench(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        suite, cfg = load_suite(args.config)
        cfg = cfg.with_overrides(mode=args.mode, profile=args.profile, strategy=args.strategy)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"bad suite config: {exc}") from exc
    if args.seed is not None:
        rng = np.random.default_rng(args.seed)
        suite["suite.seeds"] = sorted(rng.choice(2**31, size=len(suite["suite.seeds"]), replace=False).tolist())
    rows = run_suite(suite, cfg, args.workers)
    out = Path(args.out)
    _write_csv(out / "cells.csv", CELL_FIELDS, rows)
    _write_csv(out / "timing.csv", ["method", "instances", "seed", "runtime_seconds"], rows)
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summarize(rows))
    failed = sum(r["status"] != "ok" for r in rows)
    log.info("%d cells, %d failed", len(rows), failed)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mireg", description="Multi-instance point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--instances", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="noise sigma as a fraction of the model diameter")
    s.add_argument("--outliers", type=float, default=0.0, help="background outlier fraction of all points")
    s.add_argument("--occlusion", type=float, default=0.0)
    s.add_argument("--spacing", type=float, default=0.03, help="model sampling spacing in meters")
    s.add_argument("--normals", action="store_true", help="store estimated normals in the bundle")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("register", cmd_register, "run the full pipeline on a bundle"),
                              ("baseline", cmd_baseline, "run sequential RANSAC on a bundle")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("bundle")
        r.add_argument("--config")
        r.add_argument("--seed", type=int)
        r.add_argument("--mode", choices=MODES)
        r.add_argument("--weights")
        r.add_argument("--strategy", choices=STRATEGIES)
        r.add_argument("--profile", choices=sorted(PROFILES))
        r.add_argument("--inlier-ratio", type=float, dest="inlier_ratio")
        r.add_argument("--out", required=True)
        r.set_defaults(func=func)

    e = sub.add_parser("eval", help="score results against an annotation")
    e.add_argument("results", nargs="?")
    e.add_argument("annotation", nargs="?")
    e.add_argument("--counts", help="JSON with per_pair M_suc/M_gt/M_pred rows instead of files")
    e.add_argument("--profile", choices=sorted(PROFILES), default="welding")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a synth+register+eval grid")
    b.add_argument("--config")
    b.add_argument("--seed", type=int, help="derive the scene seeds from this suite seed")
    b.add_argument("--mode", choices=MODES)
    b.add_argument("--profile", choices=sorted(PROFILES))
    b.add_argument("--strategy", choices=STRATEGIES)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mireg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"mireg {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
