"""Command line entry point: ``occflow gen|fit|eval``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, incompatible grids), 3 numeric failure (divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .metrics import dumps_report, metric_report
from .pipeline import (RunConfig, eval_rays, fit, forward, init_model, load_run, predict,
                       semantic_classes)
from .plots import label_svg, scalar_svg, top_labels
from .scenes import load_grid, load_scene, occluded_length_gt, render, save_grid, save_scene

log = logging.getLogger("occflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occflow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("gen", "fit", "eval"))
    p.add_argument("--config", default="two_boxes",
                   help="config file, or the name of a shipped config (two_boxes, smoke)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-denoise", action="store_true")
    p.add_argument("--no-inter-object", action="store_true")
    p.add_argument("--no-cost-volume", action="store_true")
    p.add_argument("--no-occlusion-kernel", action="store_true",
                   help="zero occlusion kernel: lift with the plain depth distribution")
    p.add_argument("--pred", help="eval: directory holding pred_labels.ocgr / pred_flow.ocgr")
    p.add_argument("--gt", help="eval: directory holding labels_t.ocgr / flow_t.ocgr")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be non-negative")
        cfg.steps = args.steps
    if args.lr is not None:
        cfg.lr = args.lr
    cfg.denoise &= not args.no_denoise
    cfg.inter_object &= not args.no_inter_object
    cfg.cost_volume &= not args.no_cost_volume
    cfg.occlusion_kernel &= not args.no_occlusion_kernel
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(cfg: RunConfig) -> dict:
    data = load_run(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(data.spec, out / "scene.json")
    save_grid(out / "labels_prev.ocgr", data.prev.labels)
    save_grid(out / "labels_t.ocgr", data.cur.labels)
    save_grid(out / "flow_t.ocgr", data.flow)
    views = render(data.spec, data.cur.labels)
    # misses are stored as 0 since dumps hold finite values only
    depth = np.stack([np.where(np.isfinite(v.depth), v.depth, 0.0) for v in views])
    occl = np.stack([np.nan_to_num(occluded_length_gt(v, c, data.spec.grid, data.cur.labels))
                     for v, c in zip(views, data.spec.cameras)])
    ng.save_tensor(out / "depth_t.oclt", depth)
    ng.save_tensor(out / "occluded_t.oclt", occl)
    summary = {
        "occupied_t": int(np.sum(data.cur.labels != 255)),
        "occupied_prev": int(np.sum(data.prev.labels != 255)),
        "moving_voxels": int(np.sum(np.linalg.norm(data.flow, axis=-1) > 0)),
        "grid_dims": list(data.spec.grid.dims),
    }
    _write_json(out / "gen.json", summary)
    return summary


def cmd_fit(cfg: RunConfig) -> dict:
    data = load_run(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg, data.n_pixels, data.spec.n_classes)
    trace = fit(model, data, cfg)
    _write_json(out / "trace.json", {"config": cfg.to_dict(), "trace": trace})
    pdir = out / "params"
    pdir.mkdir(exist_ok=True)
    for name, t in model.named_parameters():
        ng.save_tensor(pdir / f"{name}.oclt", t)
    pred = predict(model, data, cfg)
    save_grid(out / "pred_labels.ocgr", pred.labels)
    save_grid(out / "pred_flow.ocgr", pred.flow)
    res = forward(model, data, cfg, step=None)
    if res["cost_volume"] is not None:
        ng.save_tensor(out / "cost_volume.oclt", res["cost_volume"].scores)
    return {"initial": trace[0], "final": trace[-1]}


def _load_pair(pred_dir: Path, gt_dir: Path):
    pred_labels = load_grid(pred_dir / "pred_labels.ocgr")
    gt_labels = load_grid(gt_dir / "labels_t.ocgr")
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"grid dimensions differ: prediction {pred_labels.shape}, "
                         f"ground truth {gt_labels.shape}")
    pred_flow = gt_flow = None
    if (pred_dir / "pred_flow.ocgr").exists() and (gt_dir / "flow_t.ocgr").exists():
        pred_flow = load_grid(pred_dir / "pred_flow.ocgr")
        gt_flow = load_grid(gt_dir / "flow_t.ocgr")
        if pred_flow.shape != gt_flow.shape or pred_flow.shape[:3] != gt_labels.shape:
            raise ValueError("flow grid dimensions differ")
    return pred_labels, gt_labels, pred_flow, gt_flow


def cmd_eval(cfg: RunConfig, pred_dir=None, gt_dir=None, plots: bool = True) -> dict:
    out = Path(cfg.out)
    pred_dir = Path(pred_dir) if pred_dir else out
    gt_dir = Path(gt_dir) if gt_dir else out
    scene_file = gt_dir / "scene.json"
    spec = load_scene(scene_file if scene_file.exists() else cfg.scene_path())
    pred_labels, gt_labels, pred_flow, gt_flow = _load_pair(pred_dir, gt_dir)
    if tuple(gt_labels.shape) != tuple(spec.grid.dims):
        raise ValueError(f"ground truth grid {gt_labels.shape} does not match scene "
                         f"grid {spec.grid.dims}")
    rays = eval_rays(spec, gt_labels)
    report = metric_report(pred_labels, gt_labels, spec.grid, rays, semantic_classes(spec),
                           spec.dynamic_classes, pred_flow, gt_flow, cfg.class_names)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps_report(report))
    if plots:
        (out / "bev_pred_labels.svg").write_text(label_svg(top_labels(pred_labels), "pred labels"))
        (out / "bev_gt_labels.svg").write_text(label_svg(top_labels(gt_labels), "gt labels"))
        if pred_flow is not None:
            speed = np.linalg.norm(pred_flow, axis=-1).max(axis=2)
            (out / "bev_pred_speed.svg").write_text(scalar_svg(speed, "pred speed m/s"))
        cv_file = pred_dir / "cost_volume.oclt"
        if cv_file.exists():
            cv = ng.load_tensor(cv_file).data
            (out / "bev_cost_peak.svg").write_text(
                scalar_svg(cv.max(axis=-1), "cost volume peak", lo=-1.0, hi=1.0))
    return report


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = make_config(args)
        if args.command == "gen":
            result = cmd_gen(cfg)
        elif args.command == "fit":
            result = cmd_fit(cfg)
        else:
            result = cmd_eval(cfg, args.pred, args.gt, plots=not args.no_plots)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ng.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
