"""Occupancy and flow evaluation: voxel IoU, ray IoU, velocity errors, Occ Score."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, VoxelGridSpec
from .scenes import RayHit, cast_ray
from .semhead import EMPTY

RAY_THRESHOLDS = (1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0

# Occ3D ordering; the eight dynamic categories are listed separately
OCC3D_CLASSES = (
    "others", "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle",
    "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface", "other_flat",
    "sidewalk", "terrain", "manmade", "vegetation",
)
OCC3D_DYNAMIC = ("bicycle", "bus", "car", "construction_vehicle", "motorcycle",
                 "pedestrian", "trailer", "truck")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        for arr in (self.tp, self.fp, self.fn):
            if np.any(np.asarray(arr) < 0):
                raise ValueError("confusion counts must be non-negative")

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class never appears."""
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


def mean_iou(values) -> float:
    """Plain average of already-computed per-class IoUs (NaNs skipped)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise ValueError("no classes to average")
    return float(v.mean())


def voxel_confusion(pred: np.ndarray, gt: np.ndarray, classes) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"grid shapes differ: {pred.shape} vs {gt.shape}")
    tp, fp, fn = [], [], []
    for c in classes:
        p, g = pred == c, gt == c
        tp.append(np.sum(p & g))
        fp.append(np.sum(p & ~g))
        fn.append(np.sum(~p & g))
    return ConfusionCounts(np.array(tp), np.array(fp), np.array(fn))


def miou(pred: np.ndarray, gt: np.ndarray, classes) -> tuple[np.ndarray, float]:
    """Per-class voxel IoU over ``classes`` and their mean.

    Classes absent from both grids get NaN and are left out of the mean.
    """
    per_class = voxel_confusion(pred, gt, classes).iou()
    return per_class, mean_iou(per_class)


# -- rays ----------------------------------------------------------------------

@dataclass
class RayQuerySet:
    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3) unit
    gt_class: np.ndarray       # (R,) EMPTY on miss
    gt_depth: np.ndarray       # (R,) metres, inf on miss
    gt_voxel: np.ndarray       # (R, 3), -1 on miss

    def __post_init__(self):
        n = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(n, 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit length")

    def __len__(self):
        return self.origins.shape[0]


def cast_all(labels: np.ndarray, grid: VoxelGridSpec, origins, directions) -> list[RayHit]:
    return [cast_ray(labels, grid, o, d) for o, d in zip(origins, directions)]


def build_ray_queries(gt: np.ndarray, grid: VoxelGridSpec, origins, directions) -> RayQuerySet:
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(origins, directions.shape).copy()
    hits = cast_all(gt, grid, origins, directions)
    return RayQuerySet(
        origins, directions,
        np.array([h.label for h in hits], dtype=np.int64),
        np.array([h.t for h in hits]),
        np.array([h.voxel if h.voxel is not None else (-1, -1, -1) for h in hits]),
    )


def camera_rays(cams: list[CameraModel]) -> tuple[np.ndarray, np.ndarray]:
    """One ray per pixel of every camera."""
    origins, dirs = [], []
    for cam in cams:
        u, v = cam.pixel_grid()
        d = cam.ray_directions(u, v)
        dirs.append(d)
        origins.append(np.broadcast_to(cam.center, d.shape))
    return np.concatenate(origins), np.concatenate(dirs)


def fan_rays(center, n_azimuth: int = 64, elevations=(0.0,)) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal 360 degree fan(s) from ``center`` at the given elevation angles."""
    az = np.linspace(0, 2 * np.pi, n_azimuth, endpoint=False)
    dirs = [np.stack([np.cos(az) * np.cos(e), np.sin(az) * np.cos(e),
                      np.full_like(az, np.sin(e))], axis=1) for e in elevations]
    dirs = np.concatenate(dirs)
    return np.broadcast_to(np.asarray(center, float), dirs.shape).copy(), dirs


def _ray_outcomes(pred: np.ndarray, grid: VoxelGridSpec, rays: RayQuerySet):
    hits = cast_all(pred, grid, rays.origins, rays.directions)
    p_cls = np.array([h.label for h in hits], dtype=np.int64)
    p_depth = np.array([h.t for h in hits])
    return p_cls, p_depth


def ray_confusion(p_cls, p_depth, g_cls, g_depth, classes, tau: float) -> ConfusionCounts:
    with np.errstate(invalid="ignore"):
        close = np.abs(p_depth - g_depth) <= tau
    tp, fp, fn = [], [], []
    for c in classes:
        hit_tp = (p_cls == c) & (g_cls == c) & close
        tp.append(np.sum(hit_tp))
        fp.append(np.sum((p_cls == c) & ~hit_tp))
        fn.append(np.sum((g_cls == c) & ~hit_tp))
    return ConfusionCounts(np.array(tp), np.array(fp), np.array(fn))


def ray_iou(pred: np.ndarray, gt: np.ndarray, grid: VoxelGridSpec, rays: RayQuerySet,
            classes, thresholds=RAY_THRESHOLDS) -> dict:
    """RayIoU per threshold and averaged over thresholds.

    A ray is a true positive for class c at threshold tau when both grids'
    first hits are class c and their depths differ by at most tau.
    """
    if len(rays) == 0:
        raise ValueError("empty ray set")
    if pred.shape != gt.shape:
        raise ValueError("grid shapes differ")
    p_cls, p_depth = _ray_outcomes(pred, grid, rays)
    per_tau, counts = {}, {}
    for tau in thresholds:
        conf = ray_confusion(p_cls, p_depth, rays.gt_class, rays.gt_depth, classes, tau)
        counts[tau] = conf
        per_tau[tau] = mean_iou(conf.iou()) if np.any(conf.tp + conf.fp + conf.fn) else 0.0
    return {"per_threshold": per_tau, "mean": float(np.mean(list(per_tau.values()))),
            "counts": counts}


def ray_tp_mask(pred: np.ndarray, gt: np.ndarray, grid: VoxelGridSpec, rays: RayQuerySet,
                tau: float = TP_THRESHOLD) -> np.ndarray:
    """Ground-truth voxels first hit by rays that are true positives at ``tau``."""
    p_cls, p_depth = _ray_outcomes(pred, grid, rays)
    mask = np.zeros(gt.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        ok = (p_cls == rays.gt_class) & (rays.gt_class != EMPTY) & \
             (np.abs(p_depth - rays.gt_depth) <= tau)
    for v in rays.gt_voxel[ok]:
        mask[tuple(v)] = True
    return mask


# -- velocity ------------------------------------------------------------------

def mave(pred: np.ndarray, gt: np.ndarray, labels: np.ndarray, dynamic_classes,
         tp_mask: np.ndarray | None = None) -> float:
    """Mean over dynamic classes of the mean per-voxel L2 velocity error.

    Voxels are those whose ground-truth label is the class, optionally
    restricted to ``tp_mask``.  Classes without voxels are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[:-1] != np.shape(labels):
        raise ValueError("flow grids and labels must share dimensions")
    err = np.linalg.norm(pred - gt, axis=-1)
    per_class = []
    for c in dynamic_classes:
        sel = labels == c
        if tp_mask is not None:
            sel &= tp_mask
        if np.any(sel):
            per_class.append(err[sel].mean())
    if not per_class:
        raise ValueError("no voxels of any dynamic class")
    return float(np.mean(per_class))


def occ_score(ray_iou_pct: float, mave_tp: float) -> float:
    """Composite score in percent: 0.9 RayIoU + 0.1 max(1 - mAVE_TP, 0)."""
    return ray_iou_pct * 0.9 + max(1.0 - mave_tp, 0.0) * 100.0 * 0.1


def metric_report(pred_labels, gt_labels, grid, rays, classes, dynamic_classes,
                  pred_flow=None, gt_flow=None, class_names=None) -> dict:
    """Full evaluation as a JSON-friendly dict (IoUs as fractions, scores in percent)."""
    classes = list(classes)
    names = class_names or [str(c) for c in classes]
    per_class, m = miou(pred_labels, gt_labels, classes)
    dyn = [c for c in classes if c in set(dynamic_classes)]
    report = {
        "miou": m,
        "iou_per_class": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, per_class)},
    }
    dyn_iou = per_class[[classes.index(c) for c in dyn]] if dyn else np.array([])
    report["miou_dynamic"] = mean_iou(dyn_iou) if np.any(~np.isnan(dyn_iou)) else None
    rio = ray_iou(pred_labels, gt_labels, grid, rays, classes)
    report["ray_iou"] = rio["mean"]
    report["ray_iou_per_threshold"] = {f"{t:g}m": v for t, v in rio["per_threshold"].items()}
    if pred_flow is not None and gt_flow is not None and dyn:
        report["mave"] = mave(pred_flow, gt_flow, gt_labels, dyn)
        tp = ray_tp_mask(pred_labels, gt_labels, grid, rays)
        try:
            report["mave_tp"] = mave(pred_flow, gt_flow, gt_labels, dyn, tp)
        except ValueError:
            report["mave_tp"] = None
        if report["mave_tp"] is not None:
            report["occ_score"] = occ_score(100.0 * rio["mean"], report["mave_tp"])
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
