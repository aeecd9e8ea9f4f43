"""
Voxel IoU against ray IoU
=========================

Voxel IoU punishes a wall that is one metre too deep exactly as hard as
one that is missing.  Ray IoU instead asks whether the first surface each
ray hits has the right class at roughly the right depth.
"""
import numpy as np

from occflow.geometry import VoxelGridSpec
from occflow.metrics import build_ray_queries, mave, miou, occ_score, ray_iou

EMPTY = 255
grid = VoxelGridSpec(np.zeros(3), 0.5, (12, 4, 4))

gt = np.full(grid.dims, EMPTY, np.uint8)
gt[4] = 1                                # a wall 2 m in front of the rays
ys, zs = np.meshgrid(np.linspace(0.2, 1.8, 4), np.linspace(0.2, 1.8, 4))
origins = np.stack([np.full(16, 0.1), ys.ravel(), zs.ravel()], axis=1)
rays = build_ray_queries(gt, grid, origins, np.tile([1.0, 0, 0], (16, 1)))

for shift in (0, 1, 3, 6):
    pred = np.full(grid.dims, EMPTY, np.uint8)
    pred[4 + shift] = 1                  # the same wall, shift * 0.5 m deeper
    _, m = miou(pred, gt, [1])
    r = ray_iou(pred, gt, grid, rays, [1])
    per = {f"{k:g}m": v for k, v in r["per_threshold"].items()}
    print(f"{shift * 0.5:3.1f} m deeper: voxel IoU {m:.2f}  ray IoU {per}")

# velocity error: mean over dynamic classes of the per-voxel L2 error
labels = np.full(grid.dims, EMPTY, np.uint8)
labels[0, 0, 0], labels[1, 0, 0] = 1, 2
gt_flow = np.zeros(grid.dims + (2,))
gt_flow[0, 0, 0] = (2.0, 0.0)
pred_flow = gt_flow.copy()
pred_flow[1, 0, 0] = (0.0, 0.5)
print("mAVE", mave(pred_flow, gt_flow, labels, [1, 2]))   # (0 + 0.5) / 2

# the composite score mixes ray IoU (percent) with a velocity term
print("Occ score", occ_score(40.5, 0.427))
