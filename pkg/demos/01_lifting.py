"""
Lifting one pixel into a voxel grid
===================================

A single downward-looking pixel, four depth bins and a tiny grid.  We look
at how the depth distribution becomes occluded-length weights and where
those weights land in the grid.
"""
import numpy as np

from occflow.geometry import CameraModel, VoxelGridSpec, uniform_depth_bins
from occflow.lifting import (build_transfer_matrix, conditional_matrix, depth_to_occluded,
                             trilinear_weights)

np.set_printoptions(precision=3, suppress=True)

# a point halfway along x between lattice nodes splits its weight evenly
for corner, w in trilinear_weights([0.5, 0.0, 0.0]):
    if w > 0:
        print("corner", corner, "weight", w)

# the conditional matrix for kernel g: ones on the diagonal, g behind it
g = np.array([0.2, 0.2, 0.2])
print(conditional_matrix(g))

# half the mass at bin 0, half at bin 1: the bins behind pick up extra weight
depth = np.array([[0.5, 0.5, 0.0, 0.0]])
occ = depth_to_occluded(depth, g[None]).data
print("depth   ", depth[0])
print("occluded", occ[0])        # [0.5 0.6 0.2 0.2], no longer sums to 1

# one camera 100 m above a 4x4x4 grid, looking straight down
extr = np.array([[1.0, 0, 0, 0], [0, -1, 0, 0], [0, 0, -1, 100.0], [0, 0, 0, 1]])
cam = CameraModel(np.array([[125.0, 0, 0.5], [0, 125.0, 0.5], [0, 0, 1]]), extr, (2, 2))
grid = VoxelGridSpec(np.array([-0.8, -0.8, -0.4]), 0.4, (4, 4, 4))
bins = uniform_depth_bins(98.8, 100.4, 4)

P = 4
depth = np.tile([0.7, 0.1, 0.1, 0.1], (P, 1))
M = build_transfer_matrix(depth_to_occluded(depth, np.full((P, 3), 0.5)), [cam], bins, grid)
print("triplets", M.rows.size, "shape", M.shape)

# column sums: total weight each pixel spreads through the grid
col = np.bincount(M.cols, weights=M.weights.data, minlength=P)
print("per-pixel mass", col)
