"""Camera and voxel-grid coordinate systems, depth bins and BEV warping.

Conventions
-----------
* Image coordinates ``(u, v)``: ``u`` runs along image rows (``0..X-1``),
  ``v`` along columns (``0..Y-1``); pixel ``(u, v)`` is the array element
  ``[u, v]`` and its centre sits at the integer coordinate.
* Depth ``d`` is the camera-frame z coordinate, so a pixel ray is
  ``d * K^-1 (u, v, 1)``.
* Voxel coordinates ``(h, w, z)`` follow world ``(x, y, z)``:
  ``(world - origin) / cell``.  Voxel ``(i, j, k)`` covers
  ``[i, i+1) x [j, j+1) x [k, k+1)``; its centre is at ``index + 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng

ORTHO_TOL = 1e-9


def _check_rigid(mat: np.ndarray, what: str) -> None:
    if mat.shape != (4, 4):
        raise ValueError(f"{what} must be 4x4")
    rot = mat[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=ORTHO_TOL, rtol=0):
        raise ValueError(f"{what} rotation block is not orthonormal")
    if not np.allclose(mat[3], [0, 0, 0, 1]):
        raise ValueError(f"{what} bottom row must be (0, 0, 0, 1)")


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: np.ndarray  # camera -> world
    image_size: tuple[int, int]  # (X rows, Y cols)

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        e = np.asarray(self.extrinsic, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics must be invertible")
        _check_rigid(e, "extrinsic")
        rows, cols = (int(s) for s in self.image_size)
        if rows <= 0 or cols <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsic", e)
        object.__setattr__(self, "image_size", (rows, cols))

    @property
    def n_pixels(self) -> int:
        return self.image_size[0] * self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        return self.extrinsic[:3, 3].copy()

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major ``(u, v)`` coordinates of all pixel centres."""
        u, v = np.meshgrid(np.arange(self.image_size[0]), np.arange(self.image_size[1]),
                           indexing="ij")
        return u.reshape(-1).astype(np.float64), v.reshape(-1).astype(np.float64)

    def ray_directions(self, u, v) -> np.ndarray:
        """World-frame ray directions scaled so that the ray parameter is depth."""
        pix = np.stack([np.asarray(u, float), np.asarray(v, float), np.ones(np.shape(u))], -1)
        cam = pix @ np.linalg.inv(self.intrinsics).T
        return cam @ self.extrinsic[:3, :3].T

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(),
                "extrinsic": self.extrinsic.tolist(),
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        k = np.asarray(d["intrinsics"], dtype=np.float64).reshape(3, 3)
        e = np.asarray(d["extrinsic"], dtype=np.float64).reshape(4, 4)
        return cls(k, e, tuple(d["image_size"]))


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    origin: np.ndarray
    cell: float = 0.4
    dims: tuple[int, int, int] = (200, 200, 16)

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError("grid dims must be three positive integers")
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cell", float(self.cell))

    @property
    def n_voxels(self) -> int:
        h, w, z = self.dims
        return h * w * z

    def flat_index(self, idx) -> np.ndarray:
        """Row index of voxel ``(h, w, z)`` in flattened grid order."""
        idx = np.asarray(idx, dtype=np.int64)
        _, w, z = self.dims
        return (idx[..., 0] * w + idx[..., 1]) * z + idx[..., 2]

    def in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def world_to_vcs(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) / self.cell

    def vcs_to_world(self, vcs) -> np.ndarray:
        return np.asarray(vcs, dtype=np.float64) * self.cell + self.origin

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centres, shape ``(H, W, Z, 3)``."""
        h, w, z = np.meshgrid(*(np.arange(n) for n in self.dims), indexing="ij")
        idx = np.stack([h, w, z], axis=-1).astype(np.float64)
        return self.vcs_to_world(idx + 0.5)

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "cell": self.cell, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGridSpec":
        return cls(np.asarray(d["origin"], float), float(d["cell"]), tuple(d["dims"]))


@dataclass(frozen=True, eq=False)
class DepthBinSpec:
    d_min: float
    d_max: float
    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1)
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if c.size < 2:
            raise ValueError("need at least two depth bins")
        if np.any(np.diff(c) <= 0):
            raise ValueError("bin centres must be strictly increasing")
        object.__setattr__(self, "centers", c)

    @property
    def D(self) -> int:
        return self.centers.size


def uniform_depth_bins(d_min: float, d_max: float, D: int) -> DepthBinSpec:
    if D < 2:
        raise ValueError("D must be at least 2")
    if not d_min < d_max:
        raise ValueError("d_min must be below d_max")
    width = (d_max - d_min) / D
    return DepthBinSpec(float(d_min), float(d_max), d_min + (np.arange(D) + 0.5) * width)


@dataclass(frozen=True, eq=False)
class EgoMotion:
    """Rigid transform taking frame t-1 ego coordinates to frame t."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        _check_rigid(m, "ego motion")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "EgoMotion":
        return cls(np.eye(4))

    @classmethod
    def planar(cls, dx: float = 0.0, dy: float = 0.0, yaw: float = 0.0) -> "EgoMotion":
        c, s = np.cos(yaw), np.sin(yaw)
        m = np.eye(4)
        m[:2, :2] = [[c, -s], [s, c]]
        m[0, 3], m[1, 3] = dx, dy
        return cls(m)

    def inverse(self) -> np.ndarray:
        r, t = self.matrix[:3, :3], self.matrix[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return inv


def ics_to_vcs(cam: CameraModel, grid: VoxelGridSpec, u, v, d) -> np.ndarray:
    """Continuous voxel coordinates of image points at depth ``d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), d)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1) * d[..., None]
    cam_pts = pix @ np.linalg.inv(cam.intrinsics).T
    world = cam_pts @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    return grid.world_to_vcs(world)


def vcs_to_ics(cam: CameraModel, grid: VoxelGridSpec, hwz) -> np.ndarray:
    """Inverse of :func:`ics_to_vcs`: returns ``(..., 3)`` of ``(u, v, d)``."""
    world = grid.vcs_to_world(hwz)
    r, t = cam.extrinsic[:3, :3], cam.extrinsic[:3, 3]
    cam_pts = (world - t) @ r
    pix = cam_pts @ cam.intrinsics.T
    d = pix[..., 2]
    return np.stack([pix[..., 0] / d, pix[..., 1] / d, d], axis=-1)


def bev_cell_size(grid: VoxelGridSpec, factor: int) -> float:
    return grid.cell * factor


def warp_positions(shape: tuple[int, int], motion: EgoMotion, grid: VoxelGridSpec,
                   factor: int = 1) -> np.ndarray:
    """Continuous ``(row, col)`` positions in the previous BEV map sampled by
    each current BEV cell, shape ``(H' * W', 2)``.

    Written in index space so identity and whole-cell translations are exact.
    """
    hb, wb = shape
    ii, jj = np.meshgrid(np.arange(hb, dtype=np.float64), np.arange(wb, dtype=np.float64),
                         indexing="ij")
    idx = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=-1)
    return warp_index(idx, motion, grid, factor)


def warp_index(idx: np.ndarray, motion: EgoMotion, grid: VoxelGridSpec,
               factor: int = 1) -> np.ndarray:
    """Map current BEV cell indices ``(N, 2)`` to previous-frame indices."""
    inv = motion.inverse()
    r = inv[:2, :2]
    s = bev_cell_size(grid, factor)
    shift = (r - np.eye(2)) @ (grid.origin[:2] / s + 0.5) + inv[:2, 3] / s
    return np.asarray(idx, dtype=np.float64) @ r.T + shift


def warp_bev(prev, motion: EgoMotion, grid: VoxelGridSpec, factor: int = 1) -> ng.Tensor:
    """Resample a previous-frame BEV map ``(H', W', C)`` into the current frame.

    Each output cell bilinearly samples ``prev`` at its back-transformed
    position; samples outside ``prev`` are zero.
    """
    prev = ng.as_tensor(prev)
    hb, wb, c = prev.shape
    pos = warp_positions((hb, wb), motion, grid, factor)
    return ng.reshape(ng.bilinear_sample_2d(prev, pos), (hb, wb, c))
