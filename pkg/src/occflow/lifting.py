"""Occlusion-aware adaptive lifting of image features into the voxel grid.

The lifting operator is a sparse matrix from flattened pixels
``(cam, u, v)`` to flattened voxels ``(h, w, z)``.  Each depth bin of each
pixel is projected into the grid and soft-filled over the eight
surrounding voxel centres; its weight is the occluded-length probability of
that bin, which extends a pixel's depth mass behind the visible surface.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .geometry import CameraModel, DepthBinSpec, VoxelGridSpec, ics_to_vcs


@dataclass
class DenoiseSchedule:
    """Cosine-annealed ground-truth weight for depth denoising.

    ``step=None`` is the inference convention: predictions pass through
    untouched.
    """
    total: int
    step: float | None = 0

    @property
    def gt_weight(self) -> float:
        if self.step is None:
            return 0.0
        if self.step < 0:
            raise ValueError("schedule step must be non-negative")
        if self.total <= 0 or self.step > self.total:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * self.step / self.total))


def trilinear_weights(p) -> list[tuple[tuple[int, int, int], float]]:
    """The eight lattice corners around ``p`` with their interpolation weights."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    corners = ng.trilinear_corners(p)[0]
    weights = ng.trilinear_scatter_weights(p).data[0]
    return [(tuple(int(c) for c in corner), float(wt)) for corner, wt in zip(corners, weights)]


def conditional_matrix(kernel: np.ndarray) -> np.ndarray:
    """Occluded-length conditional matrix ``T[j, i] = P(ol_j | d_i)`` for one pixel.

    Zero for ``j < i``, one on the diagonal and ``kernel[j - i - 1]`` for
    ``j > i``.
    """
    g = np.asarray(kernel, dtype=np.float64)
    D = g.size + 1
    if D == 1:
        return np.ones((1, 1))
    j, i = np.meshgrid(np.arange(D), np.arange(D), indexing="ij")
    out = np.where(j > i, g[np.clip(j - i - 1, 0, max(D - 2, 0))], 0.0)
    out[np.diag_indices(D)] = 1.0
    return out


def depth_to_occluded(depth, kernel) -> ng.Tensor:
    """Convert depth distributions ``(P, D)`` into occluded-length weights.

    ``kernel`` holds ``(P, D-1)`` transfer likelihoods for relative offsets
    ``1..D-1``.  The result is a per-pixel causal Toeplitz product and is not
    renormalised.
    """
    depth, kernel = ng.as_tensor(depth), ng.as_tensor(kernel)
    P, D = depth.shape
    if kernel.shape != (P, D - 1):
        raise ValueError(f"kernel shape {kernel.shape} != {(P, D - 1)}")
    if D == 1:
        return depth
    j, i = np.meshgrid(np.arange(D), np.arange(D), indexing="ij")
    upper = (j > i).astype(np.float64)
    rel = np.clip(j - i - 1, 0, D - 2)
    flat_idx = np.arange(P)[:, None, None] * (D - 1) + rel[None]
    band = ng.gather(ng.reshape(kernel, (P * (D - 1),)), flat_idx)   # (P, D, D)
    trans = ng.add(ng.mul(band, upper), np.eye(D))
    return ng.sum(ng.mul(trans, ng.reshape(depth, (P, 1, D))), axis=-1)


def blend_denoise(pred, gt, sched: DenoiseSchedule) -> ng.Tensor:
    """Convex blend ``w * gt + (1 - w) * pred`` with the schedule's weight."""
    pred, gt = ng.as_tensor(pred), ng.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt depth shapes differ")
    w = sched.gt_weight
    if w == 0.0:
        return pred
    if w == 1.0:
        return gt
    return ng.add(ng.mul(gt, w), ng.mul(pred, 1.0 - w))


def gt_depth_distribution(depth: np.ndarray, bins: DepthBinSpec) -> np.ndarray:
    """Ground-truth depth distribution for rendered depths ``(P,)``.

    Mass is split linearly between the two bin centres bracketing the depth
    and clamped to the end bins.  Non-finite depths (misses) get a uniform
    distribution.
    """
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    c = bins.centers
    out = np.zeros((depth.size, c.size))
    hit = np.isfinite(depth)
    out[~hit] = 1.0 / c.size
    d = np.clip(depth[hit], c[0], c[-1])
    hi = np.clip(np.searchsorted(c, d, side="right"), 1, c.size - 1)
    lo = hi - 1
    t = (d - c[lo]) / (c[hi] - c[lo])
    rows = np.nonzero(hit)[0]
    out[rows, lo] += 1.0 - t
    out[rows, hi] += t
    return out


def select_top_bins(depth: np.ndarray, m: int) -> np.ndarray:
    """Indices ``(P, m)`` of the ``m`` most probable bins; ties go to lower bins."""
    depth = np.asarray(depth)
    order = np.argsort(-depth, axis=-1, kind="stable")
    return order[:, :m]


@dataclass
class InterObjectTransfer:
    """Per-pixel transfer of the top-``m`` bins to displaced image points.

    ``offsets`` is ``(P, m, 2)`` in pixels, ``weights`` is ``(P, m)`` in
    ``[0, 1]`` and ``selected`` the ``(P, m)`` bin indices.
    """
    offsets: ng.Tensor
    weights: ng.Tensor
    selected: np.ndarray

    def __post_init__(self):
        self.offsets = ng.as_tensor(self.offsets)
        self.weights = ng.as_tensor(self.weights)
        self.selected = np.asarray(self.selected, dtype=np.int64)
        P, m = self.selected.shape
        if self.offsets.shape != (P, m, 2) or self.weights.shape != (P, m):
            raise ValueError("inter-object transfer shapes are inconsistent")
        w = self.weights.data
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("transfer weights must lie in [0, 1]")

    @property
    def m(self) -> int:
        return self.selected.shape[1]


@dataclass
class SparseTransferMatrix:
    """Canonical (row, col)-sorted triplets with merged duplicates."""
    rows: np.ndarray
    cols: np.ndarray
    weights: ng.Tensor
    shape: tuple[int, int]

    @property
    def nnz(self) -> int:
        return self.rows.size

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols), self.weights.data)
        return out

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.cols, weights=self.weights.data, minlength=self.shape[1])

    def pruned(self) -> "SparseTransferMatrix":
        """Copy without exactly-zero triplets (detached from the tape).

        The assembled matrix keeps every structural triplet because a weight
        that is exactly zero can still carry gradient, e.g. the upper corner
        of a point sitting on a lattice node.
        """
        keep = self.weights.data != 0
        return SparseTransferMatrix(self.rows[keep], self.cols[keep],
                                    ng.Tensor(self.weights.data[keep]), self.shape)


def _pixel_table(cams: list[CameraModel]):
    us, vs, cam_ids = [], [], []
    for k, cam in enumerate(cams):
        u, v = cam.pixel_grid()
        us.append(u)
        vs.append(v)
        cam_ids.append(np.full(u.size, k))
    return np.concatenate(us), np.concatenate(vs), np.concatenate(cam_ids)


def lift_points(cams: list[CameraModel], grid: VoxelGridSpec, bins: DepthBinSpec) -> np.ndarray:
    """Voxel coordinates ``(P, D, 3)`` of every pixel's depth-bin centres."""
    out = []
    for cam in cams:
        u, v = cam.pixel_grid()
        out.append(ics_to_vcs(cam, grid, u[:, None], v[:, None], bins.centers[None, :]))
    return np.concatenate(out, axis=0)


def _soft_fill(coords, src_weight, cols, grid):
    """Triplets from soft-filling points at voxel coordinates ``coords``.

    Voxel centres are the interpolation lattice, so coordinates are shifted
    by half a cell before the trilinear split.
    """
    coords = ng.as_tensor(coords)
    lattice = ng.add(coords, -0.5)
    corners = ng.trilinear_corners(lattice.data)                 # (N, 8, 3)
    w8 = ng.trilinear_scatter_weights(lattice)                   # (N, 8)
    keep = grid.in_bounds(corners)                               # (N, 8)
    pts, slot = np.nonzero(keep)
    rows = grid.flat_index(corners[pts, slot])
    flat = ng.reshape(w8, (w8.size,))
    pw = ng.gather(flat, pts * 8 + slot)
    return rows, cols[pts], ng.mul(pw, ng.gather(src_weight, pts))


def build_transfer_matrix(occ, cams: list[CameraModel], bins: DepthBinSpec,
                          grid: VoxelGridSpec,
                          inter: InterObjectTransfer | None = None) -> SparseTransferMatrix:
    """Assemble the lifting operator from per-pixel occluded-length weights.

    ``occ`` is ``(P, D)`` over all pixels of all cameras in ``(cam, u, v)``
    order.  Mass landing outside the grid is dropped.
    """
    occ = ng.as_tensor(occ)
    n_pix = sum(c.n_pixels for c in cams)
    if occ.shape != (n_pix, bins.D):
        raise ValueError(f"occluded weights {occ.shape} do not match cameras/bins "
                         f"{(n_pix, bins.D)}")
    D = bins.D
    pts = lift_points(cams, grid, bins).reshape(-1, 3)
    pix = np.repeat(np.arange(n_pix), D)
    occ_flat = ng.reshape(occ, (n_pix * D,))
    parts = [_soft_fill(pts, occ_flat, pix, grid)]

    if inter is not None:
        if inter.selected.shape[0] != n_pix:
            raise ValueError("inter-object transfer does not match pixel count")
        parts.append(_inter_triplets(occ_flat, cams, bins, grid, inter))

    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    key = rows * n_pix + cols
    uniq, inverse = np.unique(key, return_inverse=True)
    offsets = np.cumsum([0] + [p[0].size for p in parts])
    merged = None
    for k, (_, _, w) in enumerate(parts):
        piece = ng.scatter_add(w, inverse[offsets[k]:offsets[k + 1]], uniq.size)
        merged = piece if merged is None else ng.add(merged, piece)
    if merged is None or uniq.size == 0:
        merged = ng.Tensor(np.zeros(0))
    return SparseTransferMatrix(uniq // n_pix, uniq % n_pix, merged, (grid.n_voxels, n_pix))


def _inter_triplets(occ_flat, cams, bins, grid, inter):
    u, v, cam_ids = _pixel_table(cams)
    P, m = inter.selected.shape
    pix = np.repeat(np.arange(P), m)
    sel = inter.selected.reshape(-1)
    d = bins.centers[sel]
    base = np.empty((P * m, 3))
    du_axis = np.empty((P * m, 3))
    dv_axis = np.empty((P * m, 3))
    for k, cam in enumerate(cams):
        rows = cam_ids[pix] == k
        uu, vv, dd = u[pix[rows]], v[pix[rows]], d[rows]
        base[rows] = ics_to_vcs(cam, grid, uu, vv, dd)
        # the projection is affine in (u, v) at fixed depth
        a = np.linalg.inv(cam.intrinsics).T @ cam.extrinsic[:3, :3].T / grid.cell
        du_axis[rows] = dd[:, None] * a[0]
        dv_axis[rows] = dd[:, None] * a[1]
    off = ng.reshape(inter.offsets, (P * m, 2))
    off_u = ng.gather(ng.reshape(off, (P * m * 2,)), np.arange(P * m) * 2)
    off_v = ng.gather(ng.reshape(off, (P * m * 2,)), np.arange(P * m) * 2 + 1)
    coords = ng.add(ng.add(base, ng.mul(ng.reshape(off_u, (P * m, 1)), du_axis)),
                    ng.mul(ng.reshape(off_v, (P * m, 1)), dv_axis))
    src = ng.mul(ng.reshape(inter.weights, (P * m,)), ng.gather(occ_flat, pix * bins.D + sel))
    return _soft_fill(coords, src, pix, grid)


def apply_lift(M: SparseTransferMatrix, f_img) -> ng.Tensor:
    """Lifted voxel features ``(H*W*Z, F)`` from pixel features ``(P, F)``."""
    f_img = ng.as_tensor(f_img)
    if f_img.data.ndim != 2 or f_img.shape[0] != M.shape[1]:
        raise ValueError(f"feature rows {f_img.shape} do not match matrix columns {M.shape[1]}")
    contrib = ng.mul(ng.gather(f_img, M.cols), ng.reshape(M.weights, (M.nnz, 1)))
    return ng.scatter_add(contrib, M.rows, M.shape[0])


TRANSFER_MAGIC = b"OCMT"


def dumps_transfer(M: SparseTransferMatrix) -> bytes:
    rec = np.zeros(M.nnz, dtype=[("row", "<u8"), ("col", "<u8"), ("w", "<f8")])
    rec["row"], rec["col"], rec["w"] = M.rows, M.cols, M.weights.data
    return TRANSFER_MAGIC + struct.pack("<Q", M.nnz) + rec.tobytes()


def loads_transfer(buf: bytes, shape: tuple[int, int]) -> SparseTransferMatrix:
    if buf[:4] != TRANSFER_MAGIC:
        raise ValueError("not an OCMT transfer-matrix dump")
    (n,) = struct.unpack_from("<Q", buf, 4)
    rec = np.frombuffer(buf, dtype=[("row", "<u8"), ("col", "<u8"), ("w", "<f8")],
                        count=n, offset=12)
    return SparseTransferMatrix(rec["row"].astype(np.int64), rec["col"].astype(np.int64),
                                ng.Tensor(rec["w"].copy()), shape)
