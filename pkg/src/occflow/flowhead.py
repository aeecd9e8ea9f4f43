"""BEV cost volume and bin-based flow decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .geometry import EgoMotion, VoxelGridSpec, warp_index


@dataclass(frozen=True)
class BevSpec:
    factor: int = 2
    z_lo: float = 0.0
    z_hi: float = 4.0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("downsample factor must be >= 1")
        if not self.z_lo < self.z_hi:
            raise ValueError("height slab must satisfy z_lo < z_hi")

    def slab_layers(self, grid: VoxelGridSpec) -> np.ndarray:
        zc = grid.origin[2] + (np.arange(grid.dims[2]) + 0.5) * grid.cell
        return np.nonzero((zc >= self.z_lo) & (zc < self.z_hi))[0]

    def bev_shape(self, grid: VoxelGridSpec) -> tuple[int, int]:
        h, w, _ = grid.dims
        return -(-h // self.factor), -(-w // self.factor)


@dataclass(frozen=True, eq=False)
class FlowBinSpec:
    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1)
        if c.size < 2 or np.any(np.diff(c) <= 0):
            raise ValueError("flow bin centres must be strictly increasing")
        object.__setattr__(self, "centers", c)

    @property
    def n(self) -> int:
        return self.centers.size

    @classmethod
    def uniform(cls, lo: float = -10.0, hi: float = 10.0, n: int = 16) -> "FlowBinSpec":
        width = (hi - lo) / n
        return cls(lo + (np.arange(n) + 0.5) * width)

    def nearest(self, values) -> np.ndarray:
        """Index of the nearest centre; exact midpoints go to the lower bin."""
        v = np.asarray(values, dtype=np.float64)
        dist = np.abs(v[..., None] - self.centers)
        return np.argmin(dist, axis=-1)


def window_offsets(radius: int = 1) -> np.ndarray:
    """Square search window of ``(2r+1)^2`` integer offsets, row-major."""
    r = np.arange(-radius, radius + 1)
    dh, dw = np.meshgrid(r, r, indexing="ij")
    return np.stack([dh.reshape(-1), dw.reshape(-1)], axis=-1)


def collapse_bev(volume, spec: BevSpec, grid: VoxelGridSpec) -> ng.Tensor:
    """Mean over the height slab, then average-pool by ``spec.factor``.

    ``volume`` is ``(H*W*Z, F)`` in flattened grid order or ``(H, W, Z, F)``.
    Returns ``(H', W', F)``; edge blocks of a non-divisible grid average the
    cells they contain.
    """
    volume = ng.as_tensor(volume)
    h, w, z = grid.dims
    f = volume.shape[-1]
    flat = ng.reshape(volume, (h * w * z, f))
    layers = spec.slab_layers(grid)
    if layers.size == 0:
        raise ValueError("height slab contains no voxel layers")
    hb, wb = spec.bev_shape(grid)
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), layers, indexing="ij")
    src = ((ii * w + jj) * z + kk).reshape(-1)
    dst = ((ii // spec.factor) * wb + jj // spec.factor).reshape(-1)
    counts = np.bincount(dst, minlength=hb * wb).astype(np.float64)
    summed = ng.scatter_add(ng.gather(flat, src), dst, hb * wb)
    return ng.reshape(ng.mul(summed, (1.0 / counts)[:, None]), (hb, wb, f))


@dataclass
class CostVolume:
    scores: ng.Tensor          # (H', W', K)
    offsets: np.ndarray        # (K, 2)


def cost_volume(cur, prev, motion: EgoMotion, offsets: np.ndarray, grid: VoxelGridSpec,
                factor: int = 1) -> CostVolume:
    """Cosine similarity between current BEV cells and the ego-warped previous
    map read at each window offset.

    Samples beyond the previous map read zeros, giving similarity 0.
    """
    cur, prev = ng.as_tensor(cur), ng.as_tensor(prev)
    if cur.shape != prev.shape:
        raise ValueError("current and previous BEV maps differ in shape")
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    if offsets.shape[0] == 0:
        raise ValueError("search window is empty")
    hb, wb, c = cur.shape
    k = offsets.shape[0]
    ii, jj = np.meshgrid(np.arange(hb), np.arange(wb), indexing="ij")
    cells = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=-1)
    query = (cells[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    pos = warp_index(query, motion, grid, factor)
    # warp(prev)[cell + dp] for cells beyond the current map is zero
    outside = ~((query >= 0) & (query < [hb, wb])).all(axis=1)
    pos[outside] = -10.0
    sampled = ng.bilinear_sample_2d(prev, pos)                         # (N*K, C)
    cur_rep = ng.gather(ng.reshape(cur, (hb * wb, c)), np.repeat(np.arange(hb * wb), k))
    cos = ng.cosine_sim_lastdim(cur_rep, sampled)
    return CostVolume(ng.reshape(cos, (hb, wb, k)), offsets)


def upsample_cost_volume(cv: CostVolume, grid: VoxelGridSpec, factor: int) -> ng.Tensor:
    """Nearest-neighbour broadcast of ``(H', W', K)`` scores to ``(H*W*Z, K)``."""
    h, w, z = grid.dims
    hb, wb, k = cv.scores.shape
    ii, jj, _ = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    src = ((ii // factor) * wb + jj // factor).reshape(-1)
    return ng.gather(ng.reshape(cv.scores, (hb * wb, k)), src)


@dataclass
class FlowDecoder:
    """Two affine stages with a sigmoid in between, producing per-axis bin logits.

    The first stage acts on ``cat(volume features, cost volume)``; its weight
    is stored split into the feature part and the cost-volume part.
    """
    w_feat: ng.Tensor
    w_cv: ng.Tensor
    b1: ng.Tensor
    w2: ng.Tensor
    b2: ng.Tensor

    @classmethod
    def random(cls, feat_dim: int, cv_dim: int, hidden: int, n_bins: int,
               rng: np.random.Generator) -> "FlowDecoder":
        fan = feat_dim + cv_dim
        return cls(
            ng.Tensor(rng.normal(0, 1 / np.sqrt(fan), (feat_dim, hidden)), requires_grad=True),
            ng.Tensor(rng.normal(0, 1 / np.sqrt(fan), (cv_dim, hidden)), requires_grad=True),
            ng.Tensor(np.zeros(hidden), requires_grad=True),
            ng.Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, 2 * n_bins)), requires_grad=True),
            ng.Tensor(np.zeros(2 * n_bins), requires_grad=True),
        )

    def parameters(self) -> list[ng.Tensor]:
        return [self.w_feat, self.w_cv, self.b1, self.w2, self.b2]

    def bin_probs(self, features, cv_up=None) -> ng.Tensor:
        features = ng.as_tensor(features)
        pre = ng.matmul(features, self.w_feat)
        if cv_up is not None:
            pre = ng.add(pre, ng.matmul(ng.as_tensor(cv_up), self.w_cv))
        hidden = ng.sigmoid(ng.add(pre, self.b1))
        logits = ng.add(ng.matmul(hidden, self.w2), self.b2)
        n = features.shape[0]
        nb = self.b2.shape[0] // 2
        return ng.softmax_lastdim(ng.reshape(logits, (n, 2, nb)))


def expected_flow(probs, bins: FlowBinSpec) -> ng.Tensor:
    """Per-axis expectation over bin centres: ``(N, 2, Nb) -> (N, 2)``."""
    probs = ng.as_tensor(probs)
    if probs.shape[-1] != bins.n:
        raise ValueError("bin probability width does not match the bin spec")
    return ng.sum(ng.mul(probs, bins.centers), axis=-1)


def decode_flow(features, cv: CostVolume | None, bins: FlowBinSpec, decoder: FlowDecoder,
                grid: VoxelGridSpec, factor: int = 1) -> tuple[ng.Tensor, ng.Tensor]:
    """Flow ``(N, 2)`` and bin probabilities ``(N, 2, Nb)`` for every voxel.

    With ``cv=None`` the decoder sees the volume features only.
    """
    cv_up = None if cv is None else upsample_cost_volume(cv, grid, factor)
    probs = decoder.bin_probs(features, cv_up)
    return expected_flow(probs, bins), probs


def flow_loss_voxels(gt: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Voxels entering the flow losses: all moving voxels plus as many static ones.

    Static voxels are drawn without replacement by ``rng`` (lowest indices
    when ``rng`` is None).
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    moving = np.nonzero(np.linalg.norm(gt, axis=1) > 0)[0]
    static = np.nonzero(np.linalg.norm(gt, axis=1) == 0)[0]
    n = min(moving.size, static.size)
    if rng is None:
        pick = static[:n]
    else:
        pick = rng.choice(static, size=n, replace=False) if n else static[:0]
    return np.sort(np.concatenate([moving, pick]))


def flow_reg_loss(pred, gt, voxels: np.ndarray | None = None) -> ng.Tensor:
    """Mean of ``||pred - gt||^2 - cos(pred, gt)`` over the contributing voxels.

    The cosine term is 0 where either vector is shorter than 1e-8.  With
    ``voxels=None`` the contributing set comes from :func:`flow_loss_voxels`.
    """
    pred = ng.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if voxels is None:
        voxels = flow_loss_voxels(gt)
    if len(voxels) == 0:
        return ng.Tensor(0.0)
    p = ng.gather(pred, voxels)
    g = gt[voxels]
    sq = ng.sum(ng.square(ng.add(p, -g)), axis=-1)
    cos = ng.cosine_sim_lastdim(p, g)
    return ng.mean(ng.add(sq, ng.mul(cos, -1.0)))


def flow_cls_loss(probs, gt, bins: FlowBinSpec, voxels: np.ndarray | None = None) -> ng.Tensor:
    """Cross-entropy against the nearest bin of each ground-truth component,
    averaged over voxels and both axes."""
    probs = ng.as_tensor(probs)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if voxels is None:
        voxels = np.arange(gt.shape[0])
    if len(voxels) == 0:
        return ng.Tensor(0.0)
    target = bins.nearest(gt[voxels])                                 # (V, 2)
    nb = bins.n
    flat = ng.reshape(ng.gather(probs, voxels), (len(voxels) * 2 * nb,))
    idx = (np.arange(len(voxels) * 2) * nb) + target.reshape(-1)
    picked = ng.gather(flat, idx)
    return ng.mul(ng.mean(ng.log(picked)), -1.0)


def flow_loss(pred, probs, gt, bins: FlowBinSpec, voxels=None) -> ng.Tensor:
    """Regression plus classification flow loss."""
    if voxels is None:
        voxels = flow_loss_voxels(gt)
    return ng.add(flow_reg_loss(pred, gt, voxels), flow_cls_loss(probs, gt, bins, voxels))
