"""Synthetic two-frame scenes: voxelisation, flow ground truth and ray casting."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, EgoMotion, VoxelGridSpec
from .semhead import EMPTY


@dataclass
class SceneObject:
    shape: str                      # "box" | "sphere"
    center: np.ndarray              # metres, frame t
    size: np.ndarray                # box edge lengths / sphere diameter (first entry)
    class_id: int
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    yaw: float = 0.0

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if self.shape == "box":
            self.size = np.broadcast_to(self.size, (3,)).copy()
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        self.class_id = int(self.class_id)

    def contains(self, pts: np.ndarray, shift=np.zeros(3)) -> np.ndarray:
        rel = pts - (self.center + shift)
        if self.shape == "sphere":
            return np.linalg.norm(rel, axis=-1) <= self.size[0] / 2
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local_x = c * rel[..., 0] + s * rel[..., 1]
        local_y = -s * rel[..., 0] + c * rel[..., 1]
        half = self.size / 2
        return ((np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1])
                & (np.abs(rel[..., 2]) <= half[2]))

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": self.center.tolist(), "size": self.size.tolist(),
                "class_id": self.class_id, "velocity": self.velocity.tolist(), "yaw": self.yaw}


@dataclass
class SceneSpec:
    grid: VoxelGridSpec
    cameras: list[CameraModel]
    objects: list[SceneObject]
    n_classes: int
    ground_class: int | None = None
    ego_motion: EgoMotion = field(default_factory=EgoMotion.identity)
    dt: float = 0.2
    seed: int = 0
    dynamic_classes: tuple[int, ...] = ()

    def __post_init__(self):
        for obj in self.objects:
            if not 0 <= obj.class_id < self.n_classes:
                raise ValueError(f"class id {obj.class_id} outside [0, {self.n_classes})")
            lo = self.grid.origin
            hi = lo + np.asarray(self.grid.dims) * self.grid.cell
            if np.any(obj.center < lo) or np.any(obj.center > hi):
                raise ValueError("object centre lies outside the grid")
        if self.ground_class is not None and not 0 <= self.ground_class < self.n_classes:
            raise ValueError("ground class outside class range")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "cameras": [c.to_dict() for c in self.cameras],
            "objects": [o.to_dict() for o in self.objects],
            "n_classes": self.n_classes,
            "ground_class": self.ground_class,
            "ego_motion": self.ego_motion.matrix.tolist(),
            "dt": self.dt,
            "seed": self.seed,
            "dynamic_classes": list(self.dynamic_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            grid=VoxelGridSpec.from_dict(d["grid"]),
            cameras=[CameraModel.from_dict(c) for c in d["cameras"]],
            objects=[SceneObject(**o) for o in d.get("objects", [])],
            n_classes=int(d["n_classes"]),
            ground_class=d.get("ground_class"),
            ego_motion=EgoMotion(np.asarray(d.get("ego_motion", np.eye(4)), float)),
            dt=float(d.get("dt", 0.2)),
            seed=int(d.get("seed", 0)),
            dynamic_classes=tuple(d.get("dynamic_classes", ())),
        )


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return SceneSpec.from_dict(json.load(fh))


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def _voxelize(spec: SceneSpec, centers: np.ndarray, shift_fn) -> tuple[np.ndarray, np.ndarray]:
    labels = np.full(spec.grid.dims, EMPTY, dtype=np.uint8)
    flow = np.zeros(spec.grid.dims + (2,))
    if spec.ground_class is not None:
        labels[centers[..., 2] < 0] = spec.ground_class
    for obj in spec.objects:             # later objects overwrite earlier ones
        inside = obj.contains(centers, shift_fn(obj))
        labels[inside] = obj.class_id
        flow[inside] = obj.velocity
    return labels, flow


def generate(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label grids at t-1 and t and the flow grid at t.

    Objects at t-1 sit at ``center - velocity * dt`` in the frame-t ego frame;
    the t-1 grid is expressed in the t-1 ego frame via the inverse ego
    motion.  The ground fills every voxel whose centre lies below z = 0.
    """
    centers = spec.grid.voxel_centers()
    labels_t, flow_t = _voxelize(spec, centers, lambda o: np.zeros(3))
    # t-1 voxel centres expressed in frame-t coordinates
    m = spec.ego_motion.matrix
    prev_in_t = centers @ m[:3, :3].T + m[:3, 3]
    prev_shift = lambda o: np.array([*(-o.velocity * spec.dt), 0.0])  # noqa: E731
    labels_prev, _ = _voxelize(spec, prev_in_t, prev_shift)
    flow_t = np.where((labels_t == EMPTY)[..., None], 0.0, flow_t)
    return labels_prev, labels_t, flow_t


# -- ray casting ---------------------------------------------------------------

@dataclass
class RayHit:
    t: float                       # ray parameter at entry into the hit voxel
    voxel: tuple[int, int, int] | None
    label: int                     # EMPTY on a miss


MISS = RayHit(np.inf, None, EMPTY)


def _grid_interval(o, d, dims):
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if d[a] == 0:
            if o[a] < 0 or o[a] >= dims[a]:
                return np.inf, -np.inf
            continue
        ta, tb = (0 - o[a]) / d[a], (dims[a] - o[a]) / d[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return t0, t1


def traverse(grid: VoxelGridSpec, origin, direction):
    """Yield ``(t_enter, t_exit, voxel)`` for voxels pierced by the ray, in order.

    Integer grid walk in voxel coordinates; ``t`` is in units of the
    direction vector's length.
    """
    d_world = np.asarray(direction, dtype=np.float64)
    if not np.any(d_world != 0):
        raise ValueError("degenerate ray direction")
    o = grid.world_to_vcs(origin)
    d = d_world / grid.cell
    dims = grid.dims
    t_in, t_out = _grid_interval(o, d, dims)
    t_in = max(t_in, 0.0)
    if not t_in < t_out:
        return
    p = o + t_in * d
    idx = np.clip(np.floor(p).astype(np.int64), 0, np.asarray(dims) - 1)
    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        if d[a] > 0:
            t_max[a] = (idx[a] + 1 - o[a]) / d[a]
            t_delta[a] = 1.0 / d[a]
        elif d[a] < 0:
            t_max[a] = (idx[a] - o[a]) / d[a]
            t_delta[a] = -1.0 / d[a]
    t = t_in
    while True:
        a = int(np.argmin(t_max))
        t_next = min(t_max[a], t_out)
        if t_next > t:
            yield t, t_next, (int(idx[0]), int(idx[1]), int(idx[2]))
        if t_max[a] >= t_out:
            return
        t = t_max[a]
        idx[a] += step[a]
        if idx[a] < 0 or idx[a] >= dims[a]:
            return
        t_max[a] += t_delta[a]


def cast_ray(labels: np.ndarray, grid: VoxelGridSpec, origin, direction) -> RayHit:
    """First non-empty voxel along the ray."""
    for t0, _, vox in traverse(grid, origin, direction):
        lab = int(labels[vox])
        if lab != EMPTY:
            return RayHit(t0, vox, lab)
    return MISS


@dataclass
class RenderedView:
    depth: np.ndarray              # (X, Y) metres along the optical axis, inf on miss
    semantic: np.ndarray           # (X, Y) class id or EMPTY
    hit_voxel: np.ndarray          # (X, Y, 3) int, -1 on miss


def render(spec: SceneSpec, labels: np.ndarray) -> list[RenderedView]:
    """Depth and semantic maps for every camera by marching pixel rays."""
    views = []
    for cam in spec.cameras:
        u, v = cam.pixel_grid()
        dirs = cam.ray_directions(u, v)
        depth = np.full(u.size, np.inf)
        sem = np.full(u.size, EMPTY, dtype=np.uint8)
        vox = np.full((u.size, 3), -1, dtype=np.int64)
        for k in range(u.size):
            hit = cast_ray(labels, spec.grid, cam.center, dirs[k])
            if hit.voxel is not None:
                depth[k], sem[k], vox[k] = hit.t, hit.label, hit.voxel
        shape = cam.image_size
        views.append(RenderedView(depth.reshape(shape), sem.reshape(shape),
                                  vox.reshape(shape + (3,))))
    return views


def occluded_length_gt(view: RenderedView, cam: CameraModel, grid: VoxelGridSpec,
                       labels: np.ndarray) -> np.ndarray:
    """Extent of the first-hit object behind its visible surface, per pixel.

    The ray continues past the first hit while the voxel class stays the
    same; the run length is in metres along the ray.  Pixels that miss are
    NaN.
    """
    out = np.full(cam.image_size, np.nan)
    u, v = cam.pixel_grid()
    dirs = cam.ray_directions(u, v)
    for k in range(u.size):
        r, c = divmod(k, cam.image_size[1])
        cls = int(view.semantic[r, c])
        if cls == EMPTY:
            continue
        start, end = None, None
        for t0, t1, vox in traverse(grid, cam.center, dirs[k]):
            lab = int(labels[vox])
            if start is None:
                if lab != EMPTY:
                    start, end = t0, t1
                continue
            if lab != cls:
                break
            end = t1
        out[r, c] = (end - start) * np.linalg.norm(dirs[k])
    return out


# -- grid dump -----------------------------------------------------------------

GRID_MAGIC = b"OCGR"


def dumps_grid(arr: np.ndarray) -> bytes:
    """Label grid ``(H, W, Z)`` as u8 or float grid ``(H, W, Z, C)`` as f64."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        head = GRID_MAGIC + struct.pack("<4I", *arr.shape, 0)
        return head + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    if arr.ndim == 4:
        head = GRID_MAGIC + struct.pack("<4I", *arr.shape)
        return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()
    raise ValueError("grid must be (H, W, Z) labels or (H, W, Z, C) channels")


def loads_grid(buf: bytes) -> np.ndarray:
    if buf[:4] != GRID_MAGIC:
        raise ValueError("not an OCGR grid dump")
    h, w, z, c = struct.unpack_from("<4I", buf, 4)
    body = buf[20:]
    if c == 0:
        if len(body) != h * w * z:
            raise ValueError("OCGR label payload size mismatch")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, z).copy()
    if len(body) != 8 * h * w * z * c:
        raise ValueError("OCGR channel payload size mismatch")
    return np.frombuffer(body, dtype="<f8").reshape(h, w, z, c).astype(np.float64)


def save_grid(path, arr) -> None:
    Path(path).write_bytes(dumps_grid(arr))


def load_grid(path) -> np.ndarray:
    return loads_grid(Path(path).read_bytes())
