"""Two-frame toy model: learnable image-side leaves, lifting, heads and losses.

The image backbone and depth network are replaced by directly learnable
per-pixel tensors (features, depth logits, occlusion-kernel logits and
inter-object transfer parameters).  Everything downstream is the real
pipeline, so plain gradient descent on these leaves exercises every
differentiable path.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .flowhead import (BevSpec, FlowBinSpec, FlowDecoder, collapse_bev, cost_volume,
                       decode_flow, flow_loss, flow_loss_voxels, window_offsets)
from .geometry import DepthBinSpec, uniform_depth_bins
from .lifting import (DenoiseSchedule, InterObjectTransfer, apply_lift, blend_denoise,
                      build_transfer_matrix, depth_to_occluded, gt_depth_distribution,
                      select_top_bins)
from .metrics import RayQuerySet, build_ray_queries, camera_rays, fan_rays
from .scenes import SceneSpec, generate, load_scene, render
from .semhead import EMPTY, PrototypeBank, aux_2d_loss, infer_labels, loss_3d

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


@dataclass
class RunConfig:
    scene: str = "two_boxes.scene.json"
    depth_bins: dict = field(default_factory=lambda: {"D": 8, "d_min": 97.2, "d_max": 100.4})
    m: int = 3
    denoise_epochs: int = 6
    steps_per_epoch: int = 20
    K: int = 25088
    alpha: float = 5.0
    beta: float = 20.0
    flow_bins: dict = field(default_factory=lambda: {"n": 16, "lo": -10.0, "hi": 10.0})
    bev: dict = field(default_factory=lambda: {"factor": 2, "z_lo": 0.0, "z_hi": 4.0,
                                               "window_radius": 1})
    features: int = 16
    flow_hidden: int = 24
    lr: float = 0.02
    steps: int = 200
    seed: int = 0
    out: str = "out"
    denoise: bool = True
    inter_object: bool = True
    occlusion_kernel: bool = True
    cost_volume: bool = True
    class_names: list | None = None
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        known.setdefault("base_dir", str(base_dir))
        return cls(**known)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = resolve_path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def K_effective(self) -> int:
        return self.K

    def scene_path(self) -> Path:
        p = Path(self.scene)
        if not p.is_absolute():
            p = Path(self.base_dir) / p
        return p

    def bins(self) -> DepthBinSpec:
        b = self.depth_bins
        return uniform_depth_bins(b["d_min"], b["d_max"], b["D"])

    def flow_bin_spec(self) -> FlowBinSpec:
        b = self.flow_bins
        return FlowBinSpec.uniform(b["lo"], b["hi"], b["n"])

    def bev_spec(self) -> BevSpec:
        b = self.bev
        return BevSpec(int(b["factor"]), float(b["z_lo"]), float(b["z_hi"]))

    def annealing_steps(self) -> int:
        return self.denoise_epochs * self.steps_per_epoch


def resolve_path(name) -> Path:
    """A filesystem path, or the name of a file shipped in the package data."""
    p = Path(name)
    if p.exists():
        return p
    for cand in (DATA_DIR / p.name, DATA_DIR / f"{p.name}.config.json"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no such config or scene: {name}")


# -- scene ground truth --------------------------------------------------------

@dataclass
class FrameData:
    labels: np.ndarray             # (H, W, Z) uint8
    depth: np.ndarray              # (P,) rendered depth, inf on miss
    masks: np.ndarray              # (P,) 2D semantic mask
    gt_depth: np.ndarray           # (P, D) ground-truth depth distribution


@dataclass
class SceneData:
    spec: SceneSpec
    prev: FrameData
    cur: FrameData
    flow: np.ndarray               # (H, W, Z, 2)

    @property
    def n_pixels(self) -> int:
        return self.cur.depth.size


def _frame(spec: SceneSpec, labels: np.ndarray, bins: DepthBinSpec) -> FrameData:
    views = render(spec, labels)
    depth = np.concatenate([v.depth.reshape(-1) for v in views])
    masks = np.concatenate([v.semantic.reshape(-1) for v in views])
    return FrameData(labels, depth, masks, gt_depth_distribution(depth, bins))


def prepare_scene(spec: SceneSpec, bins: DepthBinSpec) -> SceneData:
    labels_prev, labels_t, flow = generate(spec)
    return SceneData(spec, _frame(spec, labels_prev, bins), _frame(spec, labels_t, bins), flow)


# -- parameters ----------------------------------------------------------------

def _leaf(arr) -> ng.Tensor:
    return ng.Tensor(arr, requires_grad=True)


@dataclass
class FrameParams:
    """Per-pixel leaves of one frame, stored divided by ``gain``.

    Every loss averages over pixels, which scales per-pixel gradients by
    ``1/P``; storing the leaves as ``value / gain`` with ``gain = sqrt(P)``
    multiplies their effective step size by ``P`` so one learning rate
    suits both per-pixel and shared parameters.
    """
    raw_features: ng.Tensor        # (P, F)
    raw_depth_logits: ng.Tensor    # (P, D)
    raw_kernel_logits: ng.Tensor   # (P, D-1)
    raw_offsets: ng.Tensor         # (P, m, 2)
    raw_weight_logits: ng.Tensor   # (P, m)
    gain: float = 1.0

    @classmethod
    def from_values(cls, features, depth_logits, kernel_logits, offsets, weight_logits,
                    gain: float = 1.0) -> "FrameParams":
        return cls(*(_leaf(np.asarray(a, dtype=np.float64) / gain) for a in
                     (features, depth_logits, kernel_logits, offsets, weight_logits)), gain)

    def _scaled(self, t: ng.Tensor) -> ng.Tensor:
        return t if self.gain == 1.0 else ng.mul(t, self.gain)

    @property
    def features(self) -> ng.Tensor:
        return self._scaled(self.raw_features)

    @property
    def depth_logits(self) -> ng.Tensor:
        return self._scaled(self.raw_depth_logits)

    @property
    def kernel_logits(self) -> ng.Tensor:
        return self._scaled(self.raw_kernel_logits)

    @property
    def offsets(self) -> ng.Tensor:
        return self._scaled(self.raw_offsets)

    @property
    def weight_logits(self) -> ng.Tensor:
        return self._scaled(self.raw_weight_logits)

    def parameters(self) -> list[ng.Tensor]:
        return [self.raw_features, self.raw_depth_logits, self.raw_kernel_logits,
                self.raw_offsets, self.raw_weight_logits]


@dataclass
class ToyModel:
    prev: FrameParams
    cur: FrameParams
    enc_w: ng.Tensor
    enc_b: ng.Tensor
    bank: PrototypeBank
    decoder: FlowDecoder

    def parameters(self) -> list[ng.Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, ng.Tensor]]:
        frame_names = ("features", "depth_logits", "kernel_logits", "offsets", "weight_logits")
        out = []
        for tag, fp in (("prev", self.prev), ("cur", self.cur)):
            out += [(f"{tag}.{n}", t) for n, t in zip(frame_names, fp.parameters())]
        out += [("encoder.w", self.enc_w), ("encoder.b", self.enc_b)]
        bank_names = ("prototypes", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")
        out += [(f"bank.{n}", t) for n, t in zip(bank_names, self.bank.parameters())]
        dec_names = ("w_feat", "w_cv", "b1", "w2", "b2")
        out += [(f"flow.{n}", t) for n, t in zip(dec_names, self.decoder.parameters())]
        return out


def init_model(cfg: RunConfig, n_pixels: int, n_classes: int) -> ToyModel:
    rng = np.random.default_rng(cfg.seed)
    D, F, m = cfg.depth_bins["D"], cfg.features, cfg.m

    gain = float(np.sqrt(n_pixels))

    def frame():
        return FrameParams.from_values(
            rng.normal(0, 1.0, (n_pixels, F)),
            rng.normal(0, 0.1, (n_pixels, D)),
            rng.normal(0, 0.1, (n_pixels, D - 1)),
            rng.normal(0, 0.1, (n_pixels, m, 2)),
            np.full((n_pixels, m), -2.0) + rng.normal(0, 0.1, (n_pixels, m)),
            gain,
        )

    prev, cur = frame(), frame()
    enc_w = _leaf(np.eye(F) + rng.normal(0, 0.1, (F, F)))
    enc_b = _leaf(rng.normal(0, 0.1, F))
    bank = PrototypeBank.random(n_classes, F, rng, scale=1.0 / np.sqrt(F))
    nwin = (2 * cfg.bev["window_radius"] + 1) ** 2
    decoder = FlowDecoder.random(F, nwin, cfg.flow_hidden, cfg.flow_bins["n"], rng)
    return ToyModel(prev, cur, enc_w, enc_b, bank, decoder)


# -- forward -------------------------------------------------------------------

def depth_loss(pred_depth: ng.Tensor, gt: np.ndarray, hit: np.ndarray) -> ng.Tensor:
    """Cross-entropy of predicted depth distributions against ground-truth bins."""
    rows = np.nonzero(hit)[0]
    if rows.size == 0:
        return ng.Tensor(0.0)
    logp = ng.log(ng.gather(pred_depth, rows))
    return ng.mul(ng.mean(ng.sum(ng.mul(logp, gt[rows]), axis=-1)), -1.0)


def lift_frame(params: FrameParams, frame: FrameData, spec: SceneSpec, cfg: RunConfig,
               bins: DepthBinSpec, step: int | None):
    """Lifted volume features ``(H*W*Z, F)`` and the predicted depth distribution."""
    depth_pred = ng.softmax_lastdim(params.depth_logits)
    depth = depth_pred
    if cfg.denoise:
        depth = blend_denoise(depth_pred, frame.gt_depth,
                              DenoiseSchedule(cfg.annealing_steps(), step))
    occ = depth
    if cfg.occlusion_kernel:
        occ = depth_to_occluded(depth, ng.sigmoid(params.kernel_logits))
    inter = None
    if cfg.inter_object and cfg.m > 0:
        inter = InterObjectTransfer(params.offsets, ng.sigmoid(params.weight_logits),
                                    select_top_bins(depth.data, cfg.m))
    M = build_transfer_matrix(occ, spec.cameras, bins, spec.grid, inter)
    return apply_lift(M, params.features), depth_pred


def encode(model: ToyModel, f_lift: ng.Tensor) -> ng.Tensor:
    return ng.add(ng.matmul(f_lift, model.enc_w), model.enc_b)


def frame_losses(model: ToyModel, params: FrameParams, frame: FrameData, data: SceneData,
                 cfg: RunConfig, bins: DepthBinSpec, step: int | None) -> dict:
    f_lift, depth_pred = lift_frame(params, frame, data.spec, cfg, bins, step)
    f_v = encode(model, f_lift)
    K = min(cfg.K, f_v.shape[0])
    l3d = loss_3d(f_v, frame.labels.reshape(-1), model.bank, K, cfg.alpha, cfg.beta, cfg.seed)
    l2d = aux_2d_loss(params.features, frame.masks, model.bank, min(cfg.K, frame.masks.size),
                      cfg.alpha, cfg.beta, cfg.seed)
    ldepth = depth_loss(depth_pred, frame.gt_depth, np.isfinite(frame.depth))
    sem = ng.add(ng.add(l3d, l2d), ldepth)
    return {"volume": f_v, "l3d": l3d, "l2d": l2d, "ldepth": ldepth, "lsem": sem}


def forward(model: ToyModel, data: SceneData, cfg: RunConfig, step: int | None = 0,
            flow_voxels: np.ndarray | None = None) -> dict:
    """All losses for one gradient step.

    ``objective`` is the current frame's semantic+flow loss plus the previous
    frame's semantic loss (which trains the history features the cost
    volume compares against).
    """
    bins = cfg.bins()
    grid = data.spec.grid
    prev = frame_losses(model, model.prev, data.prev, data, cfg, bins, step)
    cur = frame_losses(model, model.cur, data.cur, data, cfg, bins, step)
    bev = cfg.bev_spec()
    cv = None
    if cfg.cost_volume:
        cv = cost_volume(collapse_bev(cur["volume"], bev, grid),
                         collapse_bev(prev["volume"], bev, grid),
                         data.spec.ego_motion, window_offsets(cfg.bev["window_radius"]),
                         grid, bev.factor)
    fbins = cfg.flow_bin_spec()
    pred, probs = decode_flow(cur["volume"], cv, fbins, model.decoder, grid, bev.factor)
    if flow_voxels is None:
        flow_voxels = flow_loss_voxels(data.flow, np.random.default_rng(cfg.seed))
    lflow = flow_loss(pred, probs, data.flow.reshape(-1, 2), fbins, flow_voxels)
    lsem_flow = ng.add(cur["lsem"], lflow)
    return {
        "objective": ng.add(lsem_flow, prev["lsem"]),
        "lsem": cur["lsem"], "lsem_flow": lsem_flow, "lflow": lflow,
        "l3d": cur["l3d"], "l2d": cur["l2d"], "ldepth": cur["ldepth"],
        "lsem_prev": prev["lsem"],
        "volume": cur["volume"], "flow": pred, "cost_volume": cv,
    }


class DivergenceError(ng.NumericError):
    def __init__(self, step: int, msg: str = "non-finite loss"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


TRACE_KEYS = ("objective", "lsem_flow", "lsem", "l3d", "l2d", "ldepth", "lflow", "lsem_prev")


def fit(model: ToyModel, data: SceneData, cfg: RunConfig, steps: int | None = None,
        lr: float | None = None) -> list[dict]:
    """Plain full-batch gradient descent; returns the per-step loss trace.

    The trace records losses evaluated before each update, plus one final
    evaluation after the last update.
    """
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    params = model.parameters()
    flow_voxels = flow_loss_voxels(data.flow, np.random.default_rng(cfg.seed))
    trace = []
    for step in range(steps + 1):
        try:
            with ng.Tape() as tape:
                out = forward(model, data, cfg, step, flow_voxels)
        except ng.NumericError as exc:
            raise DivergenceError(step, str(exc)) from exc
        trace.append({"step": step, **{k: out[k].item() for k in TRACE_KEYS}})
        if step == steps:
            break
        grads = ng.backward(tape, out["objective"])
        for p in params:
            g = grads.get(p.id)
            if g is None:
                continue
            if not np.all(np.isfinite(g.data)):
                raise DivergenceError(step, "non-finite gradient")
            p.data -= lr * g.data
        if step % 20 == 0:
            log.info("step %d objective %.4f", step, trace[-1]["objective"])
    return trace


@dataclass
class Prediction:
    labels: np.ndarray             # (H, W, Z) uint8
    flow: np.ndarray               # (H, W, Z, 2)


def predict(model: ToyModel, data: SceneData, cfg: RunConfig) -> Prediction:
    """Inference: depth denoising off, argmax labels and expected flow."""
    infer_cfg = RunConfig(**{**asdict(cfg), "denoise": False})
    out = forward(model, data, infer_cfg, step=None)
    dims = data.spec.grid.dims
    labels = infer_labels(out["volume"], model.bank).reshape(dims)
    flow = out["flow"].data.reshape(dims + (2,))
    return Prediction(labels, flow)


def load_run(cfg: RunConfig) -> SceneData:
    spec = load_scene(resolve_path(cfg.scene_path()))
    return prepare_scene(spec, cfg.bins())


def semantic_classes(spec: SceneSpec) -> list[int]:
    return list(range(spec.n_classes))


def eval_rays(spec: SceneSpec, labels: np.ndarray, n_azimuth: int = 64,
              elevations=(-0.2, -0.4, -0.6)) -> RayQuerySet:
    """Query rays: every camera pixel plus downward-tilted fans from the grid
    centre at mid height."""
    grid = spec.grid
    top = grid.origin + np.asarray(grid.dims) * grid.cell
    center = (grid.origin + top) / 2
    o_cam, d_cam = camera_rays(spec.cameras)
    o_fan, d_fan = fan_rays(center, n_azimuth, elevations)
    return build_ray_queries(labels, grid, np.concatenate([o_cam, o_fan]),
                             np.concatenate([d_cam, d_fan]))


__all__ = ["RunConfig", "ToyModel", "SceneData", "init_model", "prepare_scene", "forward",
           "fit", "predict", "load_run", "EMPTY"]
