import numpy as np
import pytest

from occflow.geometry import VoxelGridSpec
from occflow.metrics import (OCC3D_CLASSES, OCC3D_DYNAMIC, ConfusionCounts, build_ray_queries,
                             fan_rays, mave, mean_iou, metric_report, miou, occ_score, ray_iou,
                             ray_tp_mask)
from occflow.semhead import EMPTY

rng = np.random.default_rng(19)


def random_labels(dims=(4, 4, 4), fill=0.4, n=3):
    return np.where(rng.uniform(size=dims) < fill, rng.integers(0, n, dims), EMPTY).astype(np.uint8)


def test_miou_identity_and_absent_classes():
    gt = random_labels()
    per, m = miou(gt, gt, range(5))
    np.testing.assert_array_equal(per[:3], 1.0)
    assert np.all(np.isnan(per[3:])) and m == 1.0


def test_miou_all_empty_prediction():
    gt = random_labels()
    per, m = miou(np.full_like(gt, EMPTY), gt, range(3))
    np.testing.assert_array_equal(per, 0.0)
    assert m == 0.0


def test_miou_shape_mismatch():
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), [0])


def test_confusion_rejects_negative():
    with pytest.raises(ValueError):
        ConfusionCounts(np.array([-1]), np.array([0]), np.array([0]))


def test_flipping_wrong_voxel_never_lowers_iou():
    for _ in range(50):
        gt = random_labels()
        pred = random_labels()
        wrong = np.argwhere(pred != gt)
        if len(wrong) == 0:
            continue
        v = tuple(wrong[rng.integers(len(wrong))])
        fixed = pred.copy()
        fixed[v] = gt[v]
        before, _ = miou(pred, gt, range(3))
        after, _ = miou(fixed, gt, range(3))
        c = gt[v]
        if c != EMPTY:
            assert after[c] >= before[c]


def test_published_per_class_means():
    row = [15.3, 52.5, 30.8, 47.2, 55.9, 32.7, 33.3, 32.4, 36.2, 38.9, 43.7, 84.9, 48.5,
           58.8, 61.9, 53.5, 47.3]
    assert len(OCC3D_CLASSES) == 17
    assert mean_iou(row) == pytest.approx(45.5, abs=0.05)
    dyn = [row[OCC3D_CLASSES.index(c)] for c in OCC3D_DYNAMIC]
    assert dyn == [30.8, 47.2, 55.9, 32.7, 33.3, 32.4, 38.9, 43.7]
    assert mean_iou(dyn) == pytest.approx(314.9 / 8, abs=1e-12)
    # printed inputs and printed mean are each rounded to 0.05
    assert abs(mean_iou(dyn) - 39.3) <= 0.05 + 0.05


def test_occ_score():
    assert occ_score(40.5, 0.427) == pytest.approx(42.18, abs=1e-9)
    assert occ_score(41.9, 0.481) == pytest.approx(42.90, abs=1e-9)
    assert occ_score(0.0, 1.3) == 0.0
    assert occ_score(100.0, 0.0) == 100.0


def test_mave_examples():
    labels = np.full((2, 2, 1), EMPTY, np.uint8)
    labels[0, 0, 0] = 1
    gt = np.zeros((2, 2, 1, 2))
    pred = gt.copy()
    assert mave(pred, gt, labels, [1]) == 0.0
    pred[0, 0, 0] = [1.0, 0.0]
    assert mave(pred, gt, labels, [1]) == 1.0
    labels[0, 1, 0] = labels[1, 0, 0] = 2
    pred[0, 1, 0] = [0.0, 2.0]
    pred[1, 0, 0] = [4.0, 0.0]
    assert mave(pred, gt, labels, [1, 2]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        mave(pred, gt, labels, [5])


def test_mave_tp_full_mask_equals_mave():
    labels = random_labels((3, 3, 3))
    gt, pred = rng.normal(size=(2, 3, 3, 3, 2))
    full = np.ones(labels.shape, bool)
    assert mave(pred, gt, labels, [1, 2], full) == mave(pred, gt, labels, [1, 2])


def _wall_setup():
    grid = VoxelGridSpec(np.zeros(3), 0.5, (20, 4, 4))
    gt = np.full(grid.dims, EMPTY, np.uint8)
    gt[4] = 1
    pred = np.full(grid.dims, EMPTY, np.uint8)
    pred[10] = 1                                    # same surface 3 m deeper
    ys, zs = np.meshgrid(np.linspace(0.2, 1.8, 4), np.linspace(0.2, 1.8, 4))
    origins = np.stack([np.full(16, 0.1), ys.ravel(), zs.ravel()], axis=1)
    rays = build_ray_queries(gt, grid, origins, np.tile([1.0, 0, 0], (16, 1)))
    return grid, gt, pred, rays


def test_ray_iou_identity():
    grid, gt, _, rays = _wall_setup()
    out = ray_iou(gt, gt, grid, rays, [1])
    assert out["mean"] == 1.0
    assert all(v == 1.0 for v in out["per_threshold"].values())


def test_ray_iou_pushed_surface():
    grid, gt, pred, rays = _wall_setup()
    out = ray_iou(pred, gt, grid, rays, [1])
    assert out["per_threshold"] == {1.0: 0.0, 2.0: 0.0, 4.0: 1.0}
    assert out["mean"] == pytest.approx(1 / 3)


def test_ray_iou_monotone_in_threshold():
    grid = VoxelGridSpec(np.array([-0.8, -0.8, -0.8]), 0.4, (4, 4, 4))
    for _ in range(10):
        gt, pred = random_labels(), random_labels()
        o, d = fan_rays(rng.uniform(-0.5, 0.5, 3), 16, (-0.3, 0.0, 0.4))
        rays = build_ray_queries(gt, grid, o, d)
        out = ray_iou(pred, gt, grid, rays, range(3), thresholds=(0.1, 0.5, 1.0, 2.0))
        vals = list(out["per_threshold"].values())
        assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))
        assert all(0 <= v <= 1 for v in vals)


def test_ray_iou_errors():
    grid, gt, pred, rays = _wall_setup()
    with pytest.raises(ValueError):
        ray_iou(pred[:5], gt, grid, rays, [1])
    empty = build_ray_queries(gt, grid, np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ray_iou(pred, gt, grid, empty, [1])


def test_tp_mask_marks_hit_voxels():
    grid, gt, pred, rays = _wall_setup()
    assert ray_tp_mask(gt, gt, grid, rays).sum() == 16
    assert ray_tp_mask(pred, gt, grid, rays).sum() == 0


def test_metric_report_perfect_prediction():
    grid, gt, _, rays = _wall_setup()
    flow = np.zeros(gt.shape + (2,))
    flow[gt == 1] = [1.0, 0.5]
    rep = metric_report(gt, gt, grid, rays, [0, 1], [1], flow, flow, ["ground", "car"])
    assert rep["miou"] == 1.0 and rep["ray_iou"] == 1.0
    assert rep["mave"] == 0.0 and rep["mave_tp"] == 0.0
    assert rep["occ_score"] == pytest.approx(100.0)
    assert rep["iou_per_class"]["ground"] is None
