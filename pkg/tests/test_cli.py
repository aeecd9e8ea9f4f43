import json
import shutil

import numpy as np
import pytest

from occflow import numgrad as ng
from occflow.cli import main
from occflow.lifting import DenoiseSchedule
from occflow.pipeline import (DATA_DIR, RunConfig, fit, forward, init_model, lift_frame,
                              load_run, prepare_scene)
from occflow.scenes import load_grid, load_scene, save_grid
from occflow.semhead import EMPTY

from _checks import gradcheck


def run(*args):
    return main([str(a) for a in args])


def test_gen_is_deterministic(tmp_path):
    assert run("gen", "--config", "two_boxes", "--out", tmp_path / "a") == 0
    assert run("gen", "--config", "two_boxes", "--out", tmp_path / "b") == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_two_boxes_occupancy_matches_box_volumes(tmp_path):
    assert run("gen", "--config", "two_boxes", "--out", tmp_path) == 0
    spec = load_scene(DATA_DIR / "two_boxes.scene.json")
    cell = spec.grid.cell
    h, w, _ = spec.grid.dims
    analytic = h * w        # ground: the single layer below z = 0
    for obj in spec.objects:
        analytic += int(np.prod(np.round(obj.size / cell)))
    labels = load_grid(tmp_path / "labels_t.ocgr")
    assert int(np.sum(labels != EMPTY)) == analytic == 316
    assert json.loads((tmp_path / "gen.json").read_text())["occupied_t"] == analytic


def test_missing_scene_is_data_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": "nowhere.json"}))
    assert run("gen", "--config", cfg, "--out", tmp_path) == 2
    assert "nowhere.json" in capsys.readouterr().err


def test_usage_errors():
    assert run("bogus") == 1
    assert run("fit", "--steps", "-3") == 1
    assert run("fit", "--unknown-flag") == 1


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": str(DATA_DIR / "smoke.scene.json"), "colour": 1}))
    assert run("gen", "--config", cfg, "--out", tmp_path) == 2


def test_divergence_is_numeric_failure(tmp_path, capsys):
    assert run("fit", "--config", "smoke", "--out", tmp_path, "--steps", 5, "--lr", 1e6) == 3
    assert "step" in capsys.readouterr().err


def test_zero_step_size_keeps_trace_constant():
    cfg = RunConfig.load("smoke")
    data = load_run(cfg)
    model = init_model(cfg, data.n_pixels, data.spec.n_classes)
    cfg.denoise = False               # the blend weight itself changes with the step
    trace = fit(model, data, cfg, steps=3, lr=0.0)
    assert len({t["objective"] for t in trace}) == 1


def test_step_zero_lifts_ground_truth_depth():
    cfg = RunConfig.load("smoke")
    data = load_run(cfg)
    assert DenoiseSchedule(cfg.annealing_steps(), 0).gt_weight == 1.0
    model = init_model(cfg, data.n_pixels, data.spec.n_classes)
    bins = cfg.bins()
    a, _ = lift_frame(model.cur, data.cur, data.spec, cfg, bins, 0)
    model.cur.raw_depth_logits.data += np.random.default_rng(0).normal(size=(4, 4))
    b, _ = lift_frame(model.cur, data.cur, data.spec, cfg, bins, 0)
    np.testing.assert_array_equal(a.data, b.data)
    c, _ = lift_frame(model.cur, data.cur, data.spec, cfg, bins, cfg.annealing_steps())
    assert not np.array_equal(a.data, c.data)


def test_fit_eval_roundtrip_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert run("gen", "--config", "smoke", "--out", tmp_path / d) == 0
        assert run("fit", "--config", "smoke", "--out", tmp_path / d, "--steps", 3) == 0
        assert run("eval", "--config", "smoke", "--out", tmp_path / d) == 0
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file() and f.name != "trace.json":    # trace.json records the out dir
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    trace = json.loads((tmp_path / "a" / "trace.json").read_text())["trace"]
    assert trace == json.loads((tmp_path / "b" / "trace.json").read_text())["trace"]
    assert [t["step"] for t in trace] == [0, 1, 2, 3]
    svg = (tmp_path / "a" / "bev_gt_labels.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_eval_perfect_prediction(tmp_path):
    assert run("gen", "--config", "two_boxes", "--out", tmp_path) == 0
    shutil.copy(tmp_path / "labels_t.ocgr", tmp_path / "pred_labels.ocgr")
    shutil.copy(tmp_path / "flow_t.ocgr", tmp_path / "pred_flow.ocgr")
    assert run("eval", "--config", "two_boxes", "--out", tmp_path, "--no-plots") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["miou"] == 1.0 and rep["ray_iou"] == 1.0
    assert rep["mave"] == 0.0 and rep["mave_tp"] == 0.0
    assert rep["occ_score"] == pytest.approx(100.0)
    assert set(rep["iou_per_class"]) == {"driveable_surface", "car", "barrier"}


def test_eval_all_empty_prediction(tmp_path):
    assert run("gen", "--config", "two_boxes", "--out", tmp_path) == 0
    gt = load_grid(tmp_path / "labels_t.ocgr")
    save_grid(tmp_path / "pred_labels.ocgr", np.full_like(gt, EMPTY))
    assert run("eval", "--config", "two_boxes", "--out", tmp_path, "--no-plots") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert all(v == 0.0 for v in rep["iou_per_class"].values())


def test_eval_dimension_mismatch(tmp_path):
    assert run("gen", "--config", "two_boxes", "--out", tmp_path) == 0
    save_grid(tmp_path / "pred_labels.ocgr", np.zeros((4, 4, 4), np.uint8))
    assert run("eval", "--config", "two_boxes", "--out", tmp_path) == 2


def test_eval_separate_pred_and_gt_dirs(tmp_path):
    assert run("gen", "--config", "smoke", "--out", tmp_path / "gt") == 0
    assert run("fit", "--config", "smoke", "--out", tmp_path / "pred", "--steps", 1) == 0
    assert run("eval", "--config", "smoke", "--out", tmp_path / "ev", "--pred",
               tmp_path / "pred", "--gt", tmp_path / "gt") == 0
    assert (tmp_path / "ev" / "report.json").exists()


def tiny_config():
    """2x2x2 grid seen by a 2x2 camera: one ground layer, one box voxel on top."""
    from occflow.geometry import CameraModel, VoxelGridSpec
    from occflow.scenes import SceneObject, SceneSpec
    e = np.array([[1.0, 0, 0, 0], [0, -1, 0, 0], [0, 0, -1, 100.0], [0, 0, 0, 1]])
    cam = CameraModel(np.array([[250.0, 0, 0.5], [0, 250.0, 0.5], [0, 0, 1]]), e, (2, 2))
    grid = VoxelGridSpec(np.array([-0.4, -0.4, -0.4]), 0.4, (2, 2, 2))
    spec = SceneSpec(grid, [cam], [SceneObject("box", np.array([-0.2, -0.2, 0.2]),
                                               np.array([0.4, 0.4, 0.4]), 1, np.array([2.0, 0]))],
                     n_classes=2, ground_class=0, dynamic_classes=(1,))
    cfg = RunConfig(depth_bins={"D": 2, "d_min": 99.6, "d_max": 100.4}, features=3,
                    flow_hidden=4, m=1, bev={"factor": 1, "z_lo": -0.4, "z_hi": 0.4,
                                             "window_radius": 1})
    return cfg, spec


def test_step_zero_objective_gradient_matches_finite_differences():
    cfg, spec = tiny_config()
    data = prepare_scene(spec, cfg.bins())
    model = init_model(cfg, data.n_pixels, data.spec.n_classes)
    named = model.named_parameters()
    with ng.Tape() as tape:
        out = forward(model, data, cfg, step=0)
    grads = ng.backward(tape, out["objective"])
    for name, p in named:
        def loss(x, p=p):
            saved = p.data
            p.data = x.data
            try:
                return forward(model, data, cfg, step=0)["objective"]
            finally:
                p.data = saved
        fd = ng.finite_diff(loss, ng.Tensor(p.data.copy())).data
        an = grads[p.id].data if p.id in grads else np.zeros_like(fd)
        err = np.abs(an - fd) / (1e-6 + 1e-4 * np.maximum(np.abs(an), np.abs(fd)))
        assert err.max() <= 1.0, f"{name}: worst ratio {err.max():.3g}"
