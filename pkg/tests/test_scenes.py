import numpy as np
import pytest

from occflow.geometry import CameraModel, EgoMotion, VoxelGridSpec
from occflow.scenes import (SceneObject, SceneSpec, cast_ray, dumps_grid, generate, load_grid,
                            load_scene, loads_grid, occluded_length_gt, render, save_grid,
                            save_scene, traverse)
from occflow.semhead import EMPTY

from _checks import march_first_hit

rng = np.random.default_rng(17)
GRID = VoxelGridSpec(np.array([-3.2, -3.2, -0.4]), 0.4, (16, 16, 8))


def nadir_camera(n=8, f=50.0, height=20.0):
    e = np.array([[1.0, 0, 0, 0], [0, -1, 0, 0], [0, 0, -1, height], [0, 0, 0, 1]])
    c = (n - 1) / 2
    return CameraModel(np.array([[f, 0, c], [0, f, c], [0, 0, 1]]), e, (n, n))


def box(center, size, cls, vel=(0.0, 0.0)):
    return SceneObject("box", np.array(center), np.array(size), cls, np.array(vel))


def test_empty_scene():
    spec = SceneSpec(GRID, [nadir_camera()], [], n_classes=2)
    prev, cur, flow = generate(spec)
    assert np.all(prev == EMPTY) and np.all(cur == EMPTY) and np.all(flow == 0)
    views = render(spec, cur)
    assert np.all(np.isinf(views[0].depth)) and np.all(views[0].semantic == EMPTY)


def test_static_box():
    spec = SceneSpec(GRID, [], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1)], n_classes=2)
    prev, cur, flow = generate(spec)
    np.testing.assert_array_equal(prev, cur)
    assert np.sum(cur == 1) == 27
    assert np.all(flow == 0)


def test_moving_box_shifts_one_cell():
    spec = SceneSpec(GRID, [], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1, (2.0, 0.0))],
                     n_classes=2, dt=0.2)
    prev, cur, flow = generate(spec)
    np.testing.assert_array_equal(cur[1:], prev[:-1])
    assert np.all(flow[cur == 1] == [2.0, 0.0])
    assert np.all(flow[cur != 1] == 0)


def test_ego_motion_moves_static_content():
    spec = SceneSpec(GRID, [], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1)], n_classes=2,
                     ego_motion=EgoMotion.planar(dx=0.4))
    prev, cur, _ = generate(spec)
    # t-1 coordinates sit 0.4 m behind frame t ones
    np.testing.assert_array_equal(cur[1:], prev[:-1])


def test_later_object_wins_and_ground():
    spec = SceneSpec(GRID, [], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1),
                                box([0.2, 0.2, 0.6], [0.4, 0.4, 0.4], 2)],
                     n_classes=3, ground_class=0)
    _, cur, _ = generate(spec)
    assert cur[8, 8, 2] == 2 and np.sum(cur == 1) == 26
    assert np.all(cur[:, :, 0] == 0) and np.all(cur[:, :, 1:][cur[:, :, 1:] == 0] == 0)


def test_spec_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        SceneSpec(GRID, [], [box([0, 0, 0.6], [1, 1, 1], 5)], n_classes=2)
    with pytest.raises(ValueError):
        SceneSpec(GRID, [], [box([50, 0, 0.6], [1, 1, 1], 1)], n_classes=2)
    with pytest.raises(ValueError):
        SceneObject("cone", np.zeros(3), np.ones(3), 0)
    spec = SceneSpec(GRID, [nadir_camera()], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1, (1, 2))],
                     n_classes=2, ground_class=0, dynamic_classes=(1,))
    save_scene(spec, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    save_scene(back, tmp_path / "s2.json")
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "s2.json").read_bytes()
    for a, b in zip(generate(spec), generate(back)):
        np.testing.assert_array_equal(a, b)


def test_sphere_voxelisation():
    spec = SceneSpec(GRID, [], [SceneObject("sphere", np.array([0.2, 0.2, 1.0]),
                                            np.array([1.3]), 1)], n_classes=2)
    _, cur, _ = generate(spec)
    centers = GRID.voxel_centers()
    inside = np.linalg.norm(centers - [0.2, 0.2, 1.0], axis=-1) <= 0.65
    np.testing.assert_array_equal(cur == 1, inside)


def test_wall_depth():
    grid = VoxelGridSpec(np.zeros(3), 0.4, (10, 4, 4))
    labels = np.full(grid.dims, EMPTY, np.uint8)
    labels[7] = 1                                  # wall spanning x in [2.8, 3.2)
    e = np.array([[0.0, 0, 1, 0.1], [0, 1, 0, 0.8], [-1, 0, 0, 0.8], [0, 0, 0, 1]])
    cam = CameraModel(np.array([[10.0, 0, 1], [0, 10.0, 1], [0, 0, 1]]), e, (3, 3))
    spec = SceneSpec(grid, [cam], [], n_classes=2)
    view = render(spec, labels)[0]
    assert view.depth[1, 1] == pytest.approx(2.7, abs=0.2)
    assert np.all(view.semantic == 1)


def test_degenerate_ray():
    with pytest.raises(ValueError):
        list(traverse(GRID, np.zeros(3), np.zeros(3)))


def test_traversal_segments_are_contiguous():
    for _ in range(50):
        o = rng.uniform(-5, 5, 3)
        d = rng.normal(size=3)
        segs = list(traverse(GRID, o, d))
        for (a0, a1, va), (b0, b1, vb) in zip(segs, segs[1:]):
            assert a1 == pytest.approx(b0, abs=1e-12)
            assert sum(abs(x - y) for x, y in zip(va, vb)) == 1


def random_labels(r, dims=(4, 4, 4), fill=0.3):
    lab = np.where(r.uniform(size=dims) < fill, r.integers(0, 3, dims), EMPTY)
    return lab.astype(np.uint8)


def test_render_matches_fine_step_oracle():
    grid = VoxelGridSpec(np.array([-0.8, -0.8, -0.8]), 0.4, (4, 4, 4))
    for _ in range(10):
        labels = random_labels(rng)
        e = np.eye(4)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        e[:3, :3] = q * np.sign(np.linalg.det(q))
        e[:3, 3] = -e[:3, 2] * 2.5 + rng.normal(0, 0.2, 3)   # look roughly at the grid centre
        cam = CameraModel(np.array([[2.0, 0, 1], [0, 2.0, 1], [0, 0, 1]]), e, (3, 3))
        view = render(SceneSpec(grid, [cam], [], n_classes=3), labels)[0]
        u, v = cam.pixel_grid()
        dirs = cam.ray_directions(u, v)
        for k in range(9):
            unit = dirs[k] / np.linalg.norm(dirs[k])
            t, vox, lab = march_first_hit(labels, grid, cam.center, unit, step_frac=1e-2)
            r, c = divmod(k, 3)
            got = tuple(view.hit_voxel[r, c]) if view.semantic[r, c] != EMPTY else None
            assert got == vox
            if vox is not None:
                assert view.semantic[r, c] == lab == labels[vox]
                depth_m = view.depth[r, c] * np.linalg.norm(dirs[k])
                assert depth_m == pytest.approx(t, abs=grid.cell * 1e-2)


def test_occluded_length_head_on_and_thin_wall():
    grid = VoxelGridSpec(np.array([-0.8, -0.8, -0.4]), 0.4, (4, 4, 8))
    cam = nadir_camera(n=1, f=10.0, height=10.0)
    spec = SceneSpec(grid, [cam], [box([0.2, 0.2, 0.6], [0.4, 0.4, 1.2], 1)], n_classes=2,
                     ground_class=0)
    _, labels, _ = generate(spec)
    view = render(spec, labels)[0]
    assert occluded_length_gt(view, cam, grid, labels)[0, 0] == pytest.approx(1.2, abs=1e-9)
    thin = SceneSpec(grid, [cam], [], n_classes=2, ground_class=0)
    _, labels, _ = generate(thin)
    view = render(thin, labels)[0]
    assert occluded_length_gt(view, cam, grid, labels)[0, 0] == pytest.approx(0.4, abs=1e-9)


def test_occluded_length_oblique_within_a_cell_diagonal():
    grid = VoxelGridSpec(np.array([-1.6, -1.6, -0.4]), 0.4, (8, 8, 8))
    spec = SceneSpec(grid, [], [box([0.0, 0.0, 0.6], [1.6, 1.6, 1.2], 1)], n_classes=2)
    _, labels, _ = generate(spec)
    e = np.eye(4)
    ang = 0.5
    e[:3, :3] = [[np.cos(ang), 0, -np.sin(ang)], [0, 1, 0], [np.sin(ang), 0, np.cos(ang)]]
    e[:3, :3] = e[:3, :3] @ np.diag([1, -1, -1])
    e[:3, 3] = np.array([0.0, 0.0, 0.6]) - e[:3, 2] * 5.0
    cam = CameraModel(np.array([[20.0, 0, 1], [0, 20.0, 1], [0, 0, 1]]), e, (3, 3))
    view = render(SceneSpec(grid, [cam], [], n_classes=2), labels)[0]
    got = occluded_length_gt(view, cam, grid, labels)
    u, v = cam.pixel_grid()
    dirs = cam.ray_directions(u, v)
    for k in range(9):
        r, c = divmod(k, 3)
        unit = dirs[k] / np.linalg.norm(dirs[k])
        t0, vox, lab = march_first_hit(labels, grid, cam.center, unit, step_frac=1e-2)
        assert vox is not None
        ts = np.arange(t0, t0 + 10, grid.cell * 1e-2)
        q = np.floor((cam.center + ts[:, None] * unit - grid.origin) / grid.cell).astype(int)
        ok = np.all((q >= 0) & (q < grid.dims), axis=1)
        same = np.zeros(ts.size, bool)
        same[ok] = labels[tuple(q[ok].T)] == lab
        run = np.argmin(same) if not same.all() else ts.size
        oracle = ts[run - 1] - t0 if run else 0.0
        assert abs(got[r, c] - oracle) <= grid.cell * np.sqrt(3)


def test_render_semantic_consistent_with_labels():
    spec = SceneSpec(GRID, [nadir_camera()], [box([0.2, 0.2, 0.6], [1.2, 1.2, 1.2], 1)],
                     n_classes=2, ground_class=0)
    _, labels, _ = generate(spec)
    view = render(spec, labels)[0]
    hit = view.semantic != EMPTY
    vox = view.hit_voxel[hit]
    np.testing.assert_array_equal(labels[tuple(vox.T)], view.semantic[hit])


def test_grid_dumps(tmp_path):
    labels = random_labels(rng, (3, 4, 5))
    raw = dumps_grid(labels)
    assert raw[:4] == b"OCGR"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [3, 4, 5, 0]
    np.testing.assert_array_equal(loads_grid(raw), labels)
    flow = rng.normal(size=(3, 4, 5, 2))
    save_grid(tmp_path / "f.ocgr", flow)
    np.testing.assert_array_equal(load_grid(tmp_path / "f.ocgr"), flow)
    with pytest.raises(ValueError):
        loads_grid(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        loads_grid(raw[:-1])
    with pytest.raises(ValueError):
        dumps_grid(np.zeros((2, 2)))


def test_cast_ray_miss():
    hit = cast_ray(np.full(GRID.dims, EMPTY, np.uint8), GRID, np.zeros(3), np.array([1.0, 0, 0]))
    assert hit.voxel is None and np.isinf(hit.t)
