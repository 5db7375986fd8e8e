from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egfs_loc import egfs
from egfs_loc import regressor as reg
from egfs_loc.geometry import CameraIntrinsics, Pose, project
from egfs_loc.synth import FeatureGrid, Frame, RegionLabel, SceneConfig, generate_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(n_train_frames=10, n_test_frames=0, seed=4))


def toy_frame(appearance, frame_id=0, labels=None):
    rows, cols = appearance.shape[:2]
    k = CameraIntrinsics(100.0, 100.0, cols * 4.0, rows * 4.0, cols * 8, rows * 8)
    rr, cc = np.mgrid[0:rows, 0:cols]
    pixels = np.stack([cc * 8 + 4.0, rr * 8 + 4.0], axis=-1)
    if labels is None:
        labels = np.zeros((rows, cols), dtype=np.uint8)
    grid = FeatureGrid(frame_id, pixels, np.zeros((rows, cols, 4), np.float32), np.zeros((rows, cols, 3)),
                       labels, appearance.astype(np.float32), labels.astype(np.int32))
    return Frame(frame_id, Pose.identity(), k, grid)


def components_each_hold_a_prompt(mask, prompts):
    """BFS over the mask; every 4-connected component must contain a prompt."""
    seen = np.zeros_like(mask)
    pset = {tuple(p) for p in prompts.tolist()}
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, q = [], deque([start])
        seen[start] = True
        while q:
            r, c = q.popleft()
            comp.append((r, c))
            for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    q.append((rr, cc))
        if not pset & set(comp):
            return False
    return True


# ------------------------------------------------------------ error maps


def test_error_map_zero_for_ground_truth(scene):
    _, train, _ = scene
    f = train[0]
    e = egfs.frame_errors(f.grid.gt_coords, f)
    assert np.nanmax(e) < 1e-6


def test_error_map_for_zero_params(scene):
    sc, train, _ = scene
    p = reg.zero_params(32, sc.scene_center, sc.scene_radius, hidden=4, conf_hidden=2)
    (e,), _ = egfs.compute_maps(p, train[:1])
    f = train[0]
    uv = project(sc.scene_center, f.pose_gt, f.intrinsics)
    expect = np.linalg.norm(f.grid.pixels - uv, axis=-1)
    np.testing.assert_allclose(e, expect, atol=1e-9)


def test_error_map_marks_behind_camera(scene):
    _, train, _ = scene
    f = train[0]
    behind = f.pose_gt.apply(np.array([0.0, 0.0, -1.0]))
    coords = np.broadcast_to(behind, f.grid.gt_coords.shape)
    assert np.isnan(egfs.frame_errors(coords, f)).all()


# --------------------------------------------------------------- prompts


def test_uniform_map_picks_first_cells():
    p = egfs.select_prompts(np.ones((10, 10)), 10)
    assert p.tolist() == [[0, c] for c in range(10)]


def test_index_map_picks_lowest():
    p = egfs.select_prompts(np.arange(100.0).reshape(10, 10), 10)
    assert p.tolist() == [[0, c] for c in range(10)]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.5, 100))
def test_prompts_match_sort_oracle(seed, tau):
    rng = np.random.default_rng(seed)
    e = rng.integers(0, 20, (6, 7)).astype(float)  # many ties
    e[rng.random((6, 7)) < 0.2] = np.nan
    cells = [(e[r, c], r, c) for r in range(6) for c in range(7) if np.isfinite(e[r, c])]
    n = int(np.ceil(round(tau * len(cells) / 100, 9)))
    expect = sorted((r, c) for _, r, c in sorted(cells)[:n])
    got = [tuple(x) for x in egfs.select_prompts(e, tau).tolist()]
    assert got == expect
    # quantile property
    if got and len(got) < len(cells):
        chosen = np.zeros(e.shape, bool)
        chosen[tuple(np.array(got).T)] = True
        assert np.nanmax(e[chosen]) <= np.nanmin(np.where(chosen, np.nan, e))


def test_prompt_count_ceil():
    assert egfs.prompt_count(10, 95) == 10
    assert egfs.prompt_count(15, 100) == 15
    assert egfs.prompt_count(100, 7) == 7


def test_no_valid_cells_gives_empty_prompts():
    assert egfs.select_prompts(np.full((3, 3), np.nan), 10).shape == (0, 2)


# ------------------------------------------------------------- expanders


def test_grow_uniform_frame_fills_grid():
    f = toy_frame(np.full((6, 8, 3), 0.4))
    m = egfs.GrowExpander().expand(np.array([[2, 3]]), f)
    assert m.all()


def test_grow_zero_tolerance_keeps_prompts_only():
    app = np.random.default_rng(0).random((6, 8, 3))
    f = toy_frame(app)
    prompts = np.array([[0, 0], [3, 5]])
    m = egfs.GrowExpander(tolerance=0.0).expand(prompts, f)
    assert sorted(zip(*np.nonzero(m))) == [(0, 0), (3, 5)]


def test_grow_respects_edges_and_connectivity(scene):
    _, train, _ = scene
    f = train[0]
    e = np.random.default_rng(1).random(f.grid.shape)
    p = egfs.select_prompts(e, 5)
    m = egfs.GrowExpander().expand(p, f)
    assert m[tuple(p.T)].all()
    assert components_each_hold_a_prompt(m, p)


def test_oracle_expander_returns_surface(scene):
    _, train, _ = scene
    f = train[0]
    g = f.grid
    static = np.argwhere(g.labels == RegionLabel.StaticTextured)
    r, c = static[len(static) // 2]
    m = egfs.OracleExpander().expand(np.array([[r, c]]), f)
    sid = g.surface_ids[r, c]
    assert (g.surface_ids[m] == sid).all()
    # whole surface when it is a single connected piece in view
    expect = egfs.connected_component(g.surface_ids == sid, (r, c))
    np.testing.assert_array_equal(m, expect)


def test_file_expander_reads_pbm(tmp_path):
    region = np.zeros((4, 5), bool)
    region[1:3, 1:4] = True
    region[0, 4] = True
    egfs.write_pbm(tmp_path / "7.pbm", region)
    f = toy_frame(np.zeros((4, 5, 3)), frame_id=7)
    m = egfs.make_expander("file", mask_dir=tmp_path).expand(np.array([[1, 1]]), f)
    expect = region.copy()
    expect[0, 4] = False  # separate component without a prompt
    np.testing.assert_array_equal(m, expect)


def test_file_expander_missing_frame_names_it(tmp_path):
    f = toy_frame(np.zeros((4, 5, 3)), frame_id=12)
    with pytest.raises(egfs.ExpanderError, match="12"):
        egfs.FileExpander(tmp_path).expand(np.array([[0, 0]]), f)


def test_pbm_round_trip(tmp_path):
    m = np.random.default_rng(3).random((30, 40)) < 0.3
    egfs.write_pbm(tmp_path / "a.pbm", m)
    np.testing.assert_array_equal(egfs.read_pbm(tmp_path / "a.pbm"), m)
    # binary variant
    packed = np.packbits(m, axis=1).tobytes()
    (tmp_path / "b.pbm").write_bytes(b"P4\n40 30\n" + packed)
    np.testing.assert_array_equal(egfs.read_pbm(tmp_path / "b.pbm"), m)


def test_unknown_expander():
    with pytest.raises(ValueError):
        egfs.make_expander("sam")


# ------------------------------------------------------------ refinement


def test_refine_uniform_confidence_keeps_mask():
    m = np.random.default_rng(0).random((5, 5)) < 0.5
    np.testing.assert_array_equal(egfs.refine_with_confidence(m, np.full((5, 5), 0.7)), m)


def test_refine_confident_mask_unchanged():
    m = np.zeros((5, 5), bool)
    m[1:3] = True
    np.testing.assert_array_equal(egfs.refine_with_confidence(m, m.astype(float)), m)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_refine_matches_median_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 6)) < 0.5
    c = rng.random((6, 6))
    valid = rng.random((6, 6)) < 0.8
    vals = sorted(c[valid].tolist())
    if not vals:
        return
    n = len(vals)
    med = vals[n // 2] if n % 2 else (vals[n // 2 - 1] + vals[n // 2]) / 2
    expect = m & (c >= med)
    got = egfs.refine_with_confidence(m, c, valid)
    if m.any() and not expect.any():
        expect = m
    np.testing.assert_array_equal(got, expect)
    assert not (got & ~m).any()


# ---------------------------------------------------------------- buffer


def test_full_masks_give_every_cell(scene):
    sc, train, _ = scene
    masks = [np.ones(f.grid.shape, bool) for f in train]
    buf = egfs.build_buffer(train, masks, np.random.default_rng(0), sc.scene_center, sc.scene_radius)
    assert len(buf) == sum(f.grid.labels.size for f in train)


def test_buffer_membership_audit(scene):
    sc, train, _ = scene
    rng = np.random.default_rng(1)
    masks = [rng.random(f.grid.shape) < 0.2 for f in train]
    buf = egfs.build_buffer(train, masks, rng, sc.scene_center, sc.scene_radius)
    by_id = {f.frame_id: (f, m) for f, m in zip(train, masks)}
    for fid, r, c in buf.cells():
        assert by_id[fid][1][r, c]
    assert len(buf) == sum(int(m.sum()) for m in masks)
    # features and pixels line up with the grid cell
    f, _ = by_id[buf.cells()[0][0]]
    _, r, c = buf.cells()[0]
    np.testing.assert_array_equal(buf.features[0], f.grid.features[r, c])
    np.testing.assert_array_equal(buf.pixels[0], f.grid.pixels[r, c])


def test_empty_masks_fall_back_to_all(scene):
    sc, train, _ = scene
    masks = [np.zeros(f.grid.shape, bool) for f in train]
    buf = egfs.build_buffer(train, masks, np.random.default_rng(0), sc.scene_center, sc.scene_radius)
    assert len(buf) == sum(f.grid.labels.size for f in train)


def test_buffer_cap_subsamples(scene):
    sc, train, _ = scene
    buf = egfs.build_buffer(train[:2], None, np.random.default_rng(0), sc.scene_center, sc.scene_radius, cap=500)
    assert len(buf) == 500
    assert len(set(buf.cells())) == 500


def test_quantile_half_on_index_map():
    e = np.arange(100.0).reshape(10, 10)
    (m,) = egfs.quantile_masks([e], 0.5)
    assert m.sum() == 50
    assert m[:5].all() and not m[5:].any()


def test_quantile_ignores_invalid_cells():
    e = np.arange(10.0).reshape(2, 5)
    e[0, 0] = np.nan
    (m,) = egfs.quantile_masks([e], 0.5)
    assert not m[0, 0]


def test_label_share():
    labels = np.array([[RegionLabel.Dynamic, RegionLabel.StaticTextured]], dtype=np.uint8)
    f = toy_frame(np.zeros((1, 2, 3)), labels=labels)
    assert egfs.label_share([f], [np.array([[True, True]])]) == 0.5
    assert egfs.label_share([f], [np.array([[False, False]])]) == 0.0


# -------------------------------------------------------------- training


def tiny_cfg(**kw):
    base = dict(epochs_total=4, epochs_per_iteration=1, hidden=16, conf_hidden=8, batch_size=256, seed=3)
    base.update(kw)
    return reg.TrainConfig(**base)


def test_iteration_count_and_mask_schedule(scene):
    sc, train, _ = scene
    _, hist = egfs.run_training(train[:3], sc.scene_center, sc.scene_radius, tiny_cfg())
    assert [h.iteration for h in hist] == [1, 2, 3, 4]
    assert hist[0].masks is None and hist[0].sampling == "random"
    for h in hist[1:]:
        assert h.sampling == "egfs"
        for p, ex, m in zip(h.prompts, h.expanded, h.masks):
            assert ex[tuple(p.T)].all()
            assert not (m & ~ex).any()
    assert len(hist[0].epochs) == 1


def test_single_iteration_never_masks(scene):
    sc, train, _ = scene
    _, hist = egfs.run_training(train[:3], sc.scene_center, sc.scene_radius, tiny_cfg(epochs_total=2,
                                                                                          epochs_per_iteration=2))
    assert len(hist) == 1 and hist[0].masks is None


def test_quantile_mode(scene):
    sc, train, _ = scene
    _, hist = egfs.run_training(train[:3], sc.scene_center, sc.scene_radius, tiny_cfg(epochs_total=2),
                                mode="quantile", quantile=0.3)
    assert hist[1].sampling == "quantile(0.3)"
    n_valid = sum(int(np.isfinite(e).sum()) for e in hist[1].error_maps)
    assert sum(int(m.sum()) for m in hist[1].masks) == pytest.approx(0.3 * n_valid, abs=3)


def test_masks_deterministic(scene):
    sc, train, _ = scene
    runs = [egfs.run_training(train[:3], sc.scene_center, sc.scene_radius, tiny_cfg(epochs_total=3))[1]
            for _ in range(2)]
    for a, b in zip(runs[0][1:], runs[1][1:]):
        for ma, mb in zip(a.masks, b.masks):
            np.testing.assert_array_equal(ma, mb)


def test_fork_matches_straight_run(scene):
    sc, train, _ = scene
    cfg = tiny_cfg(epochs_total=3)
    t = egfs.Trainer(train[:3], sc.scene_center, sc.scene_radius, cfg)
    t.run_iteration()
    forked = t.fork()
    p1, _ = t.run()
    p2, _ = forked.run()
    assert p1.flat().tobytes() == p2.flat().tobytes()
    with pytest.raises(RuntimeError):
        t.run_iteration()


def test_trainer_rejects_bad_mode(scene):
    sc, train, _ = scene
    with pytest.raises(ValueError):
        egfs.Trainer(train, sc.scene_center, sc.scene_radius, tiny_cfg(), mode="bogus")
    with pytest.raises(ValueError):
        egfs.Trainer(train, sc.scene_center, sc.scene_radius, tiny_cfg(), mode="quantile")


def test_dump_iteration(tmp_path, scene):
    sc, train, _ = scene
    _, hist = egfs.run_training(train[:2], sc.scene_center, sc.scene_radius, tiny_cfg(epochs_total=2))
    egfs.dump_iteration(tmp_path, train[:2], hist[1])
    for f, m in zip(train[:2], hist[1].masks):
        np.testing.assert_array_equal(egfs.read_pbm(tmp_path / "masks" / "iter2" / f"{f.frame_id}.pbm"), m)
    lines = (tmp_path / "prompts_iter2.csv").read_text().splitlines()
    assert lines[0] == "frame_id,row,col,error_px"
    assert len(lines) - 1 == sum(len(p) for p in hist[1].prompts)
