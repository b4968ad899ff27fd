import csv

import numpy as np
import pytest

from brwmf import model, pressure, rng, tree
from brwmf.errors import NodeBudgetExceeded, UsageError


def test_depth_zero_is_the_root(binary):
    run = tree.run_to_depth(binary, 0, rng.stream(0))
    assert len(run.frames) == 1
    assert run.frames[0].node_count == 1
    assert run.complete and run.deepest_level == 0


def test_grow_level_from_the_root(binary):
    frame = tree.grow_level(binary, tree.root_frame(1), rng.stream(3))
    assert frame.depth == 1
    np.testing.assert_array_equal(frame.parent_index, [0, 0])
    np.testing.assert_array_equal(frame.path_sum, frame.displacement)
    assert set(frame.displacement[:, 0]) <= {-1.0, 1.0}


def test_grow_level_budget(binary):
    frame = tree.grow_level(binary, tree.root_frame(1), rng.stream(3))
    with pytest.raises(NodeBudgetExceeded) as e:
        tree.grow_level(binary, frame, rng.stream(3), budget=3)
    assert (e.value.level, e.value.node_count, e.value.budget) == (2, 4, 3)


def test_budget_is_checked_before_displacements_are_drawn(gaussian, monkeypatch):
    def refuse(*args):
        raise AssertionError("displacements drawn past the budget")

    frame = tree.root_frame(1)
    monkeypatch.setattr(model, "sample_displacements", refuse)
    with pytest.raises(NodeBudgetExceeded):
        tree.grow_level(gaussian, frame, rng.stream(8), budget=0)


def test_grow_level_draws_like_sample_generation(gaussian):
    frame = tree.grow_level(gaussian, tree.root_frame(1), rng.stream(9))
    counts, displacements = model.sample_generation(gaussian, 1, rng.stream(9))
    assert frame.node_count == counts[0]
    np.testing.assert_array_equal(frame.displacement, displacements)


def test_binary_levels_double(binary_run):
    assert [f.node_count for f in binary_run.frames] == [2 ** k for k in range(11)]
    np.testing.assert_array_equal(binary_run.child_offsets(3), 2 * np.arange(8))


def test_parent_major_layout(gaussian_run):
    for frame in gaussian_run.frames[1:]:
        assert np.all(np.diff(frame.parent_index) >= 0)
    for k in range(gaussian_run.max_depth):
        offsets = gaussian_run.child_offsets(k)
        assert offsets[0] == 0
        assert np.all(np.diff(offsets) >= 1)


def test_path_sums_telescope(gaussian_run):
    frames = gaussian_run.frames
    n = len(frames) - 1
    for u in (0, frames[n].node_count // 2, frames[n].node_count - 1):
        steps = []
        node = u
        for k in range(n, 0, -1):
            steps.append(frames[k].displacement[node])
            node = frames[k].parent_index[node]
        total = np.zeros(1)
        for x in reversed(steps):
            total = total + x
        np.testing.assert_array_equal(total, frames[n].path_sum[u])


def test_frames_are_read_only(binary_run):
    with pytest.raises(ValueError):
        binary_run.frames[2].path_sum[0, 0] = 5.0


def test_same_seed_same_tree(gaussian):
    a = tree.run_to_depth(gaussian, 6, rng.stream(42))
    b = tree.run_to_depth(gaussian, 6, rng.stream(42))
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.parent_index, fb.parent_index)
        np.testing.assert_array_equal(fa.path_sum, fb.path_sum)


def test_stream_matches_materialize(gaussian, line_grid):
    grid = line_grid(-1.0, 1.0, 5)
    sink_a = pressure.PressureSink(gaussian, grid)
    sink_b = pressure.PressureSink(gaussian, grid)
    full = tree.run_to_depth(gaussian, 7, rng.stream(8), mode=tree.MATERIALIZE, sinks=[sink_a])
    streamed = tree.run_to_depth(gaussian, 7, rng.stream(8), mode=tree.STREAM, sinks=[sink_b])
    assert streamed.frames == []
    np.testing.assert_array_equal(full.frames[-1].path_sum, streamed.last_frame.path_sum)
    assert [r[2] for r in sink_a.rows] == [r[2] for r in sink_b.rows]


def test_stream_run_keeps_only_the_last_level(binary):
    run = tree.run_to_depth(binary, 5, rng.stream(1), mode=tree.STREAM)
    assert run.level(5).node_count == 32
    with pytest.raises(UsageError):
        run.level(2)


def test_sinks_see_every_level(binary):
    seen = []
    tree.run_to_depth(binary, 4, rng.stream(1), sinks=[lambda f: seen.append(f.depth)])
    assert seen == [0, 1, 2, 3, 4]


def test_node_budget_truncates(binary):
    run = tree.run_to_depth(binary, 10, rng.stream(1), budget=100)
    assert not run.complete
    assert run.deepest_level == 6
    assert run.frames[-1].node_count == 64


def test_bad_arguments(binary):
    with pytest.raises(UsageError):
        tree.run_to_depth(binary, -1, rng.stream(1))
    with pytest.raises(UsageError):
        tree.run_to_depth(binary, 2, rng.stream(1), mode="lazy")


def test_mean_generation_size(gaussian):
    # E #T_n = 2^n for N = 1 + Poisson(1)
    n, replicas = 12, 200
    sizes = np.array([tree.run_to_depth(gaussian, n, rng.stream(7, r), mode=tree.STREAM).last_frame.node_count
                      for r in range(replicas)], dtype=float)
    stderr = sizes.std(ddof=1) / np.sqrt(replicas)
    assert abs(sizes.mean() - 2.0 ** n) <= 3 * stderr


def test_write_frames_csv(binary_run, tmp_path):
    path = tmp_path / "frames.csv"
    tree.write_frames_csv(binary_run.frames[:4], str(path))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["level", "node_index", "parent_index", "S"]
    assert len(rows) == 1 + 1 + 2 + 4 + 8
