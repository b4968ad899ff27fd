import numpy as np
import pytest

from brwmf import cascade, legendre, model, pressure, rng, spectrum, tree
from brwmf.errors import UsageError
from tests.conftest import LOG2


def brute_count(frame, alpha, epsilon):
    n = frame.depth
    dist = np.linalg.norm(frame.path_sum - n * np.atleast_1d(alpha), axis=1)
    return int(np.count_nonzero(dist <= n * epsilon * (1.0 + spectrum.BALL_SLACK)))


def synthetic(levels, counts, alpha=0.0, epsilon=0.1):
    grid = spectrum.HistogramGrid.for_epsilon([-1.0], [1.0], epsilon)
    key = spectrum._ball_key(alpha, epsilon)
    return [spectrum.LevelHistogram(level=n, grid=grid, counts=np.zeros(grid.shape, dtype=np.int64),
                                    ball_counts={key: c}) for n, c in zip(levels, counts)]


def test_histogram_grid():
    grid = spectrum.HistogramGrid.for_epsilon([-1.0], [1.0], 0.1)
    assert grid.width == 0.05
    assert grid.shape == (40,)
    idx, inside = grid.bin_index(np.array([[-1.0], [0.999], [1.0], [-1.5]]))
    assert list(idx[:, 0][:2]) == [0, 39]
    assert list(inside) == [True, True, False, False]
    with pytest.raises(UsageError):
        spectrum.HistogramGrid.for_epsilon([-1.0], [1.0], 0.0)


def test_histogram_counts_every_node(binary_run):
    grid = spectrum.HistogramGrid.for_epsilon([-1.1], [1.1], 0.1)
    frame = binary_run.frames[-1]
    hist = spectrum.accumulate_histogram(frame, grid)
    assert hist.overflow == 0
    assert hist.total == frame.node_count

    narrow = spectrum.HistogramGrid.for_epsilon([-0.5], [0.5], 0.1)
    hist = spectrum.accumulate_histogram(frame, narrow)
    assert hist.total == frame.node_count
    assert hist.overflow == np.count_nonzero(np.abs(frame.path_sum[:, 0] / 10) >= 0.5)

    with pytest.raises(UsageError):
        spectrum.accumulate_histogram(binary_run.frames[0], grid)


def test_closed_ball_boundary_is_counted(binary_run):
    # S_10 is even, so |S - 2| <= 2 hits the boundary values S = 0 and S = 4
    frame = binary_run.frames[-1]
    grid = spectrum.HistogramGrid.for_epsilon([-1.1], [1.1], 0.2)
    hist = spectrum.accumulate_histogram(frame, grid, balls=[(0.2, 0.2)])
    expected = np.count_nonzero(np.isin(frame.path_sum[:, 0], [0.0, 2.0, 4.0]))
    assert hist.ball_count(0.2, 0.2) == expected == brute_count(frame, 0.2, 0.2)


@pytest.mark.parametrize("alpha, epsilon", [(0.0, 0.05), (0.3, 0.1), (-0.55, 0.25), (0.9, 0.3), (0.0, 2.0)])
def test_exact_ball_counts_binary(binary_run, alpha, epsilon):
    grid = spectrum.HistogramGrid.for_epsilon([-1.0], [1.0], epsilon)
    for frame in binary_run.frames[1:]:
        hist = spectrum.accumulate_histogram(frame, grid, balls=[(alpha, epsilon)])
        assert hist.ball_count(alpha, epsilon) == brute_count(frame, alpha, epsilon)


def test_exact_ball_counts_gaussian_plane(gaussian2):
    run = tree.run_to_depth(gaussian2, 8, rng.stream(6))
    balls = [((0.0, 0.0), 0.1), ((0.3, -0.2), 0.25), ((1.0, 1.0), 0.5)]
    for eps in (0.1, 0.25):
        grid = spectrum.HistogramGrid.for_epsilon([-1.0, -1.0], [1.0, 1.0], eps)
        for frame in run.frames[1:]:
            hist = spectrum.accumulate_histogram(frame, grid, balls=balls)
            for alpha, epsilon in balls:
                assert hist.ball_count(alpha, epsilon) == brute_count(frame, alpha, epsilon)


def test_ball_counts_grow_with_epsilon(gaussian_run):
    frame = gaussian_run.frames[-1]
    counts = [brute_count(frame, 0.0, eps) for eps in (0.05, 0.1, 0.2, 0.4)]
    grid = spectrum.HistogramGrid.for_epsilon([-3.0], [3.0], 0.05)
    balls = [(0.0, eps) for eps in (0.05, 0.1, 0.2, 0.4)]
    hist = spectrum.accumulate_histogram(frame, grid, balls=balls)
    assert [hist.ball_count(a, e) for a, e in balls] == counts
    assert counts == sorted(counts)


def test_unregistered_ball(binary_run):
    grid = spectrum.HistogramGrid.for_epsilon([-1.0], [1.0], 0.1)
    hist = spectrum.accumulate_histogram(binary_run.frames[3], grid)
    with pytest.raises(UsageError):
        hist.ball_count(0.0, 0.1)


def test_histogram_sink_levels(binary):
    grid = spectrum.HistogramGrid.for_epsilon([-1.1], [1.1], 0.1)
    sink = spectrum.HistogramSink(grid, levels=range(3, 6))
    tree.run_to_depth(binary, 8, rng.stream(1), mode=tree.STREAM, sinks=[sink])
    assert [h.level for h in sink.histograms] == [3, 4, 5]


def test_ldp_slope_exact_growth():
    levels = list(range(4, 12))
    fit = spectrum.ldp_slope(synthetic(levels, [2 ** n for n in levels]), 0.0, 0.1, (4, 11))
    assert fit.status == "ok"
    assert fit.slope == pytest.approx(LOG2, abs=1e-12)
    assert fit.levels_used == tuple(levels)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)


def test_ldp_slope_trims_empty_levels():
    levels = [4, 5, 6, 7, 8]
    fit = spectrum.ldp_slope(synthetic(levels, [0, 3 ** 5, 0, 3 ** 7, 3 ** 8]), 0.0, 0.1, (4, 8))
    assert fit.levels_trimmed == (4, 6)
    assert fit.levels_used == (5, 7, 8)
    assert fit.slope == pytest.approx(np.log(3.0), abs=1e-12)


def test_ldp_slope_range_and_statuses():
    levels = [4, 5, 6]
    hists = synthetic(levels, [0, 0, 0])
    assert spectrum.ldp_slope(hists, 0.0, 0.1, (4, 6)).status == "empty_phase"
    hists = synthetic(levels, [0, 5, 0])
    fit = spectrum.ldp_slope(hists, 0.0, 0.1, (4, 6))
    assert fit.status == "insufficient"
    assert np.isnan(fit.slope)
    fit = spectrum.ldp_slope(synthetic(levels, [1, 2, 100]), 0.0, 0.1, (4, 5))
    assert fit.status == "insufficient"
    assert fit.levels_used == (4, 5)
    assert np.isnan(fit.slope) and np.isnan(fit.stderr)
    fit = spectrum.ldp_slope(synthetic(levels, [1, 2, 4]), 0.0, 0.1, (4, 6))
    assert fit.status == "ok"
    assert fit.slope == pytest.approx(np.log(2.0))
    assert np.isfinite(fit.stderr)


@pytest.mark.parametrize("alpha, epsilon, n, expected", [
    (0.0, 0.05, 12, 1),
    (0.0, 0.25, 8, 3),
    (0.0, 0.25, 7, 2),
    (0.5, 0.05, 20, 1),
])
def test_ball_lattice_points_binary(binary, alpha, epsilon, n, expected):
    assert spectrum.ball_lattice_points(binary, alpha, epsilon, n) == expected


def test_ball_lattice_points_discrete(discrete, gaussian):
    assert spectrum.ball_lattice_points(discrete, 0.25, 0.1, 8) == 1
    assert spectrum.ball_lattice_points(discrete, 0.25, 0.5, 8) == 9
    assert spectrum.ball_lattice_points(discrete, 0.25, 0.5, 10) == 10
    assert spectrum.ball_lattice_points(gaussian, 0.0, 0.1, 8) is None


def test_narrow_balls_on_a_lattice_are_flagged(discrete):
    qgrid = pressure.QGrid.from_points([0.0])
    settings = spectrum.SpectrumSettings(depth=8, epsilons=(0.1, 0.5), n_range=(5, 8), paths=3)
    estimate = spectrum.assemble_spectrum(discrete, qgrid, settings, rng.stream(6), rng.stream(6, purpose=rng.PATHS))
    narrow, wide = estimate.points
    assert narrow.fit.status == "ok"
    assert "sparse_lattice" in narrow.flags
    assert "sparse_lattice" not in wide.flags


def test_empty_phase_on_a_tree(binary_run):
    grid = spectrum.HistogramGrid.for_epsilon([-1.5], [1.5], 0.05)
    hists = [spectrum.accumulate_histogram(f, grid, balls=[(1.2, 0.05)]) for f in binary_run.frames[1:]]
    assert spectrum.ldp_slope(hists, 1.2, 0.05, (1, 10)).status == "empty_phase"


def test_local_dimension_uniform_measure(binary_run, line_grid):
    table = cascade.build_cascade(binary_run, line_grid(0.0, 0.5, 3), binary_run.spec)
    paths = cascade.sample_paths(table, 0.0, 5, rng.stream(0, purpose=rng.PATHS))
    local = spectrum.local_dimension(paths, 0.0, binary_run.spec)
    assert local.estimate == pytest.approx(LOG2, abs=1e-12)
    assert local.spread == pytest.approx(0.0, abs=1e-12)
    assert local.target == pytest.approx(LOG2, abs=1e-15)

    paths = cascade.sample_paths(table, 0.5, 5, rng.stream(0, purpose=rng.PATHS))
    local = spectrum.local_dimension(paths, 0.5, binary_run.spec)
    assert local.target == pytest.approx(legendre.conjugate(binary_run.spec, np.tanh(0.5)).value, abs=1e-9)
    assert len(local.ratios) == 5


def test_fit_range_default():
    assert spectrum.SpectrumSettings(depth=20).fit_range() == (12, 20)
    assert spectrum.SpectrumSettings(depth=4).fit_range() == (1, 4)
    assert spectrum.SpectrumSettings(depth=20, n_range=(10, 15)).fit_range() == (10, 15)


def test_assemble_spectrum_small(binary):
    qgrid = pressure.QGrid.from_points([0.0, 0.3])
    settings = spectrum.SpectrumSettings(depth=10, epsilons=(0.25,), n_range=(6, 10), paths=10)
    estimate = spectrum.assemble_spectrum(binary, qgrid, settings, rng.stream(4), rng.stream(4, purpose=rng.PATHS),
                                          alphas=[1.5])
    assert estimate.complete and estimate.deepest_level == 10
    assert len(estimate.points) == 3

    at_zero, at_q, outside = estimate.points
    assert at_zero.analytic == pytest.approx(LOG2, abs=1e-12)
    assert at_q.analytic == pytest.approx(legendre.conjugate(binary, np.tanh(0.3)).value, abs=1e-12)
    assert at_zero.ball_target == pytest.approx(LOG2)
    assert at_zero.fit.status == "ok"
    assert at_zero.local is not None and len(at_zero.local.ratios) == 10
    assert at_zero.ldp_slope <= LOG2 + 0.5

    assert outside.local is None
    assert np.isnan(outside.analytic)
    assert "empty_phase" in outside.flags
    assert any(f.startswith("conjugate_") for f in outside.flags)
    assert any(p is outside for p in estimate.flagged())


def test_assemble_flags_points_outside_calj(gaussian):
    qgrid = pressure.QGrid.from_points([0.0, 2.0])
    settings = spectrum.SpectrumSettings(depth=6, epsilons=(0.2,), paths=5)
    estimate = spectrum.assemble_spectrum(gaussian, qgrid, settings, rng.stream(1), rng.stream(1, purpose=rng.PATHS))
    inside, outside = estimate.points
    assert "outside_calJ" not in inside.flags
    assert "outside_calJ" in outside.flags
    assert outside.fit is None and outside.local is None


def test_assemble_reuses_a_run(binary):
    run = tree.run_to_depth(binary, 8, rng.stream(5))
    qgrid = pressure.QGrid.from_points([0.0])
    settings = spectrum.SpectrumSettings(depth=8, epsilons=(0.25, 0.5), n_range=(4, 8), paths=3)
    estimate = spectrum.assemble_spectrum(binary, qgrid, settings, None, rng.stream(5, purpose=rng.PATHS), run=run)
    assert [p.epsilon for p in estimate.points] == [0.25, 0.5]
    assert estimate.points[0].fit.levels_used[-1] == 8


def test_truncated_run_is_flagged(binary):
    qgrid = pressure.QGrid.from_points([0.0])
    settings = spectrum.SpectrumSettings(depth=10, epsilons=(0.25,), n_range=(2, 10), paths=3, node_budget=200)
    estimate = spectrum.assemble_spectrum(binary, qgrid, settings, rng.stream(2), rng.stream(2, purpose=rng.PATHS))
    assert not estimate.complete
    assert estimate.deepest_level == 7
    assert "truncated_run" in estimate.points[0].flags


@pytest.mark.slow
def test_binary_spectrum_matches_conjugate(binary):
    qgrid = pressure.QGrid.from_points([0.0, np.arctanh(0.5)])
    settings = spectrum.SpectrumSettings(depth=20, epsilons=(0.05,), n_range=(12, 20), paths=50)
    estimate = spectrum.assemble_spectrum(binary, qgrid, settings, rng.stream(17), rng.stream(17, purpose=rng.PATHS))
    for point in estimate.points:
        assert point.fit.status == "ok"
        assert abs(point.ldp_slope - point.analytic) <= 0.1
        assert point.ldp_slope <= np.log(model.mean_offspring(binary)) + 0.05
    assert estimate.growth_violations() == []


@pytest.mark.slow
def test_slopes_grow_with_the_ball_away_from_the_mode(gaussian):
    qgrid = pressure.QGrid.from_points([0.0])
    epsilons = (0.05, 0.1, 0.2)
    settings = spectrum.SpectrumSettings(depth=16, epsilons=epsilons, n_range=(10, 16), paths=3)
    estimate = spectrum.assemble_spectrum(gaussian, qgrid, settings, rng.stream(23), rng.stream(23, purpose=rng.PATHS),
                                          alphas=[0.5])
    fits = [p.fit for p in estimate.points if p.alpha[0] == 0.5]
    assert [f.epsilon for f in fits] == list(epsilons)
    assert all(f.status == "ok" for f in fits)
    for narrow, wide in zip(fits, fits[1:]):
        assert wide.slope >= narrow.slope - 2.0 * max(narrow.stderr, wide.stderr)
