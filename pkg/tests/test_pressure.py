import numpy as np
import pytest

from brwmf import model, pressure, rng, tree
from brwmf.errors import ConfigurationError, InfeasibleGridError, UsageError
from tests.conftest import LOG2


def test_pressure_at_zero_counts_nodes(gaussian_run):
    frame = gaussian_run.frames[-1]
    assert pressure.empirical_pressure(frame, 0.0) == pytest.approx(np.log(frame.node_count) / frame.depth,
                                                                    rel=1e-15)


def test_pressure_needs_a_level(binary_run):
    with pytest.raises(UsageError):
        pressure.empirical_pressure(binary_run.frames[0], 0.5)


def test_binary_pressure_is_symmetric_in_law(binary_run, line_grid):
    values = pressure.empirical_pressure(binary_run.frames[-1], line_grid(-1.0, 1.0, 5).points)
    assert values.shape == (5,)
    assert values[2] == pytest.approx(LOG2, abs=1e-14)


def test_flat_q_batch_on_the_line(gaussian_run):
    frame = gaussian_run.frames[-1]
    values = pressure.empirical_pressure(frame, np.array([-1.0, 0.0, 1.0]))
    assert values.shape == (3,)
    for q, value in zip((-1.0, 0.0, 1.0), values):
        assert value == pytest.approx(pressure.empirical_pressure(frame, q), abs=1e-15)
    assert isinstance(pressure.empirical_pressure(frame, np.array([0.5])), float)


def test_q_with_the_wrong_dimension(gaussian_run):
    with pytest.raises(UsageError):
        pressure.empirical_pressure(gaussian_run.frames[-1], np.zeros((2, 3)))
    run = tree.run_to_depth(model.ModelSpec.binary_rademacher(d=2), 3, rng.stream(0))
    with pytest.raises(UsageError):
        pressure.empirical_pressure(run.frames[-1], [0.1, 0.2, 0.3])


def test_trajectory_rows(binary_run, line_grid):
    grid = line_grid(-0.5, 0.5, 3)
    rows = pressure.pressure_trajectory(binary_run.frames, grid, binary_run.spec)
    assert len(rows) == 10 * 3
    n, q, p_n, p_tilde, gap = rows[-1]
    assert n == 10
    assert gap == pytest.approx(p_n - p_tilde)


def test_pressure_below_analytic_bound(binary, line_grid):
    grid = line_grid(-0.5, 0.5, 11)
    sink = pressure.PressureSink(binary, grid)
    tree.run_to_depth(binary, 16, rng.stream(21), mode=tree.STREAM, sinks=[sink])
    assert sink.levels() == list(range(1, 17))
    for n in (15, 16):
        assert sink.gaps_at(n).max() <= 0.1


def test_phi_at_one_is_one(gaussian2):
    points = np.array([[0.1, 0.2], [0.5, -0.3]])
    np.testing.assert_array_equal(pressure.phi(gaussian2, 1.0, points), 1.0)
    with pytest.raises(ConfigurationError):
        pressure.phi(gaussian2, 0.5, points)


def test_log_phi_is_convex_in_p(discrete):
    ps = np.linspace(1.0, 2.0, 21)
    values = np.log([pressure.phi(discrete, p, 0.4) for p in ps])
    assert np.all(np.diff(values, 2) >= -1e-12)


def test_phi_slope_sign_follows_j(gaussian):
    radius = pressure.gaussian_j_radius(gaussian)
    assert pressure.phi_slope_at_one(gaussian, 0.5 * radius) < 0
    assert pressure.phi_slope_at_one(gaussian, 1.5 * radius) > 0


def test_gaussian_j_radius(gaussian, binary):
    assert pressure.gaussian_j_radius(gaussian) == pytest.approx(np.sqrt(2 * LOG2), abs=1e-15)
    with pytest.raises(UsageError):
        pressure.gaussian_j_radius(binary)


def test_domain_scan_gaussian_disc(gaussian2):
    grid = pressure.QGrid.box([-2.0, -2.0], [2.0, 2.0], [41, 41])
    scan = pressure.domain_scan(gaussian2, grid)
    radius = pressure.gaussian_j_radius(gaussian2)
    norms = np.linalg.norm(grid.points, axis=1)
    np.testing.assert_array_equal(scan.in_J, norms < radius)
    assert scan.in_Omega1.all()
    np.testing.assert_array_equal(scan.in_calJ, scan.in_J)
    assert np.isnan(scan.alpha_image[~scan.in_calJ]).all()
    origin = int(np.argmin(norms))
    assert scan.entropy[origin] == pytest.approx(LOG2, abs=1e-15)


def test_domain_scan_binary_all_inside(binary, line_grid):
    scan = pressure.domain_scan(binary, line_grid(-1.0, 1.0, 21))
    assert scan.in_calJ.all()


def test_find_pk_binary_reaches_cap(binary, line_grid):
    assert pressure.find_pK(binary, line_grid(-1.0, 1.0, 21)) == 2.0


def test_find_pk_gaussian(gaussian, line_grid):
    # phi(p, q) < 1 iff (p - 1)(p q^2 / 2 - log 2) < 0, so p_K = 2 log 2 on |q| <= 1
    grid = line_grid(-1.0, 1.0, 21)
    p_k = pressure.find_pK(gaussian, grid, resolution=1e-3)
    assert p_k == pytest.approx(1.386, abs=1e-9)
    assert pressure.max_phi(gaussian, p_k, grid) < 1.0
    assert pressure.max_phi(gaussian, p_k + 1e-3, grid) >= 1.0


def test_find_pk_rejects_points_outside(gaussian, line_grid):
    with pytest.raises(InfeasibleGridError):
        pressure.find_pK(gaussian, line_grid(-2.0, 2.0, 21))


def test_qgrid_validation():
    with pytest.raises(ConfigurationError):
        pressure.QGrid.from_points([[0.0], [0.0]])
    with pytest.raises(ConfigurationError):
        pressure.QGrid.box([1.0], [0.0], [3])
    grid = pressure.QGrid.box([-1.0, 0.0], [1.0, 1.0], [5, 3])
    assert len(grid) == 15
    np.testing.assert_allclose(grid.spacing, [0.5, 0.5])
    assert grid.cell_size() == pytest.approx(np.sqrt(0.5))
    assert pressure.QGrid.from_points([0.1, 0.2]).d == 1


def test_analytic_pressure_matches_model(gaussian, line_grid):
    grid = line_grid(-1.0, 1.0, 3)
    sink = pressure.PressureSink(gaussian, grid)
    np.testing.assert_allclose(sink.analytic, model.log_mgf(gaussian, grid.points))


def test_pressure_ignores_node_order(gaussian_run):
    frame = gaussian_run.frames[-1]
    order = np.random.default_rng(0).permutation(frame.node_count)
    shuffled = tree.LevelFrame(depth=frame.depth, parent_index=frame.parent_index[order],
                               path_sum=frame.path_sum[order], displacement=frame.displacement[order])
    for q in (-1.0, 0.3, 2.0):
        assert pressure.empirical_pressure(shuffled, q) == pytest.approx(
            pressure.empirical_pressure(frame, q), abs=1e-12)


def test_phi_closed_form(binary):
    expected = np.exp(model.log_mgf(binary, 1.0) - 2 * model.log_mgf(binary, 0.5))
    assert pressure.phi(binary, 2.0, 0.5) == pytest.approx(expected, rel=1e-14)
    assert pressure.phi(binary, 2.0, 0.5) == pytest.approx(0.6068, abs=1e-4)
    assert pressure.phi(binary, 1.5, 0.0) == pytest.approx(2.0 ** -0.5, rel=1e-14)


def test_find_pk_single_point(binary):
    assert pressure.find_pK(binary, pressure.QGrid.from_points([0.0])) == 2.0
