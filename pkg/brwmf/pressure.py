"""
Pressure functions and the parameter domains J, Omega^1 and calJ.

  empirical_pressure   P_n(q) = (1/n) log sum_{u in T_n} exp<q|S_n(u)>
  phi                  phi(p, q) = exp(P~(pq) - p P~(q))
  domain_scan          J, Omega^1, calJ = J & Omega^1 and I = grad P~(calJ) on a grid
  find_pK              largest p in (1, 2] with max_K phi(p, .) < 1
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from brwmf import model
from brwmf.errors import ConfigurationError, InfeasibleGridError, UsageError

log = logging.getLogger(__name__)

DEFAULT_GAMMA_PROBE = (1.5, 2.0)


@dataclass(frozen=True)
class QGrid:
    points: np.ndarray = field(repr=False)
    lower: tuple = ()
    upper: tuple = ()
    resolution: tuple = ()

    @classmethod
    def box(cls, lower, upper, resolution):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        resolution = np.broadcast_to(np.atleast_1d(resolution), lower.shape).astype(int)
        if lower.shape != upper.shape:
            raise ConfigurationError("q_grid", "lower and upper need the same number of coordinates")
        if np.any(upper < lower):
            raise ConfigurationError("q_grid.upper", "upper bound below lower bound")
        if np.any(resolution < 1):
            raise ConfigurationError("q_grid.points", "every axis needs at least one point")
        axes = [np.linspace(lo, hi, r) for lo, hi, r in zip(lower, upper, resolution)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=-1)
        return cls(points=points, lower=tuple(lower), upper=tuple(upper),
                   resolution=tuple(int(r) for r in resolution)).validate()

    @classmethod
    def from_points(cls, points, d=None):
        points = np.asarray(points, dtype=float)
        if points.ndim == 0:
            points = points.reshape(1, 1)
        elif points.ndim == 1:
            points = points[:, None] if d in (None, 1) else points[None, :]
        return cls(points=points).validate()

    def validate(self):
        if len(self.points) == 0:
            raise ConfigurationError("q_grid", "grid is empty")
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("q_grid", "grid points must be finite")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ConfigurationError("q_grid", "grid points must be pairwise distinct")
        return self

    @property
    def d(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)

    @property
    def spacing(self):
        """Lattice step per axis; 0 on single-point axes or for point lists."""
        if not self.resolution:
            return np.zeros(self.d)
        res = np.asarray(self.resolution)
        span = np.asarray(self.upper) - np.asarray(self.lower)
        return np.where(res > 1, span / np.maximum(res - 1, 1), 0.0)

    def cell_size(self):
        return float(np.linalg.norm(self.spacing))


@dataclass(frozen=True)
class DomainScan:
    grid: QGrid
    in_J: np.ndarray = field(repr=False)
    in_Omega1: np.ndarray = field(repr=False)
    in_calJ: np.ndarray = field(repr=False)
    entropy: np.ndarray = field(repr=False)
    alpha_image: np.ndarray = field(repr=False)


def empirical_pressure(frame, q):
    """P_n(q) at the frame's level, as a float or one value per row of q.

    A flat array of values is a batch of points when d = 1, as in log_mgf.
    """
    if frame.depth < 1:
        raise UsageError("empirical pressure needs a level n >= 1")
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = np.full(frame.d, float(q))
    elif frame.d == 1 and q.shape[-1] != 1:
        q = q[..., None]
    if q.shape[-1] != frame.d or q.ndim > 2:
        raise UsageError("expected %d coordinates, got shape %s" % (frame.d, q.shape))
    if q.ndim == 1:
        return float(logsumexp(frame.path_sum @ q) / frame.depth)
    return np.array([logsumexp(frame.path_sum @ row) / frame.depth for row in q])


class PressureSink(object):
    """Collects (n, q, P_n, P~, gap) rows from every level it is handed."""

    def __init__(self, spec, qgrid):
        self.spec = spec
        self.qgrid = qgrid
        self.analytic = model.log_mgf(spec, qgrid.points)
        self.rows = []

    def __call__(self, frame):
        if frame.depth < 1:
            return
        values = empirical_pressure(frame, self.qgrid.points)
        for q, p_n, p_tilde in zip(self.qgrid.points, values, self.analytic):
            self.rows.append((frame.depth, q, float(p_n), float(p_tilde), float(p_n - p_tilde)))

    def levels(self):
        return sorted(set(row[0] for row in self.rows))

    def gaps_at(self, n):
        return np.array([row[4] for row in self.rows if row[0] == n])


def pressure_trajectory(frames, qgrid, spec):
    sink = PressureSink(spec, qgrid)
    for frame in frames:
        sink(frame)
    return sink.rows


def phi(spec, p, q):
    if p < 1.0:
        raise ConfigurationError("p", "phi is defined for p >= 1, got %r" % (p,))
    q = np.asarray(q, dtype=float)
    value = np.exp(model.log_mgf(spec, p * q) - p * np.asarray(model.log_mgf(spec, q)))
    return float(value) if np.ndim(value) == 0 else value


def phi_slope_at_one(spec, q, step=1e-4):
    """Forward difference of phi in p at 1+; negative exactly on J."""
    return (np.asarray(phi(spec, 1.0 + step, q)) - np.asarray(phi(spec, 1.0, q))) / step


def max_phi(spec, p, grid):
    return float(np.max(phi(spec, p, grid.points)))


def domain_scan(spec, grid, gamma_probe=DEFAULT_GAMMA_PROBE):
    """Classifies every grid point against J, Omega^1 and calJ.

    Omega^1 is an interior: a point belongs to it when the moment condition
    holds, for one of the probed gammas, at the point and at its lattice
    neighbours on every axis.
    """
    points = grid.points
    grad = np.asarray(model.grad_log_mgf(spec, points)).reshape(points.shape)
    entropy = np.asarray(model.log_mgf(spec, points)) - np.sum(points * grad, axis=-1)
    in_J = entropy > 0.0

    step = np.where(grid.spacing > 0, grid.spacing, 1e-6)
    probes = [points]
    for axis in range(grid.d):
        shift = np.zeros(grid.d)
        shift[axis] = step[axis]
        probes.extend([points - shift, points + shift])

    in_omega = np.zeros(len(points), dtype=bool)
    for gamma in gamma_probe:
        ok = np.ones(len(points), dtype=bool)
        for probe in probes:
            ok &= np.asarray(model.moment_gamma_finite(spec, probe, gamma), dtype=bool)
        in_omega |= ok

    in_calJ = in_J & in_omega
    alpha_image = np.where(in_calJ[:, None], grad, np.nan)
    return DomainScan(grid=grid, in_J=in_J, in_Omega1=in_omega, in_calJ=in_calJ,
                      entropy=entropy, alpha_image=alpha_image)


def find_pK(spec, grid, resolution=1e-3, cap=2.0, gamma_probe=DEFAULT_GAMMA_PROBE):
    """Largest p on the lattice 1 + k*resolution, up to cap, with max_K phi(p, .) < 1.

    log phi(., q) is convex with value 0 at p = 1, so the feasible p form an
    interval starting at 1 and bisection over the lattice is exact.
    """
    scan = domain_scan(spec, grid, gamma_probe)
    outside = int(np.count_nonzero(~scan.in_calJ))
    if outside:
        raise InfeasibleGridError("%d of %d grid points lie outside calJ" % (outside, len(grid)))

    def feasible(k):
        return max_phi(spec, 1.0 + k * resolution, grid) < 1.0

    top = int(round((cap - 1.0) / resolution))
    if feasible(top):
        return float(cap)
    if not feasible(1):
        raise InfeasibleGridError(
            "no p in (1, %g] keeps max phi below 1; the grid touches the boundary of calJ"
            % (1.0 + resolution))
    lo, hi = 1, top
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    p = round(1.0 + lo * resolution, 12)
    log.debug("p_K = %g (max phi %.6g)", p, max_phi(spec, p, grid))
    return p


def gaussian_j_radius(spec):
    """Radius of J for ShiftedPoissonGaussian: P~ - <q|grad P~> = log(1+lambda) - sigma^2 |q|^2 / 2."""
    if spec.family is not model.Family.SHIFTED_POISSON_GAUSSIAN:
        raise UsageError("closed-form J radius is only known for ShiftedPoissonGaussian")
    return float(np.sqrt(2.0 * np.log1p(spec.rate)) / spec.sigma)
