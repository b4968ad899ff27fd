"""
Mandelbrot cascades on a materialized tree.

For a tree of depth n and every q of a grid, the table holds

    Y_{n-k}(u, q) = sum_{v in T_{n-k}(u)} exp(<q|S_n(uv) - S_k(u)> - (n-k) P~(q))

for each node u of level k, built backwards from Y_0 = 1 at the leaves with
the branching recursion

    Y_{j+1}(u, q) = sum_{i <= N_u} exp(<q|X_ui> - P~(q)) Y_j(ui, q).

The truncated Mandelbrot measure gives the cylinder of u the weight

    mu([u]) = exp(<q|S_k(u)> - k P~(q)) Y_{n-k}(u, q),

which is exactly additive over children. Everything is kept in log space.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from brwmf import model
from brwmf.errors import UsageError

log = logging.getLogger(__name__)


def segment_logsumexp(values, offsets):
    """log-sum-exp of consecutive row segments starting at offsets (all non-empty)."""
    peak = np.maximum.reduceat(values, offsets, axis=0)
    counts = np.diff(np.append(offsets, len(values)))
    shifted = np.exp(values - np.repeat(peak, counts, axis=0))
    return peak + np.log(np.add.reduceat(shifted, offsets, axis=0))


@dataclass(frozen=True)
class CascadeTable:
    run: object = field(repr=False)
    qgrid: object = field(repr=False)
    spec: model.ModelSpec = None
    log_p_tilde: np.ndarray = field(default=None, repr=False)
    log_y: list = field(default_factory=list, repr=False)
    bounds: list = field(default_factory=list, repr=False)

    @property
    def depth(self):
        return len(self.log_y) - 1

    def column(self, q):
        q = np.asarray(q, dtype=float).reshape(self.spec.d)
        hits = np.flatnonzero(np.all(np.abs(self.qgrid.points - q) <= 1e-12, axis=1))
        if not len(hits):
            raise UsageError("q=%s is not on the cascade grid" % (q,))
        return int(hits[0])

    def log_root(self):
        """log Y_n(root, q) for every grid q."""
        return self.log_y[0][0]

    def step_log_weights(self, k, j):
        """log of mu([ui]) / mu([u]) for every node of level k+1, grid column j."""
        child = self.run.frames[k + 1]
        q = self.qgrid.points[j]
        return (child.displacement @ q - self.log_p_tilde[j]
                + self.log_y[k + 1][:, j] - self.log_y[k][child.parent_index, j])


def build_cascade(run, qgrid, spec):
    """Backward sweep from the leaves of a materialized run."""
    if not run.materialized:
        raise UsageError("cascades need a materialized run, got a %s run" % run.mode)
    frames = run.frames
    n = len(frames) - 1
    points = qgrid.points
    lp = np.atleast_1d(model.log_mgf(spec, points))

    log_y = [None] * (n + 1)
    log_y[n] = np.zeros((frames[n].node_count, len(points)))
    bounds = [None] * n
    for k in range(n - 1, -1, -1):
        child = frames[k + 1]
        offsets = run.child_offsets(k)
        bounds[k] = np.append(offsets, child.node_count)
        terms = child.displacement @ points.T - lp + log_y[k + 1]
        log_y[k] = segment_logsumexp(terms, offsets)
    for arr in log_y:
        arr.setflags(write=False)

    log.debug("cascade built: depth %d, %d grid points, log Y_n(root) in [%.4g, %.4g]",
              n, len(points), log_y[0].min(), log_y[0].max())
    return CascadeTable(run=run, qgrid=qgrid, spec=spec, log_p_tilde=lp, log_y=log_y, bounds=bounds)


def _max_share_error(parent_index, parents, shares):
    """max |sum of child shares - 1| over parents, columns summed independently."""
    worst = 0.0
    for j in range(shares.shape[1]):
        sums = np.bincount(parent_index, weights=shares[:, j], minlength=parents)
        worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    return worst


def branching_residual(table):
    """Largest relative error of the branching recursion over internal nodes."""
    worst = 0.0
    for k in range(table.depth):
        child = table.run.frames[k + 1]
        shares = np.exp(np.stack([table.step_log_weights(k, j) for j in range(len(table.qgrid))], axis=-1))
        worst = max(worst, _max_share_error(child.parent_index, table.run.frames[k].node_count, shares))
    return worst


@dataclass(frozen=True)
class MeasureWeights:
    table: CascadeTable = field(repr=False)
    level: int = 0
    log_mu: np.ndarray = field(default=None, repr=False)

    def log_total(self):
        return logsumexp(self.log_mu, axis=0)


def measure_weights(table, k):
    if not 0 <= k <= table.depth:
        raise UsageError("level %d outside 0..%d" % (k, table.depth))
    frame = table.run.frames[k]
    log_mu = frame.path_sum @ table.qgrid.points.T - k * table.log_p_tilde + table.log_y[k]
    return MeasureWeights(table=table, level=k, log_mu=log_mu)


def additivity_residual(table):
    """Largest relative error of mu([u]) = sum_i mu([ui]) over internal nodes."""
    worst = 0.0
    parent = measure_weights(table, 0)
    for k in range(table.depth):
        child = measure_weights(table, k + 1)
        frame = table.run.frames[k + 1]
        shares = np.exp(child.log_mu - parent.log_mu[frame.parent_index])
        worst = max(worst, _max_share_error(frame.parent_index, table.run.frames[k].node_count, shares))
        parent = child
    return worst


@dataclass(frozen=True)
class SampledPath:
    q: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    log_mu: np.ndarray = field(repr=False)
    path_sum: np.ndarray = field(repr=False)
    log_y: np.ndarray = field(repr=False)

    @property
    def depth(self):
        return len(self.nodes) - 1


def sample_path(table, q, rng):
    """Draws a mu-typical path: child i of u with probability mu([ui]) / mu([u])."""
    j = table.column(q)
    point = table.qgrid.points[j]
    frames = table.run.frames
    n = table.depth
    nodes = np.zeros(n + 1, dtype=np.int64)
    u = 0
    for k in range(n):
        start, end = table.bounds[k][u], table.bounds[k][u + 1]
        child = frames[k + 1]
        log_w = (child.displacement[start:end] @ point - table.log_p_tilde[j]
                 + table.log_y[k + 1][start:end, j] - table.log_y[k][u, j])
        cum = np.cumsum(np.exp(log_w))
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        u = start + min(i, end - start - 1)
        nodes[k + 1] = u

    levels = np.arange(n + 1)
    path_sum = np.stack([frames[k].path_sum[nodes[k]] for k in levels])
    log_y = np.array([table.log_y[k][nodes[k], j] for k in levels])
    log_mu = path_sum @ point - levels * table.log_p_tilde[j] + log_y
    return SampledPath(q=point, nodes=nodes, log_mu=log_mu, path_sum=path_sum, log_y=log_y)


def sample_paths(table, q, count, rng):
    return [sample_path(table, q, rng) for _ in range(count)]


def log_y_ratio(paths, k):
    """Mean over paths of |log Y_{n-k}(t_|k, q)| / k; tends to 0 with n."""
    if k < 1:
        raise UsageError("prefix level must be >= 1")
    return float(np.mean([abs(p.log_y[k]) / k for p in paths]))


def _leaf_frame(table, level):
    level = table.depth if level is None else level
    if not 1 <= level <= table.depth:
        raise UsageError("level %d outside 1..%d" % (level, table.depth))
    return table.run.frames[level]


def l_n(table, q, lam, level=None):
    """L_n(q, lam) = (1/n) log sum_{u in T_n} exp(<lam|S_n(u)>) mu([u]) with Y_0 = 1 at level n.

    level defaults to the table depth; a shallower level evaluates the
    cascade truncated there.
    """
    frame = _leaf_frame(table, level)
    q = np.asarray(q, dtype=float).reshape(table.spec.d)
    lam = np.asarray(lam, dtype=float).reshape(table.spec.d)
    n = frame.depth
    return float((logsumexp(frame.path_sum @ (q + lam)) - n * model.log_mgf(table.spec, q)) / n)


def log_z_n(table, q, lam, level=None):
    frame = _leaf_frame(table, level)
    q = np.asarray(q, dtype=float).reshape(table.spec.d)
    lam = np.asarray(lam, dtype=float).reshape(table.spec.d)
    return float(logsumexp(frame.path_sum @ (q + lam)) - frame.depth * model.log_mgf(table.spec, q + lam))


def z_n(table, q, lam, level=None):
    """Z_n(q, lam) = sum_{u in T_n} exp(<q+lam|S_n(u)> - n P~(q+lam)) with Y_0 = 1."""
    return float(np.exp(log_z_n(table, q, lam, level)))


@dataclass(frozen=True)
class ConcentrationProfile:
    q: np.ndarray = field(repr=False)
    epsilon: float = 0.0
    levels: np.ndarray = field(default=None, repr=False)
    mass: np.ndarray = field(default=None, repr=False)
    log_mass: np.ndarray = field(default=None, repr=False)

    def rate(self, k=None):
        """(1/k) log of the mass outside the ball at level k (default: deepest)."""
        i = -1 if k is None else int(np.flatnonzero(self.levels == k)[0])
        return float(self.log_mass[i] / self.levels[i])


def concentration_mass(table, q, epsilon):
    """Normalized mu-mass of {u in T_k : |S_k(u)/k - grad P~(q)| >= epsilon}, k = 1..n."""
    j = table.column(q)
    point = table.qgrid.points[j]
    center = model.grad_log_mgf(table.spec, point)
    levels = np.arange(1, table.depth + 1)
    log_mass = np.empty(len(levels))
    for i, k in enumerate(levels):
        frame = table.run.frames[k]
        log_mu = frame.path_sum @ point - k * table.log_p_tilde[j] + table.log_y[k][:, j]
        outside = np.linalg.norm(frame.path_sum / k - center, axis=1) >= epsilon
        if outside.any():
            log_mass[i] = logsumexp(log_mu[outside]) - logsumexp(log_mu)
        else:
            log_mass[i] = -np.inf
    return ConcentrationProfile(q=point, epsilon=float(epsilon), levels=levels,
                                mass=np.exp(log_mass), log_mass=log_mass)


class RootMartingaleSink(object):
    """log Y_k(root, q) = log sum_{u in T_k} exp(<q|S_k(u)>) - k P~(q) for each level handed in."""

    def __init__(self, spec, qgrid):
        self.points = qgrid.points
        self.log_p_tilde = np.atleast_1d(model.log_mgf(spec, self.points))
        self.levels = []
        self.values = []

    def __call__(self, frame):
        sums = logsumexp(frame.path_sum @ self.points.T, axis=0)
        self.levels.append(frame.depth)
        self.values.append(sums - frame.depth * self.log_p_tilde)

    def as_array(self):
        return np.array(self.values)


def root_martingale(frames, qgrid, spec):
    sink = RootMartingaleSink(spec, qgrid)
    for frame in frames:
        sink(frame)
    return sink.as_array()
