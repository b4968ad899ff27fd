"""
Multifractal spectrum estimates compared against P~*.

Two independent estimators are computed for every alpha = grad P~(q):

  ldp_slope        OLS slope in n of log #{u in T_n : |S_n(u) - n alpha| <= n eps}
  local_dimension  -log mu_q([t_|n]) / n along mu_q-typical paths, the
                   cylinder [t_|n] having diameter e^-n

Level counts come from per-level histograms of S_n(u)/n with bin width
eps/2. Ball counts are exact: bins entirely inside the ball are summed and
the nodes of partially covered bins (and of the overflow bucket) are tested
one by one while the frame is still available.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from brwmf import cascade, legendre, model, pressure, tree
from brwmf.errors import UsageError

log = logging.getLogger(__name__)

# closed balls: boundary lattice points count
BALL_SLACK = 1e-12
# below this many reachable positions per ball a slope tracks the lattice
MIN_LATTICE_POINTS = 3
BIN_MARGIN = 1e-9


@dataclass(frozen=True)
class HistogramGrid:
    lower: tuple
    upper: tuple
    width: float

    @classmethod
    def for_epsilon(cls, lower, upper, epsilon):
        lower = tuple(float(x) for x in np.atleast_1d(lower))
        upper = tuple(float(x) for x in np.atleast_1d(upper))
        if epsilon <= 0:
            raise UsageError("epsilon must be > 0")
        return cls(lower=lower, upper=upper, width=0.5 * float(epsilon))

    @property
    def d(self):
        return len(self.lower)

    @property
    def shape(self):
        span = np.asarray(self.upper) - np.asarray(self.lower)
        return tuple(int(b) for b in np.maximum(np.ceil(span / self.width - 1e-9), 1))

    def bin_index(self, x):
        idx = np.floor((x - np.asarray(self.lower)) / self.width).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        return idx, inside

    def bin_corners(self):
        """Lower and upper corner of every bin, shape (*shape, d)."""
        ind = np.moveaxis(np.indices(self.shape), 0, -1)
        lo = np.asarray(self.lower) + ind * self.width
        return lo, lo + self.width


def _ball_key(alpha, epsilon):
    return tuple(float(a) for a in np.atleast_1d(alpha)), float(epsilon)


@dataclass(frozen=True)
class LevelHistogram:
    level: int
    grid: HistogramGrid
    counts: np.ndarray = field(repr=False)
    overflow: int = 0
    ball_counts: dict = field(default_factory=dict, repr=False)

    @property
    def total(self):
        return int(self.counts.sum()) + self.overflow

    def ball_count(self, alpha, epsilon):
        key = _ball_key(alpha, epsilon)
        if key not in self.ball_counts:
            raise UsageError("ball %s was not registered when level %d was accumulated" % (key, self.level))
        return self.ball_counts[key]


def _exact_ball_count(frame, grid, counts, idx, inside, alpha, epsilon):
    alpha = np.asarray(alpha, dtype=float).reshape(grid.d)
    lo, hi = grid.bin_corners()
    far = np.sqrt(np.sum(np.maximum(np.abs(lo - alpha), np.abs(hi - alpha)) ** 2, axis=-1))
    near = np.sqrt(np.sum(np.maximum(np.maximum(lo - alpha, alpha - hi), 0.0) ** 2, axis=-1))
    full = far <= epsilon * (1.0 - BIN_MARGIN)
    partial = (near <= epsilon * (1.0 + BIN_MARGIN)) & ~full

    retest = ~inside
    retest[inside] = partial[tuple(idx[inside].T)]
    n = frame.depth
    dist = np.linalg.norm(frame.path_sum[retest] - n * alpha, axis=1)
    exact = int(np.count_nonzero(dist <= n * epsilon * (1.0 + BALL_SLACK)))
    return int(counts[full].sum()) + exact


def accumulate_histogram(frame, grid, balls=()):
    """Histogram of S_n(u)/n over one level in a single pass.

    Nodes outside the box go to the overflow bucket. balls lists (alpha,
    epsilon) pairs whose exact counts are taken while the frame is at hand.
    """
    if frame.depth < 1:
        raise UsageError("histograms start at level 1")
    x = frame.path_sum / frame.depth
    idx, inside = grid.bin_index(x)
    flat = np.ravel_multi_index(tuple(idx[inside].T), grid.shape)
    counts = np.bincount(flat, minlength=int(np.prod(grid.shape))).reshape(grid.shape)
    overflow = int(np.count_nonzero(~inside))
    if overflow:
        log.debug("level %d: %d nodes outside the alpha box", frame.depth, overflow)

    ball_counts = {}
    for alpha, epsilon in balls:
        ball_counts[_ball_key(alpha, epsilon)] = _exact_ball_count(
            frame, grid, counts, idx, inside, alpha, epsilon)
    return LevelHistogram(level=frame.depth, grid=grid, counts=counts, overflow=overflow,
                          ball_counts=ball_counts)


class HistogramSink(object):
    def __init__(self, grid, balls=(), levels=None):
        self.grid = grid
        self.balls = list(balls)
        self.levels = levels
        self.histograms = []

    def __call__(self, frame):
        if frame.depth < 1:
            return
        if self.levels is not None and frame.depth not in self.levels:
            return
        self.histograms.append(accumulate_histogram(frame, self.grid, self.balls))


@dataclass(frozen=True)
class SlopeFit:
    alpha: tuple
    epsilon: float
    slope: float = np.nan
    stderr: float = np.nan
    intercept: float = np.nan
    levels_used: tuple = ()
    levels_trimmed: tuple = ()
    status: str = "ok"


def ldp_slope(histograms, alpha, epsilon, n_range):
    """OLS of log N_n(alpha, eps) against n over n_range (inclusive).

    Levels with an empty ball are trimmed and reported. No level at all
    gives the "empty_phase" status, the count analogue of a negative
    P~*(alpha); fewer than three levels give "insufficient".
    """
    lo, hi = n_range
    key = _ball_key(alpha, epsilon)
    levels, counts = [], []
    for h in histograms:
        if lo <= h.level <= hi:
            levels.append(h.level)
            counts.append(h.ball_count(alpha, epsilon))
    levels = np.asarray(levels)
    counts = np.asarray(counts)
    used = counts > 0
    trimmed = tuple(int(n) for n in levels[~used])

    if not used.any():
        return SlopeFit(alpha=key[0], epsilon=key[1], levels_trimmed=trimmed, status="empty_phase")
    if used.sum() < 3:
        return SlopeFit(alpha=key[0], epsilon=key[1], levels_used=tuple(int(n) for n in levels[used]),
                        levels_trimmed=trimmed, status="insufficient")
    if trimmed:
        log.info("alpha=%s eps=%g: empty levels %s trimmed from the fit", key[0], epsilon, trimmed)

    fit = linregress(levels[used].astype(float), np.log(counts[used]))
    return SlopeFit(alpha=key[0], epsilon=key[1], slope=float(fit.slope), stderr=float(fit.stderr),
                    intercept=float(fit.intercept), levels_used=tuple(int(n) for n in levels[used]),
                    levels_trimmed=trimmed)


def ball_lattice_points(spec, alpha, epsilon, n):
    """Reachable positions of S_n inside the closed ball B(n alpha, n eps).

    None when the law has no lattice. Slopes fitted on balls holding only
    one or two positions follow the lattice, not the spectrum.
    """
    lat = model.lattice(spec)
    if lat is None:
        return None
    offset, step = lat
    centre = n * float(np.asarray(alpha, dtype=float).reshape(-1)[0])
    radius = n * epsilon * (1.0 + BALL_SLACK)
    first = np.ceil((centre - radius - n * offset) / step)
    last = np.floor((centre + radius - n * offset) / step)
    return max(0, int(last - first) + 1)


@dataclass(frozen=True)
class LocalDimension:
    estimate: float
    spread: float
    target: float
    ratios: np.ndarray = field(repr=False)


def local_dimension(paths, q, spec):
    """Mean and spread of -log mu([t_|n]) / n; log diam [t_|n] = -n exactly."""
    ratios = np.array([-p.log_mu[-1] / p.depth for p in paths])
    q = np.asarray(q, dtype=float).reshape(spec.d)
    target = model.log_mgf(spec, q) - float(q @ model.grad_log_mgf(spec, q))
    spread = float(ratios.std(ddof=1)) if len(ratios) > 1 else 0.0
    return LocalDimension(estimate=float(ratios.mean()), spread=spread, target=float(target), ratios=ratios)


@dataclass(frozen=True)
class SpectrumSettings:
    depth: int
    epsilons: tuple = (0.05,)
    n_range: tuple = None
    paths: int = 100
    alpha_lower: tuple = None
    alpha_upper: tuple = None
    tol: float = legendre.DEFAULT_TOL
    node_budget: int = tree.DEFAULT_NODE_BUDGET
    gamma_probe: tuple = pressure.DEFAULT_GAMMA_PROBE

    def fit_range(self):
        if self.n_range is not None:
            return tuple(self.n_range)
        return (max(1, self.depth - 8), self.depth)


@dataclass(frozen=True)
class SpectrumPoint:
    q: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    epsilon: float = 0.0
    fit: SlopeFit = None
    local: LocalDimension = None
    analytic: float = np.nan
    ball_target: float = np.nan
    flags: tuple = ()

    @property
    def ldp_slope(self):
        return self.fit.slope if self.fit is not None else np.nan

    @property
    def local_dim(self):
        return self.local.estimate if self.local is not None else np.nan


@dataclass(frozen=True)
class SpectrumEstimate:
    spec: model.ModelSpec
    points: list = field(default_factory=list, repr=False)
    complete: bool = True
    deepest_level: int = 0

    def growth_violations(self, slack=0.05):
        """Points whose slope exceeds the total growth rate log E[N] + slack."""
        ceiling = np.log(model.mean_offspring(self.spec)) + slack
        return [p for p in self.points if np.isfinite(p.ldp_slope) and p.ldp_slope > ceiling]

    def flagged(self):
        return [p for p in self.points if p.flags]


def _default_box(alphas, epsilons):
    reach = 4.0 * max(epsilons)
    return tuple(np.min(alphas, axis=0) - reach), tuple(np.max(alphas, axis=0) + reach)


def assemble_spectrum(spec, qgrid, settings, rng_tree, rng_paths, run=None, alphas=()):
    """Three-way comparison ldp slope / local dimension / P~* at alpha = grad P~(q).

    Extra alphas, given directly, get the slope fit and the analytic values
    but no local dimension. Grid points outside calJ, non-converged
    conjugates and empty phases are flagged on their SpectrumPoint; assembly
    always runs to the end.
    """
    scan = pressure.domain_scan(spec, qgrid, settings.gamma_probe)
    grid_alphas = np.asarray(model.grad_log_mgf(spec, qgrid.points)).reshape(qgrid.points.shape)
    extra = np.asarray(alphas, dtype=float).reshape(-1, spec.d)
    n_range = settings.fit_range()

    # (q, alpha, fit the slope, sample paths)
    targets = [(q, a, bool(ok), bool(ok)) for q, a, ok in zip(qgrid.points, grid_alphas, scan.in_calJ)]
    targets.extend((None, a, True, False) for a in extra)
    fitted = np.array([a for _, a, fit, _ in targets if fit]).reshape(-1, spec.d)

    lower, upper = settings.alpha_lower, settings.alpha_upper
    if lower is None or upper is None:
        box = fitted if len(fitted) else grid_alphas
        lower, upper = _default_box(box, settings.epsilons)
    sinks = {}
    for eps in settings.epsilons:
        grid = HistogramGrid.for_epsilon(lower, upper, eps)
        sinks[eps] = HistogramSink(grid, [(a, eps) for a in fitted],
                                   levels=range(n_range[0], n_range[1] + 1))

    if run is None:
        run = tree.run_to_depth(spec, settings.depth, rng_tree, mode=tree.MATERIALIZE,
                                budget=settings.node_budget, sinks=list(sinks.values()))
    else:
        for frame in run.frames:
            for sink in sinks.values():
                sink(frame)

    table = None
    if scan.in_calJ.any() and run.deepest_level >= 1:
        table = cascade.build_cascade(run, pressure.QGrid(points=qgrid.points[scan.in_calJ]), spec)

    points = []
    for q, alpha, fit_slope, with_paths in targets:
        conj = legendre.conjugate(spec, alpha, settings.tol)
        flags = []
        if q is not None and not with_paths:
            flags.append("outside_calJ")
        if not conj.converged:
            flags.append("conjugate_%s" % conj.status)
        if not run.complete:
            flags.append("truncated_run")
        local = None
        if with_paths and table is not None:
            paths = cascade.sample_paths(table, q, settings.paths, rng_paths)
            local = local_dimension(paths, q, spec)
        if q is None:
            q = conj.q_star if conj.converged else np.full(spec.d, np.nan)
        for eps in settings.epsilons:
            fit = ldp_slope(sinks[eps].histograms, alpha, eps, n_range) if fit_slope else None
            point_flags = list(flags)
            if fit is not None and fit.status != "ok":
                point_flags.append(fit.status)
            if fit is not None and fit.levels_used:
                reachable = [ball_lattice_points(spec, alpha, eps, n) for n in fit.levels_used]
                if reachable[0] is not None and min(reachable) < MIN_LATTICE_POINTS:
                    point_flags.append("sparse_lattice")
            points.append(SpectrumPoint(
                q=q, alpha=alpha, epsilon=float(eps), fit=fit, local=local,
                analytic=conj.value if conj.converged else np.nan,
                ball_target=legendre.ball_supremum(spec, alpha, eps, tol=settings.tol),
                flags=tuple(point_flags)))

    estimate = SpectrumEstimate(spec=spec, points=points, complete=run.complete,
                                deepest_level=run.deepest_level)
    for p in estimate.flagged():
        log.warning("spectrum point alpha=%s eps=%g flagged: %s", p.alpha, p.epsilon, ", ".join(p.flags))
    return estimate
