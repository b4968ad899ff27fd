"""
Experiment orchestration: one config in, CSV series and a run manifest out.

Analytic work (domains, conjugates) runs once in the calling process. Every
replica grows its own tree on the streams (master_seed, replica, purpose)
and may run in a worker process; replica results are gathered in replica
order, so the CSV bytes never depend on the degree of parallelism.
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat

import numpy as np
from scipy.special import logsumexp

import brwmf
from brwmf import cascade, legendre, model, output, pressure, rng, spectrum, tree
from brwmf.errors import InfeasibleGridError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# log Z_n = n (L_n - P~(q+l) + P~(q)) holds to rounding
Z_IDENTITY_TOL = 1e-9
PEAK_TOL = 1e-9


def _headers(d):
    q = output.coordinate_columns("q", d)
    alpha = output.coordinate_columns("alpha", d)
    return {
        "domains.csv": q + ["in_J", "in_Omega1", "in_calJ", "entropy"] + alpha,
        "conjugates.csv": ["source"] + alpha + output.coordinate_columns("q_star", d)
        + ["value", "residual", "converged", "status"],
        "pressure.csv": ["replica", "n"] + q + ["P_n", "P_tilde", "gap"],
        "martingale.csv": ["replica", "k"] + q + ["log_Y", "increment"],
        "cascade_levels.csv": ["replica", "n"] + q + output.coordinate_columns("lambda", d)
        + ["L_n", "target", "gap"],
        "paths.csv": ["replica"] + q + ["path", "k"] + output.coordinate_columns("s", d)
        + ["log_mu", "log_Y"],
        "concentration.csv": ["replica"] + q + ["epsilon", "level", "log_mass"],
        "spectrum.csv": ["replica"] + alpha + ["epsilon", "slope", "stderr", "local_dim", "local_spread",
                                               "analytic", "ball_target", "n_lo", "n_hi", "status", "flags"],
    }


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_dict(self):
        return dict(name=self.name, passed=self.passed, value=self.value,
                    threshold=self.threshold, detail=self.detail)


def _check(name, value, threshold, passed=None, detail=""):
    value = float(value)
    if passed is None:
        passed = bool(value <= threshold)
    return Check(name=name, passed=bool(passed), value=value, threshold=float(threshold), detail=detail)


def _flag(where, reason, replica=None, point=None):
    entry = dict(where=where, reason=reason)
    if replica is not None:
        entry["replica"] = int(replica)
    if point is not None:
        entry["point"] = [float(x) for x in np.atleast_1d(point)]
    return entry


@dataclass
class ReplicaResult:
    replica: int
    complete: bool = True
    deepest_level: int = 0
    tables: dict = field(default_factory=dict, repr=False)
    checks: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    root_log_y: np.ndarray = field(default=None, repr=False)
    pressure_levels: list = field(default_factory=list, repr=False)
    pressure_gaps: np.ndarray = field(default=None, repr=False)

    def add_row(self, name, row):
        self.tables.setdefault(name, []).append(row)


@dataclass
class RunManifest:
    config_hash: str
    version: str
    kind: str
    model: dict
    seeds: list
    wall_clock: float
    output_dir: str
    outputs: list = field(default_factory=list)
    complete: bool = True
    deepest_level: int = 0
    flagged: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    p_K: float = None

    @property
    def passed(self):
        return self.complete and all(c.passed for c in self.checks)

    def summary(self):
        return dict(passed=sum(1 for c in self.checks if c.passed), total=len(self.checks), ok=self.passed)

    def as_dict(self):
        return dict(
            config_hash=self.config_hash,
            toolkit_version=self.version,
            kind=self.kind,
            model=self.model,
            seeds=self.seeds,
            wall_clock=self.wall_clock,
            output_dir=self.output_dir,
            outputs=self.outputs,
            complete=self.complete,
            deepest_level=self.deepest_level,
            flagged=self.flagged,
            checks=[c.as_dict() for c in self.checks],
            summary=self.summary(),
            p_K=self.p_K,
        )


def _domain_section(config, spec, tables, checks, flagged):
    """Analytic part: domain flags, conjugate duality, the phi slope at p = 1 and p_K."""
    grid = config.qgrid()
    tol = config.tolerances
    scan = pressure.domain_scan(spec, grid, config.gamma_probe)
    for q, in_j, in_omega, in_cal, entropy, alpha in zip(grid.points, scan.in_J, scan.in_Omega1,
                                                         scan.in_calJ, scan.entropy, scan.alpha_image):
        tables.setdefault("domains.csv", []).append(
            list(q) + [bool(in_j), bool(in_omega), bool(in_cal), float(entropy)] + list(alpha))

    alphas = np.asarray(model.grad_log_mgf(spec, grid.points)).reshape(grid.points.shape)
    conjugates = legendre.spectrum_curve(spec, alphas, tol['solver'])
    extra = legendre.spectrum_curve(spec, config.alphas(), tol['solver']) if config.alpha_values else []
    for source, points in (("grid", conjugates), ("alpha", extra)):
        for p in points:
            tables.setdefault("conjugates.csv", []).append(
                [source] + list(p.alpha) + list(p.q_star) + [p.value, p.residual, p.converged, p.status])
            if not p.converged:
                flagged.append(_flag("conjugates", "conjugate_%s" % p.status, point=p.alpha))

    p_tilde = np.atleast_1d(model.log_mgf(spec, grid.points))
    converged = [(q, p, pt) for q, p, pt in zip(grid.points, conjugates, p_tilde) if p.converged]
    duality = max([abs(p.value + float(q @ p.alpha) - pt) for q, p, pt in converged] or [np.inf])
    roundtrip = max([float(np.linalg.norm(p.q_star - q)) for q, p, _ in converged] or [np.inf])
    missing = len(conjugates) - len(converged)
    detail = "%d of %d solves did not converge" % (missing, len(conjugates)) if missing else ""
    checks.append(_check("legendre_duality", duality, tol['duality'], passed=duality <= tol['duality'] and not missing,
                         detail=detail))
    checks.append(_check("gradient_roundtrip", roundtrip, tol['roundtrip'],
                         passed=roundtrip <= tol['roundtrip'] and not missing, detail=detail))

    if spec.family is model.Family.SHIFTED_POISSON_GAUSSIAN:
        radius = pressure.gaussian_j_radius(spec)
        norms = np.linalg.norm(grid.points, axis=1)
        mismatch = scan.in_J != (norms < radius)
        worst = float(np.max(np.abs(norms[mismatch] - radius))) if mismatch.any() else 0.0
        checks.append(_check("j_boundary", worst, grid.cell_size(),
                             detail="%d mismatches against radius %.6g" % (int(mismatch.sum()), radius)))

    inside = grid.points[scan.in_calJ]
    p_k = None
    if len(inside):
        at_one = np.atleast_1d(pressure.phi(spec, 1.0, inside))
        slopes = np.atleast_1d(pressure.phi_slope_at_one(spec, inside))
        worst = float(np.max(slopes))
        checks.append(_check("phi_lemma", worst, 0.0, passed=bool(np.all(at_one == 1.0) and worst < 0.0),
                             detail="max |phi(1, q) - 1| = %.3g" % float(np.max(np.abs(at_one - 1.0)))))
        try:
            p_k = pressure.find_pK(spec, pressure.QGrid(points=inside), resolution=config.p_resolution,
                                   gamma_probe=config.gamma_probe)
        except InfeasibleGridError as e:
            flagged.append(_flag("domains", "p_K: %s" % e))
    else:
        checks.append(_check("phi_lemma", np.nan, 0.0, passed=False, detail="no grid point in calJ"))
    for q in grid.points[~scan.in_calJ]:
        flagged.append(_flag("domains", "outside_calJ", point=q))
    return p_k


def _pressure_section(config, sink, martingale, result):
    for n, q, p_n, p_tilde, gap in sink.rows:
        result.add_row("pressure.csv", [result.replica, n] + list(q) + [p_n, p_tilde, gap])
    result.pressure_levels = sink.levels()
    result.pressure_gaps = np.array([sink.gaps_at(n) for n in result.pressure_levels])

    values = martingale.as_array()
    previous = None
    for k, row in zip(martingale.levels, values):
        for j, q in enumerate(martingale.points):
            increment = None if previous is None else abs(np.exp(row[j]) - np.exp(previous[j]))
            result.add_row("martingale.csv", [result.replica, k] + list(q) + [row[j], increment])
        previous = row
    result.root_log_y = values[-1]


def _cascade_section(config, spec, run, rng_paths, result):
    tol = config.tolerances
    grid = config.cascade_qgrid()
    scan = pressure.domain_scan(spec, grid, config.gamma_probe)
    for q in grid.points[~scan.in_calJ]:
        result.flagged.append(_flag("cascade", "outside_calJ", result.replica, q))
    if not scan.in_calJ.any() or run.deepest_level < 1:
        return
    qgrid = pressure.QGrid(points=grid.points[scan.in_calJ])
    table = cascade.build_cascade(run, qgrid, spec)
    depth = table.depth

    residual = max(cascade.branching_residual(table), cascade.additivity_residual(table))
    result.checks.append(_check("exact_identities", residual, tol['identities'], detail="depth %d" % depth))

    lambdas = config.lambda_qgrid().points
    compare = min(config.compare_depth, depth)
    worst = {}
    z_error = 0.0
    for n in sorted({compare, depth}):
        gaps = []
        for q in qgrid.points:
            p_q = model.log_mgf(spec, q)
            for lam in lambdas:
                value = cascade.l_n(table, q, lam, level=n)
                target = model.log_mgf(spec, q + lam) - p_q
                gaps.append(abs(value - target))
                result.add_row("cascade_levels.csv",
                               [result.replica, n] + list(q) + list(lam) + [value, target, value - target])
                if n == depth:
                    log_z = cascade.log_z_n(table, q, lam)
                    z_error = max(z_error, abs(log_z - n * (value - target)))
        worst[n] = max(gaps)
    result.checks.append(_check("l_n_convergence", worst[depth], tol['l_n'], detail="level %d" % depth))
    if compare < depth:
        change = worst[depth] - worst[compare]
        result.checks.append(_check("l_n_improves", change, 0.0, passed=change < 0.0,
                                    detail="max gap %.4g at level %d, %.4g at level %d"
                                    % (worst[depth], depth, worst[compare], compare)))
    result.checks.append(_check("z_n_identity", z_error, Z_IDENTITY_TOL))

    local_gaps, prefix, margins, rates = [], [], [], []
    for q in qgrid.points:
        paths = cascade.sample_paths(table, q, config.paths, rng_paths)
        for i, path in enumerate(paths):
            for k in range(1, path.depth + 1):
                result.add_row("paths.csv", [result.replica] + list(q) + [i, k] + list(path.path_sum[k] / k)
                               + [path.log_mu[k], path.log_y[k]])
        local = spectrum.local_dimension(paths, q, spec)
        local_gaps.append(abs(local.estimate - local.target))
        prefix.append(cascade.log_y_ratio(paths, compare))

        profile = cascade.concentration_mass(table, q, config.rate_radius)
        for level, log_mass in zip(profile.levels, profile.log_mass):
            result.add_row("concentration.csv", [result.replica] + list(q) + [config.rate_radius, level, log_mass])
        gap, excluded = legendre.rate_gap_points(spec, q, ball_radius=config.rate_radius, tol=tol['solver'])
        for alpha in excluded:
            result.flagged.append(_flag("rate_gap", "sphere point did not converge", result.replica, alpha))
        rates.append(profile.rate())
        margins.append(profile.rate() - (0.5 * gap + tol['concentration']))

    result.checks.append(_check("local_dimension", max(local_gaps), tol['local_dimension'],
                                detail="%d paths per q" % config.paths))
    result.checks.append(_check("prefix_cascade", max(prefix), tol['prefix'], detail="k = %d" % compare))
    value = max(margins)
    result.checks.append(_check("concentration", value, 0.0,
                                passed=value <= 0.0 and all(r < 0.0 for r in rates),
                                detail="radius %g, max rate %.4g" % (config.rate_radius, max(rates))))


def _spectrum_section(config, spec, run, rng_paths, result, local_check):
    tol = config.tolerances
    settings = spectrum.SpectrumSettings(
        depth=config.depth, epsilons=config.epsilons, n_range=config.n_range, paths=config.paths,
        tol=tol['solver'], node_budget=config.node_budget, gamma_probe=config.gamma_probe)
    estimate = spectrum.assemble_spectrum(spec, config.cascade_qgrid(), settings, None, rng_paths,
                                          run=run, alphas=config.alphas())
    for p in estimate.points:
        fit = p.fit
        used = fit.levels_used if fit is not None and fit.levels_used else config.n_range
        status = fit.status if fit is not None else "not_fitted"
        local = p.local
        result.add_row("spectrum.csv", [result.replica] + list(p.alpha) + [
            p.epsilon, p.ldp_slope, fit.stderr if fit is not None else None,
            local.estimate if local is not None else None, local.spread if local is not None else None,
            p.analytic, p.ball_target, min(used), max(used), status, ";".join(p.flags)])
        for reason in p.flags:
            result.flagged.append(_flag("spectrum eps=%g" % p.epsilon, reason, result.replica, p.alpha))

    primary = [p for p in estimate.points if p.epsilon == config.primary_epsilon and p.fit is not None]
    fitted = [p for p in primary if p.fit.status == "ok" and np.isfinite(p.analytic)]
    empty = [p for p in primary if p.fit.status == "empty_phase"]
    unusable = len(primary) - len(fitted) - len(empty)
    errors = [abs(p.ldp_slope - p.analytic) for p in fitted]
    value = max(errors) if errors else 0.0
    empty_ok = all(p.ball_target <= tol['spectrum'] for p in empty)
    result.checks.append(_check(
        "ldp_slope", value, tol['spectrum'], passed=value <= tol['spectrum'] and empty_ok and not unusable,
        detail="eps %g, %d fitted, %d empty phases, %d unusable"
        % (config.primary_epsilon, len(fitted), len(empty), unusable)))

    excess = max([p.ldp_slope - p.analytic for p in fitted] or [-np.inf])
    result.checks.append(_check("spectrum_upper_bound", excess, tol['spectrum']))

    log_mean = np.log(model.mean_offspring(spec))
    slopes = [p.ldp_slope for p in estimate.points if np.isfinite(p.ldp_slope)]
    peak = max([p.analytic for p in estimate.points if np.isfinite(p.analytic)] or [-np.inf])
    over = (max(slopes) if slopes else -np.inf) - log_mean
    # P~* peaks at grad P~(0) with value P~(0); the fitted slopes must peak there too
    mode = np.asarray(model.grad_log_mgf(spec, np.zeros(spec.d)), dtype=float).reshape(spec.d)
    at_mode = legendre.conjugate(spec, mode, tol['solver'])
    ranked = [p for p in primary if p.fit.status == "ok"]
    near = [p.ldp_slope for p in ranked if np.linalg.norm(p.alpha - mode) <= config.primary_epsilon]
    top = max([p.ldp_slope for p in ranked] or [-np.inf])
    located = bool(near) and max(near) >= top - tol['growth']
    result.checks.append(_check(
        "spectrum_agreement", over, tol['growth'],
        passed=(not estimate.growth_violations(tol['growth']) and peak <= log_mean + 1e-12
                and at_mode.converged and abs(at_mode.value - log_mean) <= PEAK_TOL and located),
        detail="log E[N] = %.6g, max analytic %.6g, P~* at grad P~(0) = %.6g, best slope within eps of it %s"
        % (log_mean, peak, at_mode.value, "%.4g of %.4g" % (max(near), top) if near else "missing")))

    both = [p for p in fitted if p.local is not None]
    agreement = max([abs(p.ldp_slope - p.local.estimate) for p in both] or [0.0])
    result.checks.append(_check("estimator_agreement", agreement, tol['agreement'],
                                detail="%d points with both estimates" % len(both)))

    if local_check:
        locals_ = [p.local for p in primary if p.local is not None]
        worst = max([abs(l.estimate - l.target) for l in locals_] or [np.inf])
        result.checks.append(_check("local_dimension", worst, tol['local_dimension'],
                                    detail="%d paths per q" % config.paths))


def run_replica(config, replica):
    """Everything one replica computes; safe to run in a worker process."""
    spec = config.model_spec()
    result = ReplicaResult(replica=replica)
    kind = config.kind
    rng_tree = rng.stream(config.master_seed, replica, rng.TREE)
    rng_paths = rng.stream(config.master_seed, replica, rng.PATHS)

    sinks = []
    pressure_sink = martingale = None
    if kind in ('pressure', 'full'):
        qgrid = config.qgrid()
        pressure_sink = pressure.PressureSink(spec, qgrid)
        martingale = cascade.RootMartingaleSink(spec, qgrid)
        sinks = [pressure_sink, martingale]
    mode = tree.STREAM if kind == 'pressure' else tree.MATERIALIZE
    run = tree.run_to_depth(spec, config.depth, rng_tree, mode=mode, budget=config.node_budget,
                            sinks=sinks, seed=(config.master_seed, replica))
    result.complete = run.complete
    result.deepest_level = run.deepest_level
    if not run.complete:
        result.flagged.append(_flag("tree", "truncated at level %d by the node budget" % run.deepest_level,
                                    replica))

    if pressure_sink is not None:
        _pressure_section(config, pressure_sink, martingale, result)
    if kind in ('cascade', 'full'):
        _cascade_section(config, spec, run, rng_paths, result)
    if kind in ('spectrum', 'full'):
        _spectrum_section(config, spec, run, rng_paths, result, local_check=kind == 'spectrum')
    log.debug("replica %d done: deepest level %d", replica, run.deepest_level)
    return result


def _run_replicas(config):
    if config.parallelism == 1 or config.replicas == 1:
        return [run_replica(config, r) for r in range(config.replicas)]
    chunk = max(1, config.replicas // (4 * config.parallelism))
    with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(run_replica, repeat(config), range(config.replicas), chunksize=chunk))


def pooled_pressure_gaps(results):
    """Levels shared by every replica and the gap of the pooled pressure at each.

    The pooled pressure at level n is (1/n) log of the mean over replicas of
    sum_{u in T_n} exp<q|S_n(u)>, so its gap to P~(q) is (1/n) log of the
    replica mean of Y_n(root, q). One replica gives back P_n - P~.
    """
    depth = min(len(r.pressure_levels) for r in results)
    levels = np.array(results[0].pressure_levels[:depth], dtype=float)
    if not depth:
        return levels, np.empty((0, 0))
    log_y = np.stack([r.pressure_gaps[:depth] for r in results]) * levels[None, :, None]
    return levels, (logsumexp(log_y, axis=0) - np.log(len(results))) / levels[:, None]


def _pressure_checks(config, results):
    tol = config.tolerances
    levels, pooled = pooled_pressure_gaps(results)
    if not len(levels):
        return []
    deepest = int(levels[-1])
    quenched = np.mean([r.pressure_gaps[len(levels) - 1] for r in results], axis=0)
    checks = [_check("pressure_convergence", float(np.max(np.abs(pooled[-1]))), tol['pressure'],
                     detail="level %d, %d replica(s), largest mean gap of P_n %.4g"
                     % (deepest, len(results), float(np.max(np.abs(quenched)))))]
    late = pooled[levels >= config.bound_from_level]
    if late.size:
        checks.append(_check("pressure_upper_bound", float(late.max()), tol['pressure_slack'],
                             detail="levels >= %d" % config.bound_from_level))
    return checks


def _martingale_check(config, results):
    values = np.exp(np.array([r.root_log_y for r in results]))
    mean = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / np.sqrt(len(values))
    score = np.abs(mean - 1.0) / np.where(stderr > 0, stderr, np.inf)
    worst = int(np.argmax(score))
    return _check("martingale_mean", score[worst], config.tolerances['martingale_sigmas'],
                  detail="E Y_%d = %.5g +- %.3g over %d replicas"
                  % (results[0].deepest_level, mean[worst], stderr[worst], len(values)))


def _merge_checks(config, per_replica):
    """One Check per enabled name: passed in every replica, worst value reported."""
    merged = []
    for name in config.checks:
        found = per_replica.get(name, [])
        if not found:
            merged.append(Check(name=name, passed=False, value=float('nan'), threshold=float('nan'),
                                detail="not evaluated"))
            continue
        failing = [(r, c) for r, c in found if not c.passed]
        values = [c.value for _, c in found if np.isfinite(c.value)]
        value = max(values) if values else found[0][1].value
        if failing:
            r, first = failing[0]
            detail = "replica %s: %s" % (r, first.detail) if r is not None else first.detail
        else:
            detail = found[0][1].detail
        merged.append(Check(name=name, passed=not failing, value=value,
                            threshold=found[0][1].threshold, detail=detail))
    return merged


def _write_tables(directory, tables, d):
    headers = _headers(d)
    written = []
    for name in sorted(tables):
        output.write_csv(os.path.join(directory, name), headers[name], tables[name])
        written.append(name)
    return written


def run_experiment(config):
    """Runs the configured kind and persists CSV series plus manifest.json.

    A tree truncated by the node budget still has its partial results
    written; the manifest is then marked incomplete.
    """
    started = time.time()
    spec = config.model_spec()
    log.info("running %s experiment: %s, depth %d, %d replica(s), seed %d",
             config.kind, spec.family.value, config.depth, config.replicas, config.master_seed)

    tables, flagged = {}, []
    per_replica = {}
    p_k = None
    if config.kind in ('domains', 'full'):
        domain_checks = []
        p_k = _domain_section(config, spec, tables, domain_checks, flagged)
        for c in domain_checks:
            per_replica.setdefault(c.name, []).append((None, c))

    complete, deepest = True, 0
    if config.kind != 'domains':
        results = _run_replicas(config)
        for result in results:
            for name, rows in result.tables.items():
                tables.setdefault(name, []).extend(rows)
            for c in result.checks:
                per_replica.setdefault(c.name, []).append((result.replica, c))
            flagged.extend(result.flagged)
        complete = all(r.complete for r in results)
        deepest = min(r.deepest_level for r in results)
        if config.kind in ('pressure', 'full'):
            for c in _pressure_checks(config, results):
                per_replica[c.name] = [(None, c)]
        if 'martingale_mean' in config.checks and len(results) > 1:
            per_replica['martingale_mean'] = [(None, _martingale_check(config, results))]

    outputs = _write_tables(config.output, tables, spec.d)
    manifest = RunManifest(
        config_hash=config.config_hash(),
        version=brwmf.__version__,
        kind=config.kind,
        model=spec.as_dict(),
        seeds=rng.replica_seeds(config.master_seed, config.replicas),
        wall_clock=round(time.time() - started, 3),
        output_dir=config.output,
        outputs=outputs + [MANIFEST],
        complete=complete,
        deepest_level=deepest if config.kind != 'domains' else 0,
        flagged=flagged,
        checks=_merge_checks(config, per_replica),
        p_K=p_k,
    )
    output.write_json(os.path.join(config.output, MANIFEST), manifest.as_dict())

    for c in manifest.checks:
        if not c.passed:
            log.warning("check %s failed: value %.6g, threshold %.6g (%s)", c.name, c.value, c.threshold, c.detail)
    if flagged:
        log.warning("%d flagged point(s) recorded in the manifest", len(flagged))
    summary = manifest.summary()
    log.info("%d/%d checks passed, run %s", summary['passed'], summary['total'],
             "complete" if complete else "incomplete")
    return manifest
