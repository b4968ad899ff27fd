"""
Legendre transform of P~ in R^d.

    P~*(alpha) = inf_q (P~(q) - <q|alpha>)

The infimum is found by solving grad P~(q) = alpha with damped Newton steps
(finite-difference Hessian of the analytic gradient), falling back to
backtracking gradient descent when a Newton step does not decrease the
objective. At a solution the subgradient of the convex objective is {0},
so the objective value there is the infimum.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from brwmf import model
from brwmf.errors import UsageError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
MAX_ITER = 200
HESSIAN_STEP = 1e-5
DIVERGENCE_NORM = 1e3
ARMIJO = 1e-4
SPHERE_DIRECTIONS = 64


@dataclass(frozen=True)
class ConjugatePoint:
    alpha: np.ndarray = field(repr=False)
    q_star: np.ndarray = field(repr=False)
    value: float = np.nan
    converged: bool = False
    residual: float = np.inf
    iterations: int = 0
    diverged: bool = False

    @property
    def status(self):
        if self.converged:
            return "converged"
        return "diverged" if self.diverged else "stalled"


def _hessian(spec, q, step):
    d = len(q)
    hess = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        hess[:, j] = (model.grad_log_mgf(spec, q + e) - model.grad_log_mgf(spec, q - e)) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def conjugate(spec, alpha, tol=DEFAULT_TOL, max_iter=MAX_ITER, hessian_step=HESSIAN_STEP):
    """P~*(alpha) and its minimizer.

    converged is set iff |grad P~(q_star) - alpha| <= tol within max_iter
    iterations. Iterates leaving the ball |q| <= 1e3 mean alpha lies outside
    the range of grad P~; the point is returned with diverged set and value
    the best objective found, which only bounds the infimum from above.
    """
    if tol <= 0:
        raise UsageError("tol must be > 0")
    alpha = np.asarray(alpha, dtype=float).reshape(spec.d)

    def objective(q):
        return model.log_mgf(spec, q) - float(q @ alpha)

    q = np.zeros(spec.d)
    f = objective(q)
    g = model.grad_log_mgf(spec, q) - alpha
    gd_step = 1.0
    converged = diverged = False
    it = 0
    for it in range(max_iter + 1):
        if np.linalg.norm(g) <= tol:
            converged = True
            break
        if it == max_iter:
            break

        trial = None
        try:
            direction = -np.linalg.solve(_hessian(spec, q, hessian_step), g)
        except np.linalg.LinAlgError:
            direction = None
        if direction is not None and np.all(np.isfinite(direction)) and g @ direction < 0:
            t = 1.0
            for _ in range(40):
                candidate = q + t * direction
                fc = objective(candidate)
                if fc <= f + ARMIJO * t * (g @ direction):
                    trial = candidate, fc
                    break
                # objective flat to rounding: accept on a smaller gradient
                if abs(fc - f) <= 1e-14 * (1.0 + abs(f)):
                    gc = model.grad_log_mgf(spec, candidate) - alpha
                    if np.linalg.norm(gc) < np.linalg.norm(g):
                        trial = candidate, fc
                        break
                t *= 0.5

        if trial is None:
            t = gd_step
            for _ in range(60):
                candidate = q - t * g
                fc = objective(candidate)
                if fc <= f - ARMIJO * t * (g @ g):
                    trial = candidate, fc
                    gd_step = 2.0 * t
                    break
                t *= 0.5

        if trial is None:
            log.debug("line search stalled at alpha=%s after %d iterations", alpha, it)
            break
        q, f = trial
        g = model.grad_log_mgf(spec, q) - alpha
        if np.linalg.norm(q) > DIVERGENCE_NORM:
            diverged = True
            break

    return ConjugatePoint(alpha=alpha, q_star=q, value=float(f), converged=converged,
                          residual=float(np.linalg.norm(g)), iterations=it, diverged=diverged)


def spectrum_curve(spec, alphas, tol=DEFAULT_TOL):
    """conjugate at every alpha; failures are kept in the list, flagged."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim <= 1:
        alphas = alphas.reshape(-1, spec.d)
    points = [conjugate(spec, alpha, tol) for alpha in alphas]
    failed = [p for p in points if not p.converged]
    if failed:
        log.warning("%d of %d conjugate solves did not converge", len(failed), len(points))
    return points


def sphere_directions(d, count=SPHERE_DIRECTIONS):
    """Deterministic unit vectors covering the sphere in R^d, d <= 3."""
    if d == 1:
        return np.array([[-1.0], [1.0]])
    if d == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    if d == 3:
        # Fibonacci lattice
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        r = np.sqrt(1.0 - z * z)
        theta = np.pi * (1.0 + np.sqrt(5.0)) * k
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)
    raise UsageError("spherical meshes are only built for d <= 3, got d=%d" % d)


def _sphere_conjugates(spec, center, radius, count, tol):
    alphas = np.asarray(center, dtype=float).reshape(spec.d) + radius * sphere_directions(spec.d, count)
    points = [conjugate(spec, alpha, tol) for alpha in alphas]
    kept = [p for p in points if p.converged]
    excluded = [p.alpha for p in points if not p.converged]
    if excluded:
        log.warning("%d of %d sphere points did not converge and were excluded",
                    len(excluded), len(points))
    return kept, excluded


def rate_gap_points(spec, q, ball_center=None, ball_radius=0.1, count=SPHERE_DIRECTIONS, tol=DEFAULT_TOL):
    """sup of L_q*(alpha) over |alpha - grad P~(q)| >= radius, with the excluded alphas.

    L_q*(alpha) = inf_l (P~(q+l) - P~(q) - <l|alpha>) = P~*(alpha) + <q|alpha> - P~(q).
    L_q* is concave with its maximum 0 at grad P~(q), so the supremum outside
    the ball is reached on the sphere.
    """
    q = np.asarray(q, dtype=float).reshape(spec.d)
    center = model.grad_log_mgf(spec, q)
    if ball_center is not None and np.linalg.norm(np.asarray(ball_center, dtype=float) - center) > 1e-9:
        raise UsageError("ball center must be grad P~(q)")
    kept, excluded = _sphere_conjugates(spec, center, ball_radius, count, tol)
    p_q = model.log_mgf(spec, q)
    values = [p.value + float(q @ p.alpha) - p_q for p in kept]
    return (max(values) if values else -np.inf), excluded


def rate_gap(spec, q, ball_center=None, ball_radius=0.1, count=SPHERE_DIRECTIONS, tol=DEFAULT_TOL):
    return rate_gap_points(spec, q, ball_center, ball_radius, count, tol)[0]


def ball_supremum(spec, alpha, epsilon, count=SPHERE_DIRECTIONS, tol=DEFAULT_TOL):
    """sup of P~* over the closed ball B(alpha, epsilon).

    This is the n -> infinity limit of (1/n) log #{u in T_n : |S_n(u) - n alpha| <= n epsilon}
    at fixed epsilon. P~* peaks at grad P~(0) with value log E[N]; off the
    ball the concave P~* reaches its supremum on the sphere.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(spec.d)
    peak = model.grad_log_mgf(spec, np.zeros(spec.d))
    if np.linalg.norm(peak - alpha) <= epsilon:
        return float(model.log_mgf(spec, np.zeros(spec.d)))
    kept, _ = _sphere_conjugates(spec, alpha, epsilon, count, tol)
    return max(p.value for p in kept) if kept else -np.inf


def closure_member(spec, alpha, tol=DEFAULT_TOL):
    """alpha lies in the closure of I exactly when P~*(alpha) >= 0."""
    point = conjugate(spec, alpha, tol)
    if not point.converged:
        return False
    return point.value >= 0.0
