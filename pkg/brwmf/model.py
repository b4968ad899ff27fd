"""
Reproduction and displacement laws (N, X_1, X_2, ...) of the branching random walk.

Only families with a closed-form log moment generating function are built in,
so every downstream estimate has an analytic oracle:

  BinaryRademacher        N = 2, X has independent +-1 coordinates
  FixedFanDiscrete        N = fan_out, X drawn from a finite support
  ShiftedPoissonGaussian  N = 1 + Poisson(lambda), X ~ Normal(mean, sigma^2 I)

N is at least 1 for every family, so the tree never dies out.
"""

import enum
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from math import gcd

import numpy as np
from scipy.special import logsumexp, softmax

from brwmf.errors import ConfigurationError

log = logging.getLogger(__name__)

LOG2 = np.log(2.0)


class Family(str, enum.Enum):
    BINARY_RADEMACHER = "BinaryRademacher"
    FIXED_FAN_DISCRETE = "FixedFanDiscrete"
    SHIFTED_POISSON_GAUSSIAN = "ShiftedPoissonGaussian"


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    d: int = 1
    fan_out: int = 2
    rate: float = 1.0
    mean: tuple = ()
    sigma: float = 1.0
    support: tuple = ()
    probabilities: tuple = ()

    @classmethod
    def binary_rademacher(cls, d=1):
        return cls(Family.BINARY_RADEMACHER, d=d).validate()

    @classmethod
    def fixed_fan_discrete(cls, fan_out, support, probabilities):
        support = tuple(tuple(float(c) for c in np.atleast_1d(x)) for x in support)
        d = len(support[0]) if support else 1
        return cls(Family.FIXED_FAN_DISCRETE, d=d, fan_out=int(fan_out), support=support,
                   probabilities=tuple(float(p) for p in probabilities)).validate()

    @classmethod
    def shifted_poisson_gaussian(cls, rate=1.0, mean=(0.0,), sigma=1.0):
        mean = tuple(float(m) for m in np.atleast_1d(mean))
        return cls(Family.SHIFTED_POISSON_GAUSSIAN, d=len(mean), rate=float(rate),
                   mean=mean, sigma=float(sigma)).validate()

    def validate(self):
        """Checks the law invariants and returns self.

        Raises ConfigurationError naming the offending parameter.
        """
        if not isinstance(self.family, Family):
            raise ConfigurationError("model.family", "unsupported family %r" % (self.family,))
        if int(self.d) < 1:
            raise ConfigurationError("model.d", "dimension must be a positive integer")

        if self.family is Family.FIXED_FAN_DISCRETE:
            if int(self.fan_out) < 2:
                raise ConfigurationError("model.fan_out", "fan_out must be at least 2 (E[N] > 1)")
            if not self.support:
                raise ConfigurationError("model.support", "support must not be empty")
            if len(self.support) != len(self.probabilities):
                raise ConfigurationError("model.probabilities",
                                         "one probability per support point is required")
            if any(len(x) != self.d for x in self.support):
                raise ConfigurationError("model.support", "every support point needs %d coordinates" % self.d)
            if not np.all(np.isfinite(self.support)):
                raise ConfigurationError("model.support", "support points must be finite")
            probs = np.asarray(self.probabilities)
            if np.any(probs <= 0.0):
                raise ConfigurationError("model.probabilities", "probabilities must be positive")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ConfigurationError("model.probabilities",
                                         "probabilities sum to %.17g, not 1" % probs.sum())

        elif self.family is Family.SHIFTED_POISSON_GAUSSIAN:
            if not self.rate > 0.0 or not np.isfinite(self.rate):
                raise ConfigurationError("model.lambda", "lambda must be > 0, got %r" % (self.rate,))
            if not self.sigma > 0.0 or not np.isfinite(self.sigma):
                raise ConfigurationError("model.sigma", "sigma must be > 0, got %r" % (self.sigma,))
            if len(self.mean) != self.d:
                raise ConfigurationError("model.mean", "mean needs %d coordinates" % self.d)
            if not np.all(np.isfinite(self.mean)):
                raise ConfigurationError("model.mean", "mean must be finite")
        return self

    def as_dict(self):
        info = {"family": self.family.value, "d": self.d}
        if self.family is Family.FIXED_FAN_DISCRETE:
            info.update(fan_out=self.fan_out, support=[list(x) for x in self.support],
                        probabilities=list(self.probabilities))
        elif self.family is Family.SHIFTED_POISSON_GAUSSIAN:
            info.update({"lambda": self.rate, "mean": list(self.mean), "sigma": self.sigma})
        return info


@dataclass(frozen=True)
class OffspringDraw:
    n_children: int
    displacements: np.ndarray = field(repr=False)


def _as_points(spec, q):
    """Coerces q to an array of shape (..., d); single is True for one point."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 0 or (spec.d == 1 and q.shape[-1] != 1):
        q = q[..., None]
    if q.shape[-1] != spec.d:
        raise ConfigurationError("q", "expected %d coordinates, got shape %s" % (spec.d, q.shape))
    return q, q.ndim == 1


def _unwrap(values, single):
    if single:
        return float(values) if np.ndim(values) == 0 else values
    return values


def mean_offspring(spec):
    if spec.family is Family.BINARY_RADEMACHER:
        return 2.0
    if spec.family is Family.FIXED_FAN_DISCRETE:
        return float(spec.fan_out)
    return 1.0 + spec.rate


def lattice(spec):
    """(a, h) with every X in a + hZ, for d = 1 lattice laws; None otherwise.

    S_n(u) then lies in n a + hZ, so a ball of radius n eps holds about
    2 n eps / h reachable positions.
    """
    if spec.d != 1:
        return None
    if spec.family is Family.BINARY_RADEMACHER:
        return -1.0, 2.0
    if spec.family is not Family.FIXED_FAN_DISCRETE:
        return None
    values = sorted(set(x[0] for x in spec.support))
    if len(values) < 2:
        return None
    steps = []
    for v in values[1:]:
        step = Fraction(v - values[0]).limit_denominator(10 ** 6)
        if abs(float(step) - (v - values[0])) > 1e-12:
            return None
        steps.append(step)
    denominator = reduce(lambda a, b: a * b // gcd(a, b), (s.denominator for s in steps))
    numerator = reduce(gcd, (s.numerator * (denominator // s.denominator) for s in steps))
    return values[0], numerator / denominator


def log_mgf(spec, q):
    """P~(q) = log E sum_{i<=N} exp<q|X_i>, for one point or an array of points."""
    q, single = _as_points(spec, q)
    if spec.family is Family.BINARY_RADEMACHER:
        # log cosh x = logaddexp(x, -x) - log 2
        value = LOG2 + np.sum(np.logaddexp(q, -q) - LOG2, axis=-1)
    elif spec.family is Family.FIXED_FAN_DISCRETE:
        support = np.asarray(spec.support)
        value = np.log(spec.fan_out) + logsumexp(q @ support.T, b=np.asarray(spec.probabilities), axis=-1)
    else:
        mean = np.asarray(spec.mean)
        value = np.log1p(spec.rate) + q @ mean + 0.5 * spec.sigma ** 2 * np.sum(q * q, axis=-1)
    return _unwrap(value, single)


def grad_log_mgf(spec, q):
    q, single = _as_points(spec, q)
    if spec.family is Family.BINARY_RADEMACHER:
        grad = np.tanh(q)
    elif spec.family is Family.FIXED_FAN_DISCRETE:
        support = np.asarray(spec.support)
        weights = softmax(q @ support.T + np.log(spec.probabilities), axis=-1)
        grad = weights @ support
    else:
        grad = np.asarray(spec.mean) + spec.sigma ** 2 * q
    return grad


def moment_log_bound(spec, q, gamma):
    """log of an upper bound on E[(sum_{i<=N} e^<q|X_i>)^gamma].

    Uses (sum_{i<=N} a_i)^gamma <= N^(gamma-1) sum a_i^gamma and the
    independence of N and the X_i: the bound is E[N^gamma] E[e^<gamma q|X>].
    """
    q, single = _as_points(spec, q)
    if spec.family is Family.BINARY_RADEMACHER:
        log_n = gamma * LOG2
    elif spec.family is Family.FIXED_FAN_DISCRETE:
        log_n = gamma * np.log(spec.fan_out)
    elif spec.family is Family.SHIFTED_POISSON_GAUSSIAN:
        # E[(1+P)^gamma] <= E[(1+P)^2]^(gamma/2) for gamma <= 2
        log_n = 0.5 * gamma * np.log1p(3.0 * spec.rate + spec.rate ** 2)
    else:
        raise ConfigurationError("model.family", "no moment bound for family %r" % (spec.family,))
    # E e^<gamma q|X> = E[sum e^<gamma q|X_i>] / E[N]
    log_x = log_mgf(spec, gamma * q) - np.log(mean_offspring(spec))
    return _unwrap(log_n + log_x, single)


def moment_gamma_finite(spec, q, gamma):
    """True when E[|sum_{i<=N} e^<q|X_i>|^gamma] is finite, gamma in (1, 2]."""
    if not 1.0 < gamma <= 2.0:
        raise ConfigurationError("gamma", "gamma must lie in (1, 2], got %r" % (gamma,))
    if not isinstance(spec.family, Family):
        raise ConfigurationError("model.family", "unsupported family %r" % (spec.family,))
    bound = moment_log_bound(spec, q, gamma)
    return np.isfinite(bound) if np.ndim(bound) else bool(np.isfinite(bound))


def sample_counts(spec, parents, rng):
    """Offspring counts for `parents` nodes; the first draws of a generation."""
    if spec.family is Family.BINARY_RADEMACHER:
        return np.full(parents, 2, dtype=np.int64)
    if spec.family is Family.FIXED_FAN_DISCRETE:
        return np.full(parents, spec.fan_out, dtype=np.int64)
    return 1 + rng.poisson(spec.rate, size=parents).astype(np.int64)


def sample_displacements(spec, total, rng):
    """`total` i.i.d. displacements of shape (total, d), drawn after the counts."""
    if spec.family is Family.BINARY_RADEMACHER:
        return 2.0 * rng.integers(0, 2, size=(total, spec.d)) - 1.0
    if spec.family is Family.FIXED_FAN_DISCRETE:
        idx = rng.choice(len(spec.support), size=total, p=np.asarray(spec.probabilities))
        return np.asarray(spec.support, dtype=float)[idx]
    return np.asarray(spec.mean) + spec.sigma * rng.standard_normal((total, spec.d))


def sample_generation(spec, parents, rng):
    """Draws independent offspring vectors for `parents` nodes.

    Returns (counts, displacements): counts[i] children for parent i and the
    displacements of all children, parent-major, birth order within parent.
    Counts are drawn before displacements so the stream layout is fixed.
    """
    counts = sample_counts(spec, parents, rng)
    return counts, sample_displacements(spec, int(counts.sum()), rng)


def sample_offspring(spec, rng):
    counts, displacements = sample_generation(spec, 1, rng)
    return OffspringDraw(n_children=int(counts[0]), displacements=displacements)


def monte_carlo_log_mgf(spec, q, draws, rng):
    """Monte-Carlo estimate of P~(q) with a delta-method standard error.

    Returns (estimate, stderr).
    """
    q, _ = _as_points(spec, q)
    counts, displacements = sample_generation(spec, draws, rng)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    totals = np.add.reduceat(np.exp(displacements @ q), offsets)
    mean = totals.mean()
    stderr = totals.std(ddof=1) / (mean * np.sqrt(draws))
    return float(np.log(mean)), float(stderr)
