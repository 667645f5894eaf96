"""Ergodic capacity-region boundaries of the RIS-assisted MAC.

A boundary point maximizes ``sum_m mu_m R_m``.  For a fixed phase
configuration the maximizer is the SIC corner that decodes the TXs in
decreasing priority (the lowest-priority TX first, so the highest-priority
TX sees no interference); its rates are differences of prefix sum-MIs.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import phaseopt
from .correlation import CorrelationSet
from .detequiv import DEFAULT_MAX_ITER, DEFAULT_TOL, mean_mi, sigma_eigenvalues, solve_fixed_point
from .errors import ConfigError
from .montecarlo import subset_means
from .phases import PhaseConfig, as_phase_array

__all__ = [
    "RatePoint",
    "validate_mu",
    "decoding_orders",
    "weighted_objective",
    "sic_rates",
    "boundary_point",
    "mu_grid",
    "sweep_region",
    "subset_rates",
    "feasibility_violation",
    "monte_carlo_rates",
]

MODES = ("identity", "semi", "full")


@dataclass(frozen=True, eq=False)
class RatePoint:
    """One boundary point; ``mu`` and ``rates`` are indexed by TX label."""

    mu: tuple
    rates: tuple
    phases: PhaseConfig
    optimized: bool
    orders: tuple

    @property
    def sum_rate(self):
        return float(sum(self.rates))

    @property
    def weighted_rate(self):
        return float(np.dot(self.mu, self.rates))


def validate_mu(mu, num_txs=None):
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or mu.size == 0:
        raise ConfigError("priority vector must be one-dimensional", "mu")
    if num_txs is not None and mu.size != num_txs:
        raise ConfigError(f"length {mu.size} != number of TXs {num_txs}", "mu")
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-9:
        raise ConfigError("priorities must be nonnegative and sum to 1", "mu")
    return mu


def decoding_orders(mu, max_orders=120):
    """Priority orders (highest first) consistent with ``mu``.

    Ties produce every ordering of the tied group; rates are then averaged
    over them (time sharing), which keeps tied TXs symmetric.
    """
    mu = np.asarray(mu, dtype=float)
    vals = sorted(set(np.round(mu, 12)), reverse=True)
    groups = [[m for m in range(mu.size) if round(mu[m], 12) == v] for v in vals]
    combos = itertools.product(*[itertools.permutations(g) for g in groups])
    orders = [tuple(itertools.chain.from_iterable(c)) for c in itertools.islice(combos, max_orders)]
    return tuple(orders)


def weighted_objective(corr: CorrelationSet, Q, phases, mu, order=None, fp_tol=DEFAULT_TOL,
                       fp_max_iter=DEFAULT_MAX_ITER):
    """``mu_M C(all) + sum_l (mu_l - mu_{l+1}) C(first l)`` in nats.

    ``mu`` must already be sorted nonincreasing along ``order`` (identity
    order by default).
    """
    return phaseopt.weighted_objective(corr, Q, phases, mu, order, fp_tol, fp_max_iter)


class _PrefixCache:
    """Large-system sum-MI of TX subsets at one phase configuration."""

    def __init__(self, corr, Q, phases, fp_tol=DEFAULT_TOL, fp_max_iter=DEFAULT_MAX_ITER):
        self.corr, self.Q = corr, Q
        self.phases = as_phase_array(phases)
        self.lam = sigma_eigenvalues(corr, self.phases)
        self.fp = (fp_tol, fp_max_iter)
        self.values = {(): 0.0}

    def __call__(self, subset):
        key = tuple(sorted(subset))
        if key not in self.values:
            st = solve_fixed_point(self.corr, self.Q, self.phases, key, tol=self.fp[0], max_iter=self.fp[1],
                                   lam=self.lam)
            self.values[key] = mean_mi(self.corr, self.Q, self.phases, key, st, lam=self.lam).mean_total
        return self.values[key]


def sic_rates(corr: CorrelationSet, Q, phases, orders, cache=None):
    """Rates of the SIC corners for the given priority orders, averaged."""
    cache = cache or _PrefixCache(corr, Q, phases)
    M = corr.num_txs
    rates = np.zeros(M)
    for order in orders:
        for l, m in enumerate(order):
            rates[m] += cache(order[: l + 1]) - cache(order[:l])
    return rates / len(orders)


def _optimize(corr, Q, mu_sorted, order, mode, delta_q, positions, settings):
    if mode == "identity":
        return PhaseConfig.identity(corr.num_riss, corr.ns)
    if delta_q is None or positions is None:
        raise ConfigError("optimized boundaries need delta_q and positions", "mode")
    kw = dict(step=settings.step, tol=settings.tol, max_iter=settings.max_iter, fp_tol=settings.fp_tol,
              fp_max_iter=settings.fp_max_iter)
    if mode == "semi":
        return phaseopt.semi_optimal_optimize(corr, Q, delta_q, positions, mu_sorted, order, **kw)[0]
    # the identity floor keeps the optimized region outside the unoptimized one
    return phaseopt.full_optimum(corr, Q, delta_q, positions, mu_sorted, order, starts=("semi",),
                                 identity_floor=True, **kw)[0]


def boundary_point(corr: CorrelationSet, Q, mu, mode="identity", delta_q=None, positions=None,
                   settings=None) -> RatePoint:
    """Boundary point for priorities ``mu`` (any order, indexed by TX).

    ``mode`` is ``"identity"`` (``Phi = I``), ``"semi"`` or ``"full"``; an
    optimized ``Phi`` is chosen once per ``mu`` for the weighted objective
    and reused for every prefix.
    """
    from .scenario import OptimizerSettings

    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}", "mode")
    mu = validate_mu(mu, corr.num_txs)
    settings = settings or OptimizerSettings()
    orders = decoding_orders(mu)
    order = orders[0]
    phases = _optimize(corr, Q, mu[list(order)], order, mode, delta_q, positions, settings)
    rates = sic_rates(corr, Q, phases, orders)
    return RatePoint(tuple(float(v) for v in mu), tuple(float(r) for r in rates), phases, mode != "identity", orders)


def mu_grid(num_txs, steps):
    """All priority vectors with entries in ``{0, 1/(steps-1), ..., 1}``.

    For two TXs this is ``mu_1 = 0, 0.1, ..., 1`` with ``steps = 11``; the
    list is ordered by decreasing ``mu_1`` and then lexicographically.
    """
    if steps < 2:
        raise ConfigError("need at least 2 grid points", "steps")
    n = steps - 1
    out = []
    for comp in itertools.product(range(n + 1), repeat=num_txs - 1):
        if sum(comp) <= n:
            out.append(tuple(c / n for c in comp) + ((n - sum(comp)) / n,))
    out.sort(key=lambda v: tuple(-x for x in v))
    return out


def _point_task(args):
    corr, Q, mu, mode, delta_q, positions, settings = args
    return boundary_point(corr, Q, mu, mode, delta_q, positions, settings)


def sweep_region(corr: CorrelationSet, Q, steps=11, mode="identity", delta_q=None, positions=None,
                 settings=None, workers=1):
    """Boundary points over :func:`mu_grid`, sorted by ``R_1`` (then ``R_2``, ...)."""
    grid = mu_grid(corr.num_txs, steps)
    tasks = [(corr, Q, mu, mode, delta_q, positions, settings) for mu in grid]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_point_task, tasks))
    else:
        points = [_point_task(t) for t in tasks]
    return sorted(points, key=lambda p: (tuple(round(r, 12) for r in p.rates), tuple(-m for m in p.mu)))


def subset_rates(corr: CorrelationSet, Q, phases):
    """``{subset: C(subset)}`` for every nonempty TX subset."""
    cache = _PrefixCache(corr, Q, phases)
    M = corr.num_txs
    return {s: cache(s) for r in range(1, M + 1) for s in itertools.combinations(range(M), r)}


def feasibility_violation(point: RatePoint, corr: CorrelationSet, Q, capacities=None):
    """Largest ``sum_{m in S} R_m - C(S)`` over all subsets (and ``-R_m``).

    Nonpositive (up to round-off) for a feasible point.
    """
    caps = capacities if capacities is not None else subset_rates(corr, Q, point.phases)
    r = np.asarray(point.rates)
    worst = float(np.max(-r))
    for s, c in caps.items():
        worst = max(worst, float(r[list(s)].sum() - c))
    return worst


def monte_carlo_rates(point: RatePoint, corr: CorrelationSet, Q, n_samples=2000, seed=0):
    """SIC rates of ``point`` re-evaluated with Monte Carlo prefix means.

    All prefixes share the same channel draws (common random numbers).
    """
    M = corr.num_txs
    prefixes = {tuple(sorted(o[:l])) for o in point.orders for l in range(1, M + 1)}
    means = subset_means(corr, Q, point.phases, sorted(prefixes), n_samples, seed)
    means[()] = 0.0
    rates = np.zeros(M)
    for order in point.orders:
        for l, m in enumerate(order):
            rates[m] += means[tuple(sorted(order[: l + 1]))] - means[tuple(sorted(order[:l]))]
    return rates / len(point.orders)
