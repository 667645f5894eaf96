"""RIS phase optimization against the large-system MI.

Two objectives are maximized by backtracking gradient ascent on the phases:

* the rank-one (semi-optimal) objective, which keeps only the mean
  directions of the incident and reflected waves, through the array factor
  ``kappa``;
* the full objective, the priority-weighted sum of large-system MIs of the
  decoding-order prefixes, whose phase gradient is exact because the mean is
  stationary in the fixed-point parameters.

Objectives are reported in nats for the whole receiver (not per antenna).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .correlation import CorrelationSet
from .detequiv import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    FixedPointState,
    mean_mi,
    sigma_eigenvalues,
    solve_fixed_point,
)
from .errors import ConfigError, NumericalError
from .phases import PhaseConfig, as_phase_array, quantize_phases

__all__ = [
    "OptimizerReport",
    "priority_terms",
    "kappa",
    "rank_one_objective",
    "rank_one_gradient",
    "semi_optimal_ascend",
    "semi_optimal_optimize",
    "phase_gradient",
    "weighted_objective",
    "full_gradient_ascend",
    "full_optimum",
    "independent_pairing",
    "random_phases",
    "quantize_phases",
]

SLACK = 1e-12
_GROW_AFTER = 5
_GROWTH_CAP = 1e3
JITTER = 1e-3


@dataclass(frozen=True)
class OptimizerReport:
    objective: float
    iterations: int
    trajectory: tuple
    converged: bool
    max_phase_change: tuple = field(default=())
    label: str = ""

    def rows(self):
        """``(iteration, objective, max_phase_change)`` triples."""
        changes = self.max_phase_change or (float("nan"),) * len(self.trajectory)
        return [(i, v, d) for i, (v, d) in enumerate(zip(self.trajectory, changes))]


def priority_terms(mu=None, num_txs=None, order=None):
    """Telescoped form of a priority vector.

    Returns ``[(weight, prefix), ...]`` with ``weight = mu_l - mu_{l+1}`` and
    ``prefix`` the first ``l`` TXs of the decoding ``order``; zero weights are
    dropped.  ``mu=None`` is the sum-rate objective (one term, all TXs).
    """
    if mu is None:
        if num_txs is None:
            raise ConfigError("num_txs is needed for the sum-rate objective", "mu")
        order = tuple(range(num_txs)) if order is None else tuple(order)
        return [(1.0, order)]
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or mu.size == 0:
        raise ConfigError("priority vector must be one-dimensional", "mu")
    if num_txs is not None and mu.size != num_txs:
        raise ConfigError(f"length {mu.size} != number of TXs {num_txs}", "mu")
    if np.any(mu < -SLACK) or abs(mu.sum() - 1.0) > 1e-9:
        raise ConfigError("priorities must be nonnegative and sum to 1", "mu")
    if np.any(np.diff(mu) > 1e-12):
        raise ConfigError("priorities must be sorted nonincreasing (reorder the TXs first)", "mu")
    order = tuple(range(mu.size)) if order is None else tuple(int(m) for m in order)
    if sorted(order) != list(range(mu.size)):
        raise ConfigError("order must be a permutation of the TXs", "order")
    weights = mu - np.append(mu[1:], 0.0)
    return [(float(w), order[: l + 1]) for l, w in enumerate(weights) if w > SLACK]


# ---------------------------------------------------------------- rank one

def kappa(phases_k, delta_q, positions):
    """Array factor ``(1/ns) sum_n exp(i (phi_n - dq . x_n))``.

    ``delta_q`` may carry leading axes, e.g. ``(M, 3)`` gives ``(M,)``.
    """
    ph = np.asarray(phases_k, dtype=float)
    x = np.asarray(positions, dtype=float)
    dq = np.asarray(delta_q, dtype=float)
    arg = ph - dq @ x.T
    return np.mean(np.exp(1j * arg), axis=-1)


def _check_coupling(coupling, K, M):
    c = np.asarray(coupling, dtype=float)
    if c.ndim == 2:
        c = c[None]
    if c.shape[1:] != (K, M):
        raise ConfigError(f"coupling shape {c.shape} does not match (L, {K}, {M})", "coupling")
    return c


def rank_one_objective(phases, coupling, delta_q, positions, terms=None):
    """``sum_l w_l sum_{m in prefix l} sum_k log(1 + ns^2 c^l_km |kappa_km|^2)``.

    ``coupling[l, k, m] = t1_k r2_km`` at the fixed point of prefix ``l``;
    ``terms`` comes from :func:`priority_terms` (sum rate when omitted).
    """
    ph = as_phase_array(phases)
    dq = np.asarray(delta_q, dtype=float)
    K, M = dq.shape[:2]
    ns = ph.shape[1]
    terms = terms if terms is not None else priority_terms(None, M)
    c = _check_coupling(coupling, K, M)
    k2 = np.abs(np.array([kappa(ph[k], dq[k], positions) for k in range(K)])) ** 2
    total = 0.0
    for (w, prefix), cl in zip(terms, c):
        idx = list(prefix)
        total += w * float(np.sum(np.log1p(ns * ns * cl[:, idx] * k2[:, idx])))
    return total


def rank_one_gradient(phases, coupling, delta_q, positions, terms=None):
    """Gradient of :func:`rank_one_objective`, shape ``(K, ns)``."""
    ph = as_phase_array(phases)
    dq = np.asarray(delta_q, dtype=float)
    x = np.asarray(positions, dtype=float)
    K, M = dq.shape[:2]
    ns = ph.shape[1]
    terms = terms if terms is not None else priority_terms(None, M)
    c = _check_coupling(coupling, K, M)
    grad = np.zeros_like(ph)
    for k in range(K):
        e = np.exp(1j * (ph[k][None, :] - dq[k] @ x.T))        # (M, ns)
        kap = e.mean(axis=1)
        for (w, prefix), cl in zip(terms, c):
            for m in prefix:
                a = cl[k, m]
                grad[k] += w * 2.0 * ns * a * np.imag(kap[m] * e[m].conj()) / (1.0 + ns * ns * a * abs(kap[m]) ** 2)
    return grad


def _ascend(evaluate: Callable, phases0, step, tol, max_iter, max_rejects, label, stall_error):
    """Backtracking ascent.  ``evaluate(phases) -> (value, grad, aux)``.

    The step is halved on any decrease (beyond ``SLACK``) and doubled, up to
    ``step * _GROWTH_CAP``, after ``_GROW_AFTER`` consecutive accepted moves.  The run stops
    when the largest proposed phase change (plus ``aux`` change) is below
    ``tol``.
    """
    if step <= 0 or tol <= 0 or max_iter < 1:
        raise ConfigError("step, tolerance and iteration cap must be positive", "optimizer")
    ph = np.array(phases0, dtype=float)
    value, grad, aux = evaluate(ph)
    traj, changes = [value], [0.0]
    eps, streak, rejects = step, 0, 0
    converged = False
    it = 0
    while it < max_iter:
        delta = eps * grad
        dmax = float(np.max(np.abs(delta), initial=0.0))
        if dmax < tol:
            converged = True
            break
        trial = ph + delta
        v2, g2, a2 = evaluate(trial)
        if v2 >= value - SLACK * max(1.0, abs(value)):
            it += 1
            change = dmax
            if aux is not None and a2 is not None:
                change = max(change, aux.max_abs_diff(a2) if hasattr(aux, "max_abs_diff") else 0.0)
            ph, value, grad, aux = trial, v2, g2, a2
            traj.append(value)
            changes.append(dmax)
            rejects = 0
            streak += 1
            if streak >= _GROW_AFTER:
                eps = min(2.0 * eps, step * _GROWTH_CAP)
                streak = 0
            if change < tol:
                converged = True
                break
        else:
            eps *= 0.5
            streak = 0
            rejects += 1
            if rejects >= max_rejects:
                if stall_error:
                    raise NumericalError(f"{label}: objective kept decreasing after {rejects} step reductions")
                break
    report = OptimizerReport(value, it, tuple(traj), converged, tuple(changes), label)
    return ph, aux, report


def _gradient_scale(grad, step):
    """Step that moves the steepest element by ``step`` radians."""
    g = float(np.max(np.abs(grad), initial=0.0))
    return step / g if g > 0 else step


def semi_optimal_ascend(phases0, coupling, delta_q, positions, terms=None, step=0.1, tol=1e-6,
                        max_iter=500, normalize=True):
    """Rank-one ascent, run independently on every RIS.

    With ``normalize`` the step is ``step / max|grad|`` at the start point,
    so the first move changes the steepest phase by ``step`` radians.

    The start is perturbed by a fixed pseudo-random jitter of at most
    ``JITTER`` radians.  On a centred grid an odd phase vector keeps every
    ``kappa`` real and the gradient keeps the phases odd, so an exactly
    symmetric start (``Phi = I`` included) can stall at a saddle where
    ``kappa < 0``; the jitter leaves that invariant set.
    Returns ``(PhaseConfig, [OptimizerReport per RIS])``.
    """
    start = np.array(as_phase_array(phases0), dtype=float)
    ph = start + np.random.default_rng(0).uniform(-JITTER, JITTER, start.shape)
    dq = np.asarray(delta_q, dtype=float)
    K = dq.shape[0]
    reports = []
    for k in range(K):
        dq_k = dq[k : k + 1]
        c = _check_coupling(coupling, K, dq.shape[1])[:, k : k + 1]

        def evaluate(p, dq_k=dq_k, c=c):
            return (rank_one_objective(p[None], c, dq_k, positions, terms),
                    rank_one_gradient(p[None], c, dq_k, positions, terms)[0], None)

        eps = step
        if normalize:
            eps = _gradient_scale(evaluate(ph[k])[1], step)
        ph[k], _, rep = _ascend(evaluate, ph[k], eps, tol, max_iter, 60, f"semi-optimal RIS {k}", True)
        # the objective ignores a common rotation; keep the start's reference
        ph[k] -= np.angle(np.mean(np.exp(1j * (ph[k] - start[k]))))
        reports.append(rep)
    return PhaseConfig(ph), reports


# ---------------------------------------------------------------- full objective

def _prefix_gradient(corr: CorrelationSet, phases, state: FixedPointState, prefix, lam, vecs):
    """d(total MI of ``prefix``)/d phi, shape ``(K, ns)``."""
    K = corr.num_riss
    grad = np.zeros((K, corr.ns))
    e = np.exp(1j * phases)
    for k in range(K):
        X = e.conj()[k][:, None] * corr.s_r[k] * e[k][None, :]
        for m in prefix:
            c = state.t_1[k] * state.r_2[k, m]
            if c == 0.0:
                continue
            P = corr.s_t_sqrt[k, m] @ vecs[k, m]
            Y = (P / (1.0 + c * lam[k, m]))[:, :] @ P.conj().T
            # diag of (I + c S_t X)^-1 is 1 - c diag(Y X)
            grad[k] += -2.0 * c * np.imag(np.einsum("nj,jn->n", Y, X))
    return grad


def _evaluate_full(corr, Q, phases, terms, states, fp_tol, fp_max_iter, gradient=True):
    if gradient:
        lam, vecs = sigma_eigenvalues(corr, phases, vectors=True)
    else:
        lam, vecs = sigma_eigenvalues(corr, phases), None
    value = 0.0
    grad = np.zeros_like(phases) if gradient else None
    new_states = []
    for (w, prefix), init in zip(terms, states):
        st = solve_fixed_point(corr, Q, phases, prefix, tol=fp_tol, max_iter=fp_max_iter, init=init, lam=lam)
        value += w * mean_mi(corr, Q, phases, prefix, st, lam=lam).mean_total
        if gradient:
            grad += w * _prefix_gradient(corr, phases, st, prefix, lam, vecs)
        new_states.append(st)
    return value, grad, new_states


class _StateList(list):
    def max_abs_diff(self, other):
        return max((a.max_abs_diff(b) for a, b in zip(self, other)), default=0.0)


def weighted_objective(corr: CorrelationSet, Q, phases, mu=None, order=None, fp_tol=DEFAULT_TOL,
                       fp_max_iter=DEFAULT_MAX_ITER):
    """``sum_l (mu_l - mu_{l+1}) C(prefix l)`` in nats, each prefix with its own fixed point."""
    ph = as_phase_array(phases)
    terms = priority_terms(mu, corr.num_txs, order)
    value, _, _ = _evaluate_full(corr, Q, ph, terms, [None] * len(terms), fp_tol, fp_max_iter, False)
    return value


def phase_gradient(corr: CorrelationSet, Q, phases, mu=None, order=None, fp_tol=DEFAULT_TOL,
                   fp_max_iter=DEFAULT_MAX_ITER):
    """Exact gradient of :func:`weighted_objective` with respect to every phase."""
    ph = as_phase_array(phases)
    terms = priority_terms(mu, corr.num_txs, order)
    _, grad, _ = _evaluate_full(corr, Q, ph, terms, [None] * len(terms), fp_tol, fp_max_iter, True)
    return grad


def full_gradient_ascend(corr: CorrelationSet, Q, mu=None, order=None, phases0=None, step=0.1, tol=1e-6,
                         max_iter=500, fp_tol=DEFAULT_TOL, fp_max_iter=DEFAULT_MAX_ITER, normalize=True,
                         label="full"):
    """Gradient ascent on the full weighted objective.

    Every trial point re-solves the prefix fixed points, warm-started from
    the last accepted ones, so objective and gradient are exact.  Starts from
    ``Phi = I`` unless ``phases0`` is given.  Returns
    ``(PhaseConfig, [FixedPointState per prefix], OptimizerReport)``;
    hitting ``max_iter`` returns the best point flagged unconverged.
    """
    K, ns = corr.num_riss, corr.ns
    ph0 = np.zeros((K, ns)) if phases0 is None else np.array(as_phase_array(phases0), dtype=float)
    if ph0.shape != (K, ns):
        raise ConfigError(f"initial phases shape {ph0.shape} != {(K, ns)}", "phases0")
    terms = priority_terms(mu, corr.num_txs, order)
    memo = {"states": [None] * len(terms)}

    def evaluate(p):
        v, g, sts = _evaluate_full(corr, Q, p, terms, memo["states"], fp_tol, fp_max_iter, True)
        return v, g, _StateList(sts)

    first = evaluate(ph0)
    memo["states"] = first[2]
    eps = _gradient_scale(first[1], step) if normalize else step

    ph, states, report = _ascend(_Warm(evaluate, memo, first, ph0), ph0, eps, tol, max_iter, 60, label, False)
    return PhaseConfig(ph), list(states), report


class _Warm:
    """Evaluator that warm-starts each solve from the last accepted fixed points."""

    def __init__(self, evaluate, memo, first, ph0):
        self.evaluate, self.memo = evaluate, memo
        self.cache = (ph0.copy(), first)

    def __call__(self, p):
        if np.array_equal(p, self.cache[0]):
            return self.cache[1]
        out = self.evaluate(p)
        if out[0] >= self.cache[1][0] - SLACK * max(1.0, abs(self.cache[1][0])):
            self.memo["states"] = out[2]
            self.cache = (p.copy(), out)
        return out


def independent_pairing(delta_q, positions):
    """Phases matching RIS ``k`` to TX ``k``: ``phi_kn = dq_kk . x_n`` (needs ``K <= M``)."""
    dq = np.asarray(delta_q, dtype=float)
    K, M = dq.shape[:2]
    if K > M:
        raise ConfigError(f"pairing needs at least as many TXs as RISs ({K} > {M})", "num_riss")
    x = np.asarray(positions, dtype=float)
    return PhaseConfig(np.array([x @ dq[k, k] for k in range(K)]))


def random_phases(num_riss, ns, seed):
    rng = np.random.default_rng(seed)
    return PhaseConfig(rng.uniform(0.0, 2.0 * math.pi, (num_riss, ns)))


def semi_optimal_optimize(corr: CorrelationSet, Q, delta_q, positions, mu=None, order=None, phases0=None,
                          step=0.1, tol=1e-6, max_iter=500, outer_iter=10, fp_tol=DEFAULT_TOL,
                          fp_max_iter=DEFAULT_MAX_ITER):
    """Alternate fixed-point refreshes with rank-one phase ascents.

    The couplings ``t1 r2`` of every prefix are recomputed at the current
    phases, then the rank-one objective is maximized with those couplings
    frozen.  Stops when an outer pass moves no phase by more than ``tol``.
    The report trajectory holds the full weighted objective after each pass.
    """
    K, M, ns = corr.num_riss, corr.num_txs, corr.ns
    ph = np.zeros((K, ns)) if phases0 is None else np.array(as_phase_array(phases0), dtype=float)
    terms = priority_terms(mu, M, order)
    states = [None] * len(terms)
    traj, changes = [], []
    converged = False
    it = 0
    for it in range(1, outer_iter + 1):
        value, _, states = _evaluate_full(corr, Q, ph, terms, states, fp_tol, fp_max_iter, False)
        traj.append(value)
        coupling = np.array([s.t_1[:, None] * s.r_2 for s in states])
        new, _ = semi_optimal_ascend(ph, coupling, delta_q, positions, terms, step, tol, max_iter)
        diff = np.angle(np.exp(1j * (new.phases - ph)))
        # a common rotation of one RIS is irrelevant
        diff -= np.angle(np.mean(np.exp(1j * diff), axis=1, keepdims=True))
        dmax = float(np.max(np.abs(diff), initial=0.0))
        changes.append(dmax)
        ph = np.array(new.phases)
        if dmax < max(tol, 1e-9) * 10:
            converged = True
            break
    value, _, states = _evaluate_full(corr, Q, ph, terms, states, fp_tol, fp_max_iter, False)
    traj.append(value)
    changes.append(0.0)
    return PhaseConfig(ph), states, OptimizerReport(value, it, tuple(traj), converged, tuple(changes), "semi-optimal")


def full_optimum(corr: CorrelationSet, Q, delta_q, positions, mu=None, order=None, step=0.1, tol=1e-6,
                 max_iter=500, starts=("identity", "pairing", "semi"), extra_starts: Sequence = (),
                 fp_tol=DEFAULT_TOL, fp_max_iter=DEFAULT_MAX_ITER, identity_floor=False):
    """Best full-gradient ascent over several starts.

    ``starts`` picks among ``"identity"`` (``Phi = I``), ``"pairing"`` (only
    used when ``K <= M``) and ``"semi"`` (the semi-optimal solution);
    ``extra_starts`` adds explicit phase configurations.  With
    ``identity_floor`` an ascent from ``Phi = I`` is added only when the
    other starts end below the ``Phi = I`` objective, which guarantees the
    result is at least the unoptimized value.  Returns
    ``(PhaseConfig, states, OptimizerReport)`` of the winner.
    """
    K, M = corr.num_riss, corr.num_txs
    unknown = set(starts) - {"identity", "pairing", "semi"}
    if unknown:
        raise ConfigError(f"unknown start(s) {sorted(unknown)}", "starts")
    inits = []
    if "identity" in starts:
        inits.append(("identity", None))
    if "pairing" in starts and K <= M:
        inits.append(("pairing", independent_pairing(delta_q, positions)))
    if "semi" in starts:
        semi, _, _ = semi_optimal_optimize(corr, Q, delta_q, positions, mu, order, step=step, tol=tol,
                                           max_iter=max_iter, fp_tol=fp_tol, fp_max_iter=fp_max_iter)
        inits.append(("semi-optimal", semi))
    inits.extend((f"start {i}", p) for i, p in enumerate(extra_starts))
    if not inits:
        raise ConfigError("no starting point selected", "starts")
    best = None
    for name, p0 in inits:
        out = full_gradient_ascend(corr, Q, mu, order, p0, step, tol, max_iter, fp_tol, fp_max_iter,
                                   label=f"full from {name}")
        if best is None or out[2].objective > best[2].objective:
            best = out
    if identity_floor and "identity" not in starts:
        ident = PhaseConfig.identity(K, corr.ns)
        if best[2].objective < weighted_objective(corr, Q, ident, mu, order, fp_tol, fp_max_iter):
            out = full_gradient_ascend(corr, Q, mu, order, None, step, tol, max_iter, fp_tol, fp_max_iter,
                                       label="full from identity")
            if out[2].objective > best[2].objective:
                best = out
    return best
