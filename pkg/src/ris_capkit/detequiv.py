"""Large-system (deterministic-equivalent) statistics of the ergodic sum-MI.

The mean is the stationary value of

    F(t, r) = log det(I_nr + R~) + sum_km log det(I_ns + t1_k r2_km Sigma_km)
              + sum_m log det(I_nt + Q_m T~_m)
              - nt * sum_m (r_dm t_dm + sum_k (r1_km t1_k + r2_km t2_km))

over the scalar parameters, and the variance is ``-log`` of the signed
determinant of the Hessian of ``F / nt`` (the fluctuation matrix).  All
quantities are in nats; ``mean_total`` is the MI of the whole receiver,
``mean_per_tx_antenna`` the same value divided by ``nt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy import special

from .correlation import CorrelationSet, matrix_sqrt_hermitian
from .errors import ConfigError, ConvergenceError, DegenerateVarianceError, NumericalError
from .phases import as_phase_array

__all__ = [
    "FixedPointState",
    "MIStats",
    "default_input_covariance",
    "sigma_km",
    "sigma_eigenvalues",
    "solve_fixed_point",
    "mean_mi",
    "assemble_lambda",
    "variance_mi",
    "gaussian_outage",
    "analyze",
]

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 20000
_MIN_DAMPING = 1.0 / 64.0
_POLISH_EVERY = 50
_POLISH_BELOW = 1e-2


@dataclass(frozen=True)
class FixedPointState:
    """Solution of the fixed-point system.

    Shapes: ``t_d, r_d (M,)``, ``t_1 (K,)``, ``t_2, r_1, r_2 (K, M)``.
    Parameters of inactive TXs are zero.
    """

    t_d: np.ndarray
    t_1: np.ndarray
    t_2: np.ndarray
    r_d: np.ndarray
    r_1: np.ndarray
    r_2: np.ndarray
    residual: float = 0.0
    iterations: int = 0

    @classmethod
    def zeros(cls, num_txs, num_riss):
        M, K = num_txs, num_riss
        return cls(np.zeros(M), np.zeros(K), np.zeros((K, M)), np.zeros(M), np.zeros((K, M)), np.zeros((K, M)))

    def vector(self):
        return np.concatenate([self.t_d, self.t_1, self.t_2.ravel(), self.r_d, self.r_1.ravel(), self.r_2.ravel()])

    def max_abs_diff(self, other):
        return float(np.max(np.abs(self.vector() - other.vector()), initial=0.0))

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        arrays = {k: np.asarray(data[k], dtype=float) for k in ("t_d", "t_1", "t_2", "r_d", "r_1", "r_2")}
        return cls(**arrays, residual=float(data.get("residual", 0.0)), iterations=int(data.get("iterations", 0)))


@dataclass(frozen=True)
class MIStats:
    mean_per_tx_antenna: float
    mean_total: float
    variance: float | None
    active_set: tuple

    @property
    def std(self):
        return math.sqrt(self.variance) if self.variance is not None else None


def default_input_covariance(num_txs, nt, snr):
    """``Q_m = snr * I`` for every TX, so that ``Tr Q_m = snr * nt``."""
    return np.broadcast_to(snr * np.eye(nt), (num_txs, nt, nt)).astype(complex)


def _active_mask(active, num_txs):
    if active is None:
        return np.ones(num_txs, dtype=bool)
    mask = np.zeros(num_txs, dtype=bool)
    for m in active:
        if not 0 <= m < num_txs:
            raise ConfigError(f"TX index {m} out of range", "active")
        mask[m] = True
    return mask


def sigma_km(s_t, s_r, phases_k, s_t_sqrt=None):
    """``S_t^(1/2) Phi^H S_r Phi S_t^(1/2)`` for one (RIS, TX) pair."""
    s_t, s_r = np.asarray(s_t), np.asarray(s_r)
    e = np.exp(1j * np.asarray(phases_k, dtype=float))
    if s_t.shape != s_r.shape or s_t.shape[0] != e.shape[0]:
        raise ConfigError(f"dimension mismatch: S_t {s_t.shape}, S_r {s_r.shape}, Phi {e.shape}", "sigma_km")
    if s_t_sqrt is None:
        s_t_sqrt = matrix_sqrt_hermitian(s_t)
    inner = e.conj()[:, None] * s_r * e[None, :]
    out = s_t_sqrt @ inner @ s_t_sqrt
    return 0.5 * (out + out.conj().T)


def sigma_eigenvalues(corr: CorrelationSet, phases, vectors=False):
    """Eigen-decompositions of every ``Sigma_km``.

    Returns eigenvalues of shape ``(K, M, ns)`` (clipped at zero) and, with
    ``vectors=True``, the matching eigenvectors ``(K, M, ns, ns)``.
    """
    ph = as_phase_array(phases)
    K, M, ns = corr.num_riss, corr.num_txs, corr.ns
    if K and ph.shape != (K, ns):
        raise ConfigError(f"phases shape {ph.shape} != {(K, ns)}", "phases")
    lam = np.zeros((K, M, ns))
    vecs = np.zeros((K, M, ns, ns), dtype=complex) if vectors else None
    roots = corr.s_t_sqrt if K else None
    for k in range(K):
        for m in range(M):
            sig = sigma_km(corr.s_t[k, m], corr.s_r[k], ph[k], s_t_sqrt=roots[k, m])
            if vectors:
                w, V = np.linalg.eigh(sig)
                vecs[k, m] = V
            else:
                w = np.linalg.eigvalsh(sig)
            if w.size and w[0] < -1e-10 * max(w[-1], 1e-300) - 1e-12:
                raise NumericalError(f"Sigma[{k},{m}] is indefinite (min eigenvalue {w[0]:.3e})")
            lam[k, m] = np.clip(w, 0.0, None)
    return (lam, vecs) if vectors else lam


class _System:
    """Inputs of the fixed-point map with the active set applied."""

    def __init__(self, corr: CorrelationSet, Q, lam, active):
        self.corr = corr
        M, K = corr.num_txs, corr.num_riss
        self.M, self.K, self.nt, self.nr = M, K, corr.nt, corr.nr
        Q = np.asarray(Q, dtype=complex)
        if Q.shape != (M, self.nt, self.nt):
            raise ConfigError(f"Q shape {Q.shape} != {(M, self.nt, self.nt)}", "Q")
        self.mask = _active_mask(active, M)
        self.Q = Q
        self.lam = lam
        self.r_direct = corr.r_direct_effective
        self.t_direct = corr.t_direct
        self.r_ris = corr.r_ris
        self.t_ris = corr.t_ris
        self.eye_r = np.eye(self.nr)
        self.eye_t = np.eye(self.nt)
        # Q_m T products are reused by every sweep
        self.qt_direct = np.einsum("mab,mbc->mac", Q, self.t_direct)
        self.qt_ris = np.einsum("mab,kmbc->kmac", Q, self.t_ris)

    def r_bar(self, r_d, r_1):
        act = self.mask
        out = self.eye_r + np.einsum("m,mab->ab", r_d * act, self.r_direct)
        out = out + np.einsum("k,kab->ab", (r_1 * act).sum(axis=1), self.r_ris) if self.K else out
        return out

    def t_bar(self, t_d, t_2):
        # I + Q_m (t_dm T_dm + sum_k t2_km T_km), shape (M, nt, nt)
        out = self.eye_t + t_d[:, None, None] * self.qt_direct
        if self.K:
            out = out + np.einsum("km,kmab->mab", t_2, self.qt_ris)
        return out

    def sweep(self, x: FixedPointState):
        act = self.mask
        nt = self.nt
        r_inv = np.linalg.inv(self.r_bar(x.r_d, x.r_1))
        t_d = np.einsum("ab,mba->m", r_inv, self.r_direct).real / nt * act
        t_1 = np.einsum("ab,kba->k", r_inv, self.r_ris).real / nt
        t_bar = self.t_bar(x.t_d, x.t_2)
        t_inv = np.linalg.inv(t_bar)
        r_d = np.einsum("mab,mba->m", t_inv, self.qt_direct).real / nt * act
        if self.K:
            r_2 = np.einsum("mab,kmba->km", t_inv, self.qt_ris).real / nt * act
            c = x.t_1[:, None] * x.r_2
            g = (self.lam / (1.0 + c[..., None] * self.lam)).sum(axis=-1) / nt
            t_2 = x.t_1[:, None] * g * act
            r_1 = x.r_2 * g * act
        else:
            r_2 = t_2 = r_1 = np.zeros((0, self.M))
        return FixedPointState(t_d, t_1, t_2, r_d, r_1, r_2)


def _unpack(v, M, K):
    sizes = [M, K, K * M, M, K * M, K * M]
    parts = np.split(np.asarray(v, dtype=float), np.cumsum(sizes)[:-1])
    return FixedPointState(parts[0], parts[1], parts[2].reshape(K, M), parts[3],
                           parts[4].reshape(K, M), parts[5].reshape(K, M))


def _newton_polish(system: _System, x, tol, steps=30):
    """Newton iterations on ``F(x) - x`` with a forward-difference Jacobian.

    Used near a solution where the damped map contracts slowly (strongly
    correlated surfaces give Jacobian eigenvalues close to 1).  Returns the
    converged state or ``None``.  Near-singular Jacobians make the first
    steps overshoot, so the residual may grow transiently.
    """
    M, K = system.M, system.K
    n = x.size
    start = None
    for it in range(1, steps + 1):
        d = system.sweep(_unpack(x, M, K)).vector() - x
        if not np.all(np.isfinite(d)):
            return None
        res = float(np.max(np.abs(d), initial=0.0))
        start = res if start is None else start
        if res <= tol:
            return replace(_unpack(x + d, M, K), residual=res, iterations=it)
        if res > 1e4 * max(start, tol):
            return None
        J = np.empty((n, n))
        for j in range(n):
            h = 1e-7 * max(1.0, abs(x[j]))
            e = np.zeros(n)
            e[j] = h
            J[:, j] = (system.sweep(_unpack(x + e, M, K)).vector() - x - e - d) / h
        step, *_ = np.linalg.lstsq(J, -d, rcond=None)
        x = np.maximum(x + step, 0.0)
    return None


def _iterate(system: _System, tol, max_iter, init, damping, memory=5):
    """Damped Picard iteration, optionally Anderson-accelerated.

    With ``memory > 0`` each step mixes the last ``memory`` damped updates
    by least squares on their residuals.  A mixed point that leaves the
    nonnegative orthant falls back to the plain damped step, and a residual
    ten times above the best so far clears the history and halves ``a``.
    Once the residual is below ``_POLISH_BELOW``, a Newton polish is
    attempted from the best iterate, first after ``_POLISH_EVERY``
    iterations and with the interval doubling after every failure.
    """
    if tol <= 0:
        raise ConfigError("tolerance must be positive", "tol")
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]", "damping")
    M, K = system.M, system.K
    x = (init if init is not None else FixedPointState.zeros(M, K)).vector()
    alpha = damping
    prev = best = math.inf
    res = math.inf
    last_gain = 0
    xs, gs = [], []  # history of iterates and damped images
    best_x = x
    polish_gap = next_polish = _POLISH_EVERY
    for it in range(1, max_iter + 1):
        fx = system.sweep(_unpack(x, M, K)).vector()
        diff = fx - x
        if not np.all(np.isfinite(diff)):
            raise NumericalError(f"fixed-point iteration produced non-finite values at iteration {it}")
        res = float(np.max(np.abs(diff), initial=0.0))
        if res <= tol:
            return replace(_unpack(fx, M, K), residual=res, iterations=it)
        if memory == 0:
            if res > prev:
                alpha = max(0.5 * alpha, _MIN_DAMPING)
        elif res > 10.0 * best:
            xs.clear(), gs.clear()
            alpha = max(0.5 * alpha, _MIN_DAMPING)
        prev = res
        if res < best:
            best, best_x, last_gain = res, x, it
        if it >= next_polish and best < _POLISH_BELOW:
            done = _newton_polish(system, best_x, tol)
            if done is not None:
                return replace(done, iterations=it + done.iterations)
            polish_gap *= 2
            next_polish = it + polish_gap
        elif memory and it - last_gain > 100:
            # stagnating: restart the history from the current point
            xs.clear(), gs.clear()
            last_gain = it
        g = x + alpha * diff
        nxt = g
        if memory > 0:
            xs.append(x)
            gs.append(g)
            if len(xs) > memory + 1:
                xs.pop(0), gs.pop(0)
            if len(xs) > 1:
                F = np.array([gg - xx for gg, xx in zip(gs, xs)]).T
                dF = np.diff(F, axis=1)
                dG = np.diff(np.array(gs).T, axis=1)
                gamma, *_ = np.linalg.lstsq(dF, F[:, -1], rcond=None)
                cand = g - dG @ gamma
                if np.all(cand >= 0) and np.all(np.isfinite(cand)):
                    nxt = cand
                else:
                    xs.clear(), gs.clear()
        x = nxt
    if best < _POLISH_BELOW:
        done = _newton_polish(system, best_x, tol)
        if done is not None:
            return replace(done, iterations=max_iter + done.iterations)
    raise ConvergenceError("fixed-point iteration did not converge", residual=res, iterations=max_iter)


def solve_fixed_point(corr: CorrelationSet, Q, phases, active: Sequence[int] | None = None,
                      tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, init: FixedPointState | None = None,
                      damping=0.5, lam=None, memory=5) -> FixedPointState:
    """Damped Picard iteration ``x <- (1 - a) x + a F(x)`` from ``init`` (zeros).

    ``a`` starts at ``damping``.  ``memory`` sets the Anderson history
    length; with ``memory=0`` (plain damped iteration) ``a`` is halved
    whenever the residual ``max |F(x) - x|`` grows, otherwise only when it
    jumps tenfold above the best so far.  ``lam`` may carry precomputed
    :func:`sigma_eigenvalues` for ``phases``.
    """
    if lam is None:
        lam = sigma_eigenvalues(corr, phases)
    return _iterate(_System(corr, Q, lam, active), tol, max_iter, init, damping, memory)


def _mean_total(system: _System, s: FixedPointState):
    act = system.mask
    nt = system.nt
    r_bar = system.r_bar(s.r_d, s.r_1)
    try:
        chol = np.linalg.cholesky(r_bar)
    except np.linalg.LinAlgError:
        raise NumericalError("I + R~ is not positive definite; inconsistent state") from None
    total = 2.0 * np.sum(np.log(np.abs(np.diag(chol))))
    t_bar = system.t_bar(s.t_d, s.t_2)
    for m in np.flatnonzero(act):
        sign, logdet = np.linalg.slogdet(t_bar[m])
        if sign.real <= 0 or abs(sign.imag) > 1e-9:
            raise NumericalError(f"I + Q T~ for TX {m} is not positive definite")
        total += logdet
    if system.K:
        c = s.t_1[:, None] * s.r_2
        total += float(np.sum(np.log1p(c[..., None] * system.lam) * act[None, :, None]))
        total -= nt * float(np.sum((s.r_1 * s.t_1[:, None] + s.r_2 * s.t_2) * act))
    total -= nt * float(np.sum(s.r_d * s.t_d * act))
    return float(total)


def mean_mi(corr: CorrelationSet, Q, phases, active=None, state: FixedPointState | None = None,
            lam=None, **solver) -> MIStats:
    """Asymptotic ergodic sum-MI of the TXs in ``active`` (all by default).

    ``state`` must be the converged fixed point for the same inputs; it is
    solved here when omitted.
    """
    if lam is None:
        lam = sigma_eigenvalues(corr, phases)
    system = _System(corr, Q, lam, active)
    if state is None:
        state = _iterate(system, solver.get("tol", DEFAULT_TOL), solver.get("max_iter", DEFAULT_MAX_ITER),
                         solver.get("init"), solver.get("damping", 0.5), solver.get("memory", 5))
    total = _mean_total(system, state)
    return MIStats(total / corr.nt, total, None, tuple(int(m) for m in np.flatnonzero(system.mask)))


def assemble_lambda(corr: CorrelationSet, Q, phases, active=None, state: FixedPointState | None = None,
                    lam=None) -> np.ndarray:
    """Fluctuation matrix over the active TXs.

    Block order ``[t_d, t_1, t_2, r_d, r_1, r_2]``; within the (k, m) blocks
    the index is ``m * K + k`` (m-major).  ``t_1`` gets one copy per (k, m).
    """
    if lam is None:
        lam = sigma_eigenvalues(corr, phases)
    system = _System(corr, Q, lam, active)
    if state is None:
        state = _iterate(system, DEFAULT_TOL, DEFAULT_MAX_ITER, None, 0.5)
    act = np.flatnonzero(system.mask)
    M, K, nt = len(act), system.K, system.nt
    MK = M * K
    try:
        r_inv = np.linalg.inv(system.r_bar(state.r_d, state.r_1))
        t_inv = np.linalg.inv(system.t_bar(state.t_d, state.t_2))
    except np.linalg.LinAlgError:
        raise NumericalError("singular I + R~ or I + Q T~") from None

    a_d = np.einsum("ab,mbc->mac", r_inv, system.r_direct[act])          # R^-1 R_dm
    a_k = np.einsum("ab,kbc->kac", r_inv, system.r_ris)                  # R^-1 R_k
    b_d = np.einsum("mab,mbc->mac", t_inv[act], system.qt_direct[act])   # T^-1 Q_m T_dm
    b_k = np.einsum("mab,kmbc->kmac", t_inv[act], system.qt_ris[:, act]) if K else np.zeros((0, M, nt, nt))

    def pair(i):  # (k, m) of a flattened m-major index
        return i % K, i // K

    m_dr = -np.einsum("mab,nba->mn", a_d, a_d).real / nt
    m_dt = -np.diag(np.einsum("mab,mba->m", b_d, b_d).real) / nt
    m_1r = np.zeros((MK, MK))
    m_1dr = np.zeros((MK, M))
    m_2t = np.zeros((MK, MK))
    m_2dt = np.zeros((MK, M))
    m_1t = np.zeros((MK, MK))
    m_2r = np.zeros((MK, MK))
    m_12 = np.zeros((MK, MK))
    kk = np.einsum("kab,lba->kl", a_k, a_k).real / nt if K else None
    kd = np.einsum("kab,mba->km", a_k, a_d).real / nt if K else None
    for i in range(MK):
        k, mi = pair(i)
        m = act[mi]
        c = state.t_1[k] * state.r_2[k, m]
        lam_km = lam[k, m]
        den = (1.0 + c * lam_km) ** 2
        s2 = np.sum(lam_km**2 / den) / nt
        s1 = np.sum(lam_km / den) / nt
        m_1t[i, i] = -state.r_2[k, m] ** 2 * s2
        m_2r[i, i] = -state.t_1[k] ** 2 * s2
        m_12[i, i] = s1
        m_1dr[i, :] = -kd[k, :]
        m_2dt[i, mi] = -np.trace(b_k[k, mi] @ b_d[mi]).real / nt
        for j in range(MK):
            k2, mj = pair(j)
            m_1r[i, j] = -kk[k, k2]
            if mj == mi:
                m_2t[i, j] = -np.trace(b_k[k, mi] @ b_k[k2, mi]).real / nt

    eye_m, eye_mk = np.eye(M), np.eye(MK)
    z = np.zeros
    return np.block([
        [m_dt, z((M, MK)), m_2dt.T, -eye_m, z((M, MK)), z((M, MK))],
        [z((MK, M)), m_1t, z((MK, MK)), z((MK, M)), -eye_mk, m_12],
        [m_2dt, z((MK, MK)), m_2t, z((MK, M)), z((MK, MK)), -eye_mk],
        [-eye_m, z((M, MK)), z((M, MK)), m_dr, m_1dr.T, z((M, MK))],
        [z((MK, M)), -eye_mk, z((MK, MK)), m_1dr, m_1r, z((MK, MK))],
        [z((MK, M)), m_12, -eye_mk, z((MK, M)), z((MK, MK)), m_2r],
    ])


def variance_mi(lambda_matrix) -> float:
    """``-log`` of the fluctuation determinant, sign-normalized.

    The matrix has ``2N`` rows pairing each ``t`` with an ``r`` through a
    ``-I`` block, so with vanishing couplings its determinant is
    ``(-1)**N``.  The variance is ``-log((-1)**N det)``; any other sign
    means the Gaussian approximation has broken down.
    """
    lam = np.asarray(lambda_matrix, dtype=float)
    n2 = lam.shape[0]
    if lam.ndim != 2 or lam.shape[1] != n2 or n2 % 2:
        raise ConfigError("fluctuation matrix must be square with even size", "lambda_matrix")
    sign, logdet = np.linalg.slogdet(lam)
    sign *= (-1) ** (n2 // 2)
    if sign <= 0 or not np.isfinite(logdet):
        raise DegenerateVarianceError(f"normalized fluctuation determinant is not positive (sign={sign:+.0f})")
    return float(-logdet)


def gaussian_outage(stats: MIStats, rate_threshold):
    """``P(I < threshold)`` under the Gaussian law with the analytic moments.

    Uses the complementary error function (``scipy.special.erfc``, which
    wraps the Cephes implementation).
    """
    if stats.variance is None or not stats.variance > 0:
        raise DegenerateVarianceError("Gaussian outage needs a positive variance")
    z = (np.asarray(rate_threshold, dtype=float) - stats.mean_total) / math.sqrt(stats.variance)
    p = 0.5 * special.erfc(-z / math.sqrt(2.0))
    return float(p) if np.ndim(p) == 0 else p


def analyze(corr: CorrelationSet, Q, phases, active=None, variance=True, tol=DEFAULT_TOL,
            max_iter=DEFAULT_MAX_ITER, init=None):
    """Solve, then evaluate the mean and (optionally) the variance.

    Returns ``(MIStats, FixedPointState)``.
    """
    lam = sigma_eigenvalues(corr, phases)
    state = solve_fixed_point(corr, Q, phases, active, tol=tol, max_iter=max_iter, init=init, lam=lam)
    stats = mean_mi(corr, Q, phases, active, state, lam=lam)
    if variance:
        var = variance_mi(assemble_lambda(corr, Q, phases, active, state, lam=lam))
        stats = MIStats(stats.mean_per_tx_antenna, stats.mean_total, var, stats.active_set)
    return stats, state
