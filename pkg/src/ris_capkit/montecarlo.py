"""Monte Carlo oracle: Kronecker-correlated channel draws and exact MI samples.

The Gaussian matrices of sample ``i`` come from Philox streams keyed by
``seed`` with counter ``(0, i, role, 0)``, one stream per (sample, link kind,
RIS) holding the matrices of every TX, so a sample does not depend on how
many others are drawn, in which order, or by which worker.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .correlation import CorrelationSet, matrix_sqrt_hermitian
from .errors import ConfigError
from .phases import as_phase_array

__all__ = [
    "ChannelSampler",
    "EmpiricalDistribution",
    "sample_channels",
    "mi_sample",
    "mi_statistics",
    "mi_samples",
    "subset_means",
    "write_samples_csv",
]

BLOCK_SIZE = 256
_ROLE_DIRECT, _ROLE_RIS_RX, _ROLE_RIS_TX = 1, 2, 3
_SHARED = 0xFFFF


def _role(kind, k, tag=0):
    return (kind << 32) | (k << 16) | tag


def _cn(seed, sample, role, shape):
    """Standard complex Gaussian block (unit total variance per entry)."""
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, sample, role, 0]))
    z = gen.standard_normal((2, *shape))
    return (z[0] + 1j * z[1]) * math.sqrt(0.5)


class ChannelSampler:
    """Draws ``G_tot,m = G_dm + sum_k G_rk Phi_k G_tkm`` for every TX.

    Factors: ``G_dm = sqrt(rho_d) R_dm^(1/2) W T_dm^(T/2)``,
    ``G_tkm = S_tkm^(1/2) W T_km^(T/2)``, ``G_rk = R_k^(1/2) W S_rk^(1/2)``,
    each divided by ``sqrt(nt)``.  With ``shared_ris_rx=False`` (default)
    the RIS-to-RX matrix is drawn independently for every TX; with ``True``
    one draw per RIS is shared by all TXs.
    """

    def __init__(self, corr: CorrelationSet, phases, shared_ris_rx=False):
        self.corr = corr
        self.shared = bool(shared_ris_rx)
        ph = as_phase_array(phases)
        K, M, ns = corr.num_riss, corr.num_txs, corr.ns
        if K and ph.shape != (K, ns):
            raise ConfigError(f"phases shape {ph.shape} != {(K, ns)}", "phases")
        self.K, self.M, self.nt, self.nr, self.ns = K, M, corr.nt, corr.nr, ns
        self.rho_d = corr.direct_snr_ratio
        self.rd_half = np.array([matrix_sqrt_hermitian(r) for r in corr.r_direct])
        self.td_half_t = np.array([matrix_sqrt_hermitian(t).T for t in corr.t_direct])
        self.r_half = np.array([matrix_sqrt_hermitian(r) for r in corr.r_ris]).reshape(K, self.nr, self.nr)
        self.tk_half_t = np.array(
            [[matrix_sqrt_hermitian(corr.t_ris[k, m]).T for m in range(M)] for k in range(K)]
        ).reshape(K, M, self.nt, self.nt)
        sr_half = [matrix_sqrt_hermitian(s) for s in corr.s_r]
        st_half = corr.s_t_sqrt if K else np.zeros((0, M, ns, ns))
        refl = np.exp(1j * ph) if K else np.zeros((0, ns))
        # S_r^(1/2) Phi S_t^(1/2), the fixed middle of every cascaded term
        self.middle = np.array(
            [[(sr_half[k] * refl[k][None, :]) @ st_half[k, m] for m in range(M)] for k in range(K)]
        ).reshape(K, M, ns, ns)

    def draw(self, seed, samples: Sequence[int]) -> np.ndarray:
        """Channels for the given sample indices, shape ``(len, M, nr, nt)``."""
        idx = [int(i) for i in samples]
        B, M, K, nr, nt, ns = len(idx), self.M, self.K, self.nr, self.nt, self.ns
        G = np.zeros((B, M, nr, nt), dtype=complex)
        scale = 1.0 / math.sqrt(nt)
        if self.rho_d > 0:
            w = np.array([_cn(seed, i, _role(_ROLE_DIRECT, 0), (M, nr, nt)) for i in idx])
            G += math.sqrt(self.rho_d) * scale * (self.rd_half[None] @ w @ self.td_half_t[None])
        for k in range(K):
            if self.shared:
                w_r = np.array([_cn(seed, i, _role(_ROLE_RIS_RX, k, _SHARED), (nr, ns)) for i in idx])
                w_r = np.broadcast_to(w_r[:, None], (B, M, nr, ns))
            else:
                w_r = np.array([_cn(seed, i, _role(_ROLE_RIS_RX, k), (M, nr, ns)) for i in idx])
            w_t = np.array([_cn(seed, i, _role(_ROLE_RIS_TX, k), (M, ns, nt)) for i in idx])
            inner = w_r @ (self.middle[k][None] @ w_t)
            G += (scale * scale) * (self.r_half[k] @ inner @ self.tk_half_t[k][None])
        return G


def sample_channels(corr: CorrelationSet, phases, seed, samples, shared_ris_rx=False):
    """Effective channels ``(n, M, nr, nt)`` for ``samples`` (an int count or index list)."""
    if isinstance(samples, (int, np.integer)):
        samples = range(int(samples))
    return ChannelSampler(corr, phases, shared_ris_rx).draw(seed, samples)


def mi_sample(G, Q, active=None):
    """``log det(I + sum_{m in active} G_m Q_m G_m^H)`` in nats.

    ``G`` has shape ``(..., M, nr, nt)`` and ``Q`` ``(M, nt, nt)``; leading
    axes are batched.  An empty ``active`` gives zero.
    """
    G = np.asarray(G)
    Q = np.asarray(Q)
    M, nr = G.shape[-3], G.shape[-2]
    idx = list(range(M)) if active is None else sorted(set(int(m) for m in active))
    if any(not 0 <= m < M for m in idx):
        raise ConfigError("TX index out of range", "active")
    if Q.shape != (M, G.shape[-1], G.shape[-1]):
        raise ConfigError(f"Q shape {Q.shape} does not match channels", "Q")
    A = np.broadcast_to(np.eye(nr, dtype=complex), G.shape[:-3] + (nr, nr)).copy()
    for m in idx:
        g = G[..., m, :, :]
        A += g @ Q[m] @ np.swapaxes(g.conj(), -1, -2)
    L = np.linalg.cholesky(0.5 * (A + np.swapaxes(A.conj(), -1, -2)))
    return 2.0 * np.sum(np.log(np.abs(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """MI samples in sample-index order plus their moments."""

    values: np.ndarray
    seed: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ConfigError("need at least two samples", "n_samples")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        s = np.sort(v)
        s.setflags(write=False)
        object.__setattr__(self, "sorted", s)

    @property
    def count(self):
        return self.values.size

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def variance(self):
        return float(np.var(self.values, ddof=1))

    @property
    def std_error(self):
        return math.sqrt(self.variance / self.count)

    def cdf(self, threshold):
        """Fraction of samples ``<= threshold``."""
        p = np.searchsorted(self.sorted, threshold, side="right") / self.count
        return float(p) if np.ndim(p) == 0 else p

    def quantile(self, p):
        return np.quantile(self.sorted, p)

    def __eq__(self, other):
        if not isinstance(other, EmpiricalDistribution):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.values, other.values)

    __hash__ = None


def _block_mi(args):
    corr, phases, Q, active, seed, start, stop, shared = args
    sampler = ChannelSampler(corr, phases, shared)
    return mi_sample(sampler.draw(seed, range(start, stop)), Q, active)


def mi_samples(corr: CorrelationSet, Q, phases, active=None, n_samples=20000, seed=0,
               workers=1, shared_ris_rx=False) -> np.ndarray:
    """Raw MI samples ``0..n_samples-1`` (nats), computed in fixed-size blocks."""
    if n_samples < 1:
        raise ConfigError("must be positive", "n_samples")
    if seed < 0:
        raise ConfigError("must be nonnegative", "seed")
    bounds = [(s, min(s + BLOCK_SIZE, n_samples)) for s in range(0, n_samples, BLOCK_SIZE)]
    Q = np.asarray(Q, dtype=complex)
    if workers <= 1 or len(bounds) == 1:
        sampler = ChannelSampler(corr, phases, shared_ris_rx)
        parts = [mi_sample(sampler.draw(seed, range(a, b)), Q, active) for a, b in bounds]
    else:
        tasks = [(corr, phases, Q, active, seed, a, b, shared_ris_rx) for a, b in bounds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_mi, tasks))
    return np.concatenate(parts)


def subset_means(corr: CorrelationSet, Q, phases, subsets, n_samples=2000, seed=0, shared_ris_rx=False):
    """Sample-mean MI of several TX subsets over the same channel draws."""
    if n_samples < 1:
        raise ConfigError("must be positive", "n_samples")
    subsets = [tuple(s) for s in subsets]
    sampler = ChannelSampler(corr, phases, shared_ris_rx)
    Q = np.asarray(Q, dtype=complex)
    sums = np.zeros(len(subsets))
    for a in range(0, n_samples, BLOCK_SIZE):
        G = sampler.draw(seed, range(a, min(a + BLOCK_SIZE, n_samples)))
        for j, s in enumerate(subsets):
            sums[j] += mi_sample(G, Q, s).sum()
    return dict(zip(subsets, sums / n_samples))


def mi_statistics(corr: CorrelationSet, Q, phases, active=None, n_samples=20000, seed=0,
                  workers=1, shared_ris_rx=False) -> EmpiricalDistribution:
    """Empirical distribution of the sum-MI of ``active`` over ``n_samples`` draws."""
    if n_samples < 2:
        raise ConfigError("must be >= 2", "n_samples")
    vals = mi_samples(corr, Q, phases, active, n_samples, seed, workers, shared_ris_rx)
    return EmpiricalDistribution(vals, int(seed))


def write_samples_csv(dist: EmpiricalDistribution, path=None, header_lines=()):
    """Write ``sample_index,mi_nats`` rows; returns the text."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_index", "mi_nats"])
    for i, v in enumerate(dist.values):
        w.writerow([i, repr(float(v))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
