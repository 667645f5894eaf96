"""Spatial correlation matrices from angular power spectra.

The weight ``w(k) ~ exp(-|k - s0|^2 / (2 sigma^2 k0^2))`` on the sphere
``|k| = k0`` depends only on the polar angle ``g`` measured from ``s0``:
``|k - s0|^2 = 2 k0^2 (1 - cos g)``.  In a frame aligned with ``s0`` the
azimuthal integral of ``exp(i k.d)`` is ``2 pi J0(k0 sin(g) |d_perp|)``,
which leaves a smooth one-dimensional integral over ``g``.  That integral
is evaluated with Gauss-Legendre nodes whose order is doubled until the
entries stop changing.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ConfigError, NumericalError, QuadratureError
from .scenario import ScenarioConfig, wavevector

__all__ = [
    "CorrelationSet",
    "correlation_matrix",
    "steering_vector",
    "matrix_sqrt_hermitian",
    "hermitian_eig",
    "ula_positions",
    "build_correlation_set",
    "dump_correlation_set",
    "load_correlation_set",
]

PSD_RTOL = 1e-10
QUAD_TOL = 1e-8
_QUAD_START = 32
_QUAD_MAX = 8192
# e^-60 ~ 1e-26: weight beyond this exponent is below double precision
_TAIL_EXPONENT = 60.0


@dataclass(frozen=True)
class CorrelationSet:
    """All correlation matrices of the Kronecker channel model.

    Shapes: ``r_direct (M, nr, nr)``, ``t_direct (M, nt, nt)``,
    ``r_ris (K, nr, nr)``, ``s_r (K, ns, ns)``, ``s_t (K, M, ns, ns)``,
    ``t_ris (K, M, nt, nt)``.  The direct-link matrices keep trace ``nr``/``nt``;
    ``direct_snr_ratio`` scales the direct link where it is used.
    """

    r_direct: np.ndarray
    t_direct: np.ndarray
    r_ris: np.ndarray
    s_r: np.ndarray
    s_t: np.ndarray
    t_ris: np.ndarray
    direct_snr_ratio: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def num_txs(self):
        return self.t_direct.shape[0]

    @property
    def num_riss(self):
        return self.s_r.shape[0]

    @property
    def nt(self):
        return self.t_direct.shape[-1]

    @property
    def nr(self):
        return self.r_direct.shape[-1]

    @property
    def ns(self):
        return self.s_r.shape[-1]

    @property
    def r_direct_effective(self):
        """Direct-link receive correlation with the direct SNR ratio folded in."""
        return self.direct_snr_ratio * self.r_direct

    def __post_init__(self):
        M, K = self.t_direct.shape[0], self.s_r.shape[0]
        nt, nr = self.t_direct.shape[-1], self.r_direct.shape[-1]
        ns = self.s_r.shape[-1] if K else self.s_t.shape[-1] if self.s_t.size else 0
        expected = {
            "r_direct": (M, nr, nr),
            "t_direct": (M, nt, nt),
            "r_ris": (K, nr, nr),
            "s_r": (K, ns, ns),
            "s_t": (K, M, ns, ns),
            "t_ris": (K, M, nt, nt),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"shape {getattr(self, name).shape} != {shape}", name)
        if not self.direct_snr_ratio >= 0:
            raise ConfigError("must be nonnegative", "direct_snr_ratio")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def s_t_sqrt(self):
        """Hermitian square roots of ``s_t``, computed once per instance."""
        if "s_t_sqrt" not in self._cache:
            K, M, ns = self.s_t.shape[:3]
            roots = np.empty_like(self.s_t, dtype=complex)
            for k in range(K):
                for m in range(M):
                    roots[k, m] = matrix_sqrt_hermitian(self.s_t[k, m])
            self._cache["s_t_sqrt"] = roots
        return self._cache["s_t_sqrt"]


def ula_positions(n, spacing):
    """Uniform linear array along x, centred at the origin."""
    return np.column_stack([(np.arange(n) - (n - 1) / 2.0) * spacing, np.zeros(n), np.zeros(n)])


def _orthonormal_frame(direction):
    s = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(s[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(s, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(s, e1)
    return s, e1, e2


def _polar_integral(d_par, d_perp, k0, sigma, order):
    """Un-normalized entries for the unique offsets (``d = 0`` gives the normalizer)."""
    inv = 1.0 / sigma**2
    gmax = np.pi if 2.0 * inv <= _TAIL_EXPONENT else np.arccos(1.0 - _TAIL_EXPONENT * sigma**2)
    x, w = np.polynomial.legendre.leggauss(order)
    g = 0.5 * gmax * (x + 1.0)
    cg, sg = np.cos(g), np.sin(g)
    # weight relative to its peak keeps exp() in range for tiny sigma
    weights = 0.5 * gmax * w * np.exp(-(1.0 - cg) * inv) * sg
    phase = np.exp(1j * k0 * np.outer(d_par, cg))
    radial = special.j0(k0 * np.outer(d_perp, sg))
    return (phase * radial) @ weights


def correlation_matrix(positions, mean_direction, sigma, wavelength, tol=QUAD_TOL):
    """Correlation matrix of the field on ``positions`` for a Gaussian angular spectrum.

    Parameters
    ----------
    positions : (n, 3) array
        Element coordinates in meters.
    mean_direction : (3,) array
        Mean wave vector ``s0`` with ``|s0| = 2*pi/wavelength``.
    sigma : float
        Angle spread in radians; ``0`` gives the rank-one plane-wave limit.
    wavelength : float
        Meters.

    Returns
    -------
    (n, n) complex Hermitian matrix with unit diagonal (trace ``n``).
    """
    positions = np.asarray(positions, dtype=float)
    s0 = np.asarray(mean_direction, dtype=float)
    if sigma < 0:
        raise ConfigError("angle spread must be nonnegative", "sigma")
    if not wavelength > 0:
        raise ConfigError("wavelength must be positive", "wavelength")
    k0 = 2.0 * np.pi / wavelength
    if not np.isclose(np.linalg.norm(s0), k0, rtol=1e-9):
        raise ConfigError("|s0| must equal 2*pi/wavelength", "mean_direction")
    n = positions.shape[0]
    if sigma == 0:
        v = np.exp(1j * positions @ s0)
        return np.outer(v, v.conj())

    diffs = positions[:, None, :] - positions[None, :, :]
    # lattice offsets repeat; evaluate each distinct offset once
    key = np.round(diffs.reshape(-1, 3) * 1e9).astype(np.int64)
    flat = np.zeros(key.shape[0], dtype=np.int64)
    for axis in range(3):
        vals_axis, idx = np.unique(key[:, axis], return_inverse=True)
        flat = flat * len(vals_axis) + idx.reshape(-1)
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    d = key[first].astype(float) * 1e-9
    s, _, _ = _orthonormal_frame(s0)
    d_par = d @ s
    d_perp = np.sqrt(np.maximum(np.einsum("ij,ij->i", d, d) - d_par**2, 0.0))
    zero = np.flatnonzero(~key.any(axis=1))[0]
    zero_u = inverse.reshape(-1)[zero]

    order = _QUAD_START
    vals = _polar_integral(d_par, d_perp, k0, sigma, order)
    prev = vals / vals[zero_u].real
    while True:
        order *= 2
        if order > _QUAD_MAX:
            raise QuadratureError(f"no convergence to {tol:g} with {_QUAD_MAX} nodes (sigma={sigma:g})")
        vals = _polar_integral(d_par, d_perp, k0, sigma, order)
        cur = vals / vals[zero_u].real
        if np.max(np.abs(cur - prev)) < tol:
            break
        prev = cur
    S = cur[inverse.reshape(-1)].reshape(n, n)
    S = 0.5 * (S + S.conj().T)
    np.fill_diagonal(S, 1.0)
    w = np.linalg.eigvalsh(S)
    if w[0] < -PSD_RTOL * w[-1]:
        raise NumericalError(f"correlation matrix is indefinite: min eigenvalue {w[0]:.3e}")
    return S


def steering_vector(positions, q):
    """Unit-norm array response ``exp(i q.x_n) / sqrt(n)``."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[0] == 0:
        raise ConfigError("positions must be a nonempty (n, 3) array", "positions")
    n = positions.shape[0]
    return np.exp(1j * positions @ np.asarray(q, dtype=float)) / np.sqrt(n)


def hermitian_eig(a, name="matrix"):
    """Eigen-decomposition of a Hermitian PSD matrix with tolerance clipping.

    Eigenvalues below ``-1e-10 * max`` are an error; smaller negative values
    (rounding) are clipped to zero.
    """
    a = np.asarray(a)
    scale = max(np.max(np.abs(a)), 1e-300) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.conj().T)) > 1e-10 * scale:
        raise NumericalError(f"{name} is not Hermitian")
    w, V = np.linalg.eigh(0.5 * (a + a.conj().T))
    top = max(w[-1], 0.0) if w.size else 0.0
    if w.size and w[0] < -PSD_RTOL * top - 1e-14 * scale:
        raise NumericalError(f"{name} is indefinite: min eigenvalue {w[0]:.3e}, max {top:.3e}")
    return np.clip(w, 0.0, None), V


def matrix_sqrt_hermitian(a):
    """Hermitian PSD square root ``B`` with ``B @ B = a``.

    Eigenvalues below the numerical-rank threshold ``n * eps * max`` are
    treated as zero; their square roots would otherwise turn round-off into
    errors of order ``sqrt(eps)`` on rank-deficient inputs.
    """
    w, V = hermitian_eig(a, "matrix_sqrt_hermitian input")
    if w.size:
        w = np.where(w < w.size * np.finfo(float).eps * w[-1], 0.0, w)
    return (V * np.sqrt(w)) @ V.conj().T


def _antenna_correlation(n, spec, wavelength):
    if spec is None:
        return np.eye(n, dtype=complex)
    pos = ula_positions(n, wavelength / 2.0)
    return correlation_matrix(pos, wavevector(spec.azimuth, spec.elevation, wavelength), spec.spread, wavelength)


def build_correlation_set(config: ScenarioConfig) -> CorrelationSet:
    """Assemble every correlation matrix of ``config``.

    RIS matrices come from the RIS lattice (identities when
    ``ris_correlation`` is ``"uncorrelated"``); TX/RX matrices are identities in
    ``"uncorrelated"`` mode, otherwise half-wavelength ULA angular spectra.
    """
    M, K, nt, nr, ns = config.num_txs, config.num_riss, config.nt, config.nr, config.ns
    pos = config.positions
    cache = {}

    def ris_matrix(q, sigma):
        if config.ris_correlation == "uncorrelated":
            return np.eye(ns, dtype=complex)
        key = (tuple(np.round(q, 12)), float(sigma))
        if key not in cache:
            cache[key] = correlation_matrix(pos, q, sigma, config.wavelength)
        return cache[key]

    s_r = np.array([ris_matrix(config.q_out[k], config.outgoing[k].spread) for k in range(K)]).reshape(K, ns, ns)
    s_t = np.array(
        [[ris_matrix(config.q_in[k, m], config.incoming[k][m].spread) for m in range(M)] for k in range(K)]
    ).reshape(K, M, ns, ns)

    if config.antenna_mode == "uncorrelated":
        rx = np.eye(nr, dtype=complex)
        tx = [np.eye(nt, dtype=complex)] * M
    else:
        rx = _antenna_correlation(nr, config.rx_arrival, config.wavelength)
        tx = [_antenna_correlation(nt, spec, config.wavelength) for spec in config.tx_departure]
    return CorrelationSet(
        r_direct=np.array([rx] * M).reshape(M, nr, nr),
        t_direct=np.array(tx).reshape(M, nt, nt),
        r_ris=np.array([rx] * K).reshape(K, nr, nr),
        s_r=s_r,
        s_t=s_t,
        t_ris=np.array([tx] * K).reshape(K, M, nt, nt),
        direct_snr_ratio=float(config.direct_snr_ratio),
    )


# ---------------------------------------------------------------------------
# binary dump
#
# Layout (all little-endian):
#   magic  b"RISCORR1"
#   f64    direct_snr_ratio
#   u32    number of arrays
#   per array: u16 name length, name (ascii), u32 ndim, ndim x u64 dims,
#              prod(dims) complex128 values in row-major order

_MAGIC = b"RISCORR1"
_ARRAYS = ("r_direct", "t_direct", "r_ris", "s_r", "s_t", "t_ris")


def dump_correlation_set(corr: CorrelationSet, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<dI", corr.direct_snr_ratio, len(_ARRAYS)))
        for name in _ARRAYS:
            arr = np.ascontiguousarray(getattr(corr, name), dtype="<c16")
            raw = name.encode("ascii")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_correlation_set(path) -> CorrelationSet:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ConfigError("not a correlation-set dump", str(path))
    pos = 8
    ratio, count = struct.unpack_from("<dI", data, pos)
    pos += struct.calcsize("<dI")
    arrays = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + length].decode("ascii")
        pos += length
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        nbytes = 16 * int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(data, dtype="<c16", count=nbytes // 16, offset=pos).reshape(dims).astype(complex)
        pos += nbytes
    return CorrelationSet(direct_snr_ratio=ratio, **arrays)
