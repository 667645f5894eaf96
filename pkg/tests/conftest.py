import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ris_capkit.correlation import CorrelationSet, build_correlation_set
from ris_capkit.detequiv import default_input_covariance
from ris_capkit.scenario import table1_scenario

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def small_system(sigma_deg=10.0, num_riss=1, num_txs=2, ns=16, nr=8, **changes):
    cfg = table1_scenario(sigma_deg=sigma_deg, num_riss=num_riss, num_txs=num_txs, ns=ns, nr=nr)
    if changes:
        cfg = cfg.replace(**changes)
    corr = build_correlation_set(cfg)
    Q = default_input_covariance(cfg.num_txs, cfg.nt, cfg.snr)
    return cfg, corr, Q


def identity_corr(M, K, nt, nr, ns, rho_d=0.0):
    eye = lambda n, *lead: np.broadcast_to(np.eye(n, dtype=complex), (*lead, n, n)).copy()  # noqa: E731
    return CorrelationSet(eye(nr, M), eye(nt, M), eye(nr, K), eye(ns, K), eye(ns, K, M), eye(nt, K, M), rho_d)


def random_psd(n, rng, rank=None):
    X = rng.standard_normal((n, rank or n)) + 1j * rng.standard_normal((n, rank or n))
    A = X @ X.conj().T
    return A * n / np.trace(A).real


def random_corr(M, K, nt, nr, ns, rho_d, rng):
    return CorrelationSet(
        np.array([random_psd(nr, rng) for _ in range(M)]),
        np.array([random_psd(nt, rng) for _ in range(M)]),
        np.array([random_psd(nr, rng) for _ in range(K)]),
        np.array([random_psd(ns, rng) for _ in range(K)]),
        np.array([[random_psd(ns, rng) for _ in range(M)] for _ in range(K)]),
        np.array([[random_psd(nt, rng) for _ in range(M)] for _ in range(K)]),
        rho_d,
    )


@pytest.fixture(scope="session")
def tiny():
    """M=2, K=1, ns=16, sigma=10 deg."""
    return small_system()


@pytest.fixture(scope="session")
def tiny_k2():
    """M=2, K=2, ns=16, sigma=5 deg."""
    return small_system(sigma_deg=5.0, num_riss=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
