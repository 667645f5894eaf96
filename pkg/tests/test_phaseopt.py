import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ris_capkit import detequiv as de
from ris_capkit import phaseopt as po
from ris_capkit.correlation import build_correlation_set
from ris_capkit.errors import ConfigError
from ris_capkit.phases import PhaseConfig, quantize_phases
from ris_capkit.scenario import AngularSpec, table1_scenario

from conftest import small_system

# ------------------------------------------------------------- quantization


def test_quantize_examples():
    q1 = quantize_phases(np.array([[0.1, 3.0]]), 1)
    np.testing.assert_allclose(q1.phases, [[0.0, math.pi]])
    assert q1.quantization_bits == 1
    np.testing.assert_allclose(quantize_phases([[math.pi / 4 + 0.01]], 2).phases, [[math.pi / 2]])
    np.testing.assert_allclose(quantize_phases([[-0.2]], 2).phases, [[0.0]])
    with pytest.raises(ConfigError):
        quantize_phases([[0.0]], 0)


@given(hnp.arrays(np.float64, (2, 7), elements=st.floats(-50, 50)), st.integers(1, 6))
def test_quantize_idempotent_and_on_lattice(ph, bits):
    q = quantize_phases(ph, bits)
    assert quantize_phases(q, bits) == q
    step = 2 * math.pi / 2**bits
    j = q.phases / step
    np.testing.assert_allclose(j, np.round(j), atol=1e-9)
    # nearest lattice point: the circular error is at most half a step
    err = np.abs(np.angle(np.exp(1j * (q.phases - ph))))
    assert np.all(err <= step / 2 + 1e-9)


def test_phase_config_invariants():
    p = PhaseConfig(np.array([0.0, 1.0]))
    assert p.phases.shape == (1, 2) and p.num_riss == 1 and p.ns == 2
    np.testing.assert_allclose(np.abs(p.reflection), 1.0)
    with pytest.raises(ValueError):
        p.phases[0, 0] = 1.0
    with pytest.raises(ConfigError):
        PhaseConfig(np.array([[0.3]]), quantization_bits=1)
    with pytest.raises(ConfigError):
        PhaseConfig(np.array([[np.nan]]))
    assert PhaseConfig.identity(2, 3) == PhaseConfig(np.zeros((2, 3)))


# -------------------------------------------------------------------- kappa


def test_kappa_matched_phases():
    cfg = table1_scenario(ns=25)
    dq, x = cfg.delta_q[0, 0], cfg.positions
    assert po.kappa(x @ dq, dq, x) == pytest.approx(1.0)


def test_kappa_single_element():
    dq, x = np.array([1.0, 2.0, 0.5]), np.array([[0.3, -0.1, 0.0]])
    assert po.kappa([0.7], dq, x) == pytest.approx(np.exp(1j * (0.7 - dq @ x[0])))


def test_kappa_random_phases_mean_power():
    cfg = table1_scenario(ns=400)
    rng = np.random.default_rng(0)
    ph = rng.uniform(0, 2 * math.pi, (10_000, 400))
    k2 = np.abs(po.kappa(ph, cfg.delta_q[0, 0], cfg.positions)) ** 2
    assert k2.mean() == pytest.approx(1 / 400, rel=0.05)


# ----------------------------------------------------------------- rank one


def test_priority_terms():
    assert po.priority_terms(None, 3) == [(1.0, (0, 1, 2))]
    terms = po.priority_terms([0.7, 0.3], 2)
    assert [t[1] for t in terms] == [(0,), (0, 1)]
    np.testing.assert_allclose([t[0] for t in terms], [0.4, 0.3])
    assert po.priority_terms([0.5, 0.5], 2, order=(1, 0)) == [(0.5, (1, 0))]
    for bad in ([0.3, 0.7], [0.5, 0.6], [-0.1, 1.1]):
        with pytest.raises(ConfigError):
            po.priority_terms(bad, 2)
    with pytest.raises(ConfigError):
        po.priority_terms([0.5, 0.5], 2, order=(0, 0))


def test_rank_one_objective_zero_kappa():
    # alternating phases on a 2x2 broadside grid cancel the array factor
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    dq = np.zeros((1, 1, 3))
    assert po.rank_one_objective([[0, math.pi, 0, math.pi]], np.ones((1, 1)), dq, x) == pytest.approx(0, abs=1e-15)


def test_rank_one_objective_single_term():
    cfg = table1_scenario(num_txs=1, ns=16)
    dq, x = cfg.delta_q, cfg.positions
    ph = (x @ dq[0, 0])[None]
    c = np.array([[0.3]])
    assert po.rank_one_objective(ph, c, dq, x, po.priority_terms([1.0], 1)) == pytest.approx(math.log1p(256 * 0.3))


def test_rank_one_gradient_finite_differences():
    cfg = table1_scenario(num_riss=2, ns=16)
    rng = np.random.default_rng(2)
    ph = rng.uniform(0, 6, (2, 16))
    c = rng.uniform(0.01, 0.2, (2, 2, 2))
    terms = po.priority_terms([0.6, 0.4], 2)
    g = po.rank_one_gradient(ph, c, cfg.delta_q, cfg.positions, terms)
    h = 1e-6
    for k, n in [(0, 0), (1, 5), (0, 15), (1, 9)]:
        e = np.zeros_like(ph)
        e[k, n] = h
        fd = (po.rank_one_objective(ph + e, c, cfg.delta_q, cfg.positions, terms)
              - po.rank_one_objective(ph - e, c, cfg.delta_q, cfg.positions, terms)) / (2 * h)
        assert g[k, n] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_rank_one_equals_full_ris_term_at_zero_spread():
    cfg = table1_scenario(sigma_deg=0.0, num_riss=2, ns=25)
    corr = build_correlation_set(cfg)
    ph = np.random.default_rng(4).uniform(0, 6, (2, 25))
    Q = de.default_input_covariance(2, 4, cfg.snr)
    lam = de.sigma_eigenvalues(corr, ph)
    s = de.solve_fixed_point(corr, Q, ph, lam=lam)
    c = s.t_1[:, None] * s.r_2
    full_term = float(np.sum(np.log1p(c[..., None] * lam)))
    assert po.rank_one_objective(ph, c, cfg.delta_q, cfg.positions) == pytest.approx(full_term, rel=1e-8)


def test_semi_ascent_single_tx_matches_phases():
    cfg = table1_scenario(num_txs=1, ns=25)
    dq, x = cfg.delta_q, cfg.positions
    ph, reps = po.semi_optimal_ascend(np.zeros((1, 25)), np.array([[[0.05]]]), dq, x)
    assert abs(po.kappa(ph.phases[0], dq[0, 0], x)) >= 0.999
    diff = np.angle(np.exp(1j * (ph.phases[0] - x @ dq[0, 0])))
    assert np.ptp(np.angle(np.exp(1j * (diff - diff[0])))) < 0.1
    traj = reps[0].trajectory
    assert all(b >= a - 1e-12 for a, b in zip(traj, traj[1:]))


def test_semi_optimal_beats_identity_small_spread():
    cfg, corr, Q = small_system(sigma_deg=0.5, ns=25)
    ident = po.weighted_objective(corr, Q, PhaseConfig.identity(1, 25))
    _, _, rep = po.semi_optimal_optimize(corr, Q, cfg.delta_q, cfg.positions)
    assert rep.objective > ident + 1.0


def test_zero_delta_q_keeps_identity():
    spec = AngularSpec.from_degrees(20.0, 50.0, 0.0)
    cfg = table1_scenario(num_txs=1, ns=16).replace(incoming=((spec,),), outgoing=(spec,))
    assert np.allclose(cfg.delta_q, 0)
    ph, _ = po.semi_optimal_ascend(np.zeros((1, 16)), np.array([[[0.1]]]), cfg.delta_q, cfg.positions)
    np.testing.assert_allclose(np.angle(np.exp(1j * ph.phases)), 0.0, atol=5e-3)


# --------------------------------------------------------------------- full


def test_full_gradient_finite_differences(tiny_k2):
    _, corr, Q = tiny_k2
    rng = np.random.default_rng(6)
    ph = rng.uniform(0, 6, (2, 16))
    mu = [0.7, 0.3]
    g = po.phase_gradient(corr, Q, ph, mu)
    h = 1e-6
    for k, n in [(0, 1), (1, 2), (0, 11), (1, 15)]:
        e = np.zeros_like(ph)
        e[k, n] = h
        fd = (po.weighted_objective(corr, Q, ph + e, mu) - po.weighted_objective(corr, Q, ph - e, mu)) / (2 * h)
        assert g[k, n] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_weighted_objective_reductions(tiny):
    _, corr, Q = tiny
    ph = np.random.default_rng(1).uniform(0, 6, (1, 16))
    single = de.mean_mi(corr, Q, ph, [0]).mean_total
    assert po.weighted_objective(corr, Q, ph, [1.0, 0.0]) == pytest.approx(single, rel=1e-12)
    total = de.mean_mi(corr, Q, ph).mean_total
    assert po.weighted_objective(corr, Q, ph, [0.5, 0.5]) == pytest.approx(total / 2, rel=1e-12)
    assert po.weighted_objective(corr, Q, ph) == pytest.approx(total, rel=1e-12)


def test_full_ascent_improves_monotonically(tiny):
    _, corr, Q = tiny
    ph, states, rep = po.full_gradient_ascend(corr, Q)
    traj = rep.trajectory
    assert all(b >= a - 1e-9 for a, b in zip(traj, traj[1:]))
    assert rep.objective == pytest.approx(po.weighted_objective(corr, Q, ph), rel=1e-9)
    assert rep.objective > traj[0]
    assert len(states) == 1
    assert rep.rows()[0][0] == 0


def test_full_matches_semi_at_zero_spread():
    cfg, corr, Q = small_system(sigma_deg=0.0, ns=16)
    _, _, semi = po.semi_optimal_optimize(corr, Q, cfg.delta_q, cfg.positions)
    _, _, full = po.full_optimum(corr, Q, cfg.delta_q, cfg.positions)
    assert full.objective >= semi.objective - 1e-9
    assert abs(full.objective - semi.objective) / full.objective < 0.01


def test_single_tx_single_ris_full_equals_semi_phases():
    cfg, corr, Q = small_system(sigma_deg=0.0, num_txs=1, ns=16)
    semi, _, _ = po.semi_optimal_optimize(corr, Q, cfg.delta_q, cfg.positions)
    full, _, _ = po.full_gradient_ascend(corr, Q, phases0=semi)
    d = np.angle(np.exp(1j * (full.phases - semi.phases)))
    assert np.ptp(np.angle(np.exp(1j * (d - d[0, 0])))) < 1e-3


def test_ris_permutation_symmetry():
    cfg = table1_scenario(sigma_deg=5.0, num_riss=2, ns=16)
    out2 = dataclasses.replace(cfg.outgoing[0], azimuth=math.radians(40.0))
    a = cfg.replace(outgoing=(cfg.outgoing[0], out2))
    b = cfg.replace(outgoing=(out2, cfg.outgoing[0]))
    Q = de.default_input_covariance(2, 4, cfg.snr)
    pa, _, ra = po.full_gradient_ascend(build_correlation_set(a), Q)
    pb, _, rb = po.full_gradient_ascend(build_correlation_set(b), Q)
    assert ra.objective == pytest.approx(rb.objective, rel=1e-9)
    np.testing.assert_allclose(pa.phases, pb.phases[::-1], atol=1e-6)


def test_two_ris_full_optimum_above_baselines(tiny_k2):
    cfg, corr, Q = tiny_k2
    ident = po.weighted_objective(corr, Q, PhaseConfig.identity(2, 16))
    pair = po.weighted_objective(corr, Q, po.independent_pairing(cfg.delta_q, cfg.positions))
    _, _, rep = po.full_optimum(corr, Q, cfg.delta_q, cfg.positions)
    assert ident <= rep.objective + 1e-6 and pair <= rep.objective + 1e-6


def test_identity_floor(tiny):
    cfg, corr, Q = tiny
    ident = po.weighted_objective(corr, Q, PhaseConfig.identity(1, 16))
    _, _, rep = po.full_optimum(corr, Q, cfg.delta_q, cfg.positions, starts=("pairing",), identity_floor=True)
    assert rep.objective >= ident - 1e-9
    with pytest.raises(ConfigError):
        po.full_optimum(corr, Q, cfg.delta_q, cfg.positions, starts=("bogus",))


def test_pairing():
    cfg = table1_scenario(num_riss=2, ns=16)
    p = po.independent_pairing(cfg.delta_q, cfg.positions)
    np.testing.assert_allclose(p.phases[1], cfg.positions @ cfg.delta_q[1, 1])
    with pytest.raises(ConfigError):
        po.independent_pairing(table1_scenario(num_riss=2, num_txs=1, ns=16).delta_q, cfg.positions)


def test_random_phases_reproducible():
    assert po.random_phases(2, 5, 3) == po.random_phases(2, 5, 3)
    assert po.random_phases(2, 5, 3).phases.shape == (2, 5)
