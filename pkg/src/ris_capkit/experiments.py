"""Figure-style experiments built on the library.

Each runner takes a base scenario and :class:`RunOptions` and returns an
:class:`ExperimentResult` holding CSV-ready tables and a JSON-ready summary.
MI values are total nats per channel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import detequiv, montecarlo, phaseopt, region
from .correlation import build_correlation_set
from .errors import CapkitError, ConfigError
from .phases import PhaseConfig, quantize_phases
from .results import SERIES, TRAJECTORY, Schema, region_schema
from .scenario import (
    ScenarioConfig,
    equidistant_azimuths,
    scenario_hash,
    with_azimuths,
    with_ns,
    with_num_riss,
    with_spread,
)

__all__ = ["RunOptions", "Table", "ExperimentResult", "EXPERIMENTS", "run_experiment"]

PAPER_NS = 400
PAPER_NS_PAIR = (400, 900)
DESK_NS = 64


@dataclass(frozen=True)
class RunOptions:
    """Command-line level knobs.

    ``ns`` beats ``paper_scale``; without either, single-size experiments use
    the scenario's own ``ns`` when ``keep_ns`` is set and ``DESK_NS``
    otherwise, and two-size experiments use the scenario's experiment grids.
    """

    seed: int | None = None
    samples: int | None = None
    workers: int = 1
    paper_scale: bool = False
    ns: int | None = None
    keep_ns: bool = False


@dataclass
class Table:
    suffix: str
    schema: Schema
    rows: list


@dataclass
class ExperimentResult:
    experiment: str
    config: ScenarioConfig
    seed: int
    tables: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def scenario_hash(self):
        return scenario_hash(self.config)

    def table(self, suffix=""):
        for t in self.tables:
            if t.suffix == suffix:
                return t
        raise KeyError(suffix)


def _single_ns(config, opts):
    if opts.ns is not None:
        return opts.ns
    if opts.paper_scale:
        return PAPER_NS
    return config.ns if opts.keep_ns else DESK_NS


def _ns_pair(grid, opts):
    if opts.ns is not None:
        return (opts.ns,)
    return PAPER_NS_PAIR if opts.paper_scale else tuple(grid)


def _seed(config, opts):
    return int(config.seed if opts.seed is None else opts.seed)


def _q(config):
    return detequiv.default_input_covariance(config.num_txs, config.nt, config.snr)


def _opt_kw(config):
    o = config.optimizer
    return dict(step=o.step, tol=o.tol, max_iter=o.max_iter, fp_tol=o.fp_tol, fp_max_iter=o.fp_max_iter)


def _mc_row(x_name, x, name, corr, Q, phases, n, seed, workers):
    d = montecarlo.mi_statistics(corr, Q, phases, None, n, seed, workers)
    return (x_name, x, name, d.mean, 3.0 * d.std_error, "ok"), d


def _trajectory_rows(label, report):
    return [(label, i, v, dphi) for i, v, dphi in report.rows()]


class _flush_on_failure:
    """Turn the running marker into a failure row and attach the partial result.

    The exception still propagates; the CLI writes ``exc.partial_result``.
    """

    def __init__(self, result, rows, x_name):
        self.result, self.rows, self.x_name = result, rows, x_name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or not isinstance(exc, CapkitError):
            return False
        for i, row in enumerate(self.rows):
            if row[-1] == "running":
                self.rows[i] = row[:3] + (math.nan, math.nan, f"failed: {type(exc).__name__}")
        self.result.summary["failed"] = str(exc)
        exc.partial_result = self.result
        return False


# ---------------------------------------------------------------------------


def run_mi_vs_as(config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    """Sum-MI versus angle spread for one and two RISs (experiment ``fig2``)."""
    seed = _seed(config, opts)
    base = with_ns(config, _single_ns(config, opts))
    n_mc = opts.samples or base.experiment.check_samples
    rows, traj = [], []
    ordering_ok = True
    worst_semi_gap = {}
    summary = {"ns": base.ns, "mc_samples": n_mc, "ordering_holds": ordering_ok, "semi_gap": worst_semi_gap}
    result = ExperimentResult("fig2", base, seed, [Table("", SERIES, rows), Table("trajectory", TRAJECTORY, traj)],
                              summary)
    with _flush_on_failure(result, rows, "sigma_deg"):
        _mi_vs_as_points(base, opts, seed, n_mc, rows, traj, worst_semi_gap, summary)
    return result


def _mi_vs_as_points(base, opts, seed, n_mc, rows, traj, worst_semi_gap, summary):
    for K in (1, 2):
        cfg_k = with_num_riss(base, K)
        Q = _q(cfg_k)
        for sigma_deg in cfg_k.experiment.sigma_deg:
            marker = len(rows)
            rows.append(("sigma_deg", sigma_deg, f"pending K={K}", math.nan, math.nan, "running"))
            cfg = with_spread(cfg_k, math.radians(sigma_deg))
            corr = build_correlation_set(cfg)
            dq, pos = cfg.delta_q, cfg.positions
            tag = f"K={K}"
            ident = PhaseConfig.identity(K, cfg.ns)
            v_id = phaseopt.weighted_objective(corr, Q, ident)
            rows.append(("sigma_deg", sigma_deg, f"identity {tag}", v_id, math.nan, "ok"))
            v_pair = math.nan
            if K <= cfg.num_txs:
                v_pair = phaseopt.weighted_objective(corr, Q, phaseopt.independent_pairing(dq, pos))
                rows.append(("sigma_deg", sigma_deg, f"pairing {tag}", v_pair, math.nan, "ok"))
            semi, _, rep_s = phaseopt.semi_optimal_optimize(corr, Q, dq, pos, **_opt_kw(cfg))
            rows.append(("sigma_deg", sigma_deg, f"semi-optimal {tag}", rep_s.objective, math.nan,
                         "ok" if rep_s.converged else "unconverged"))
            full, _, rep_f = phaseopt.full_optimum(corr, Q, dq, pos, starts=("pairing", "semi"),
                                                   identity_floor=True, **_opt_kw(cfg))
            rows.append(("sigma_deg", sigma_deg, f"full {tag}", rep_f.objective, math.nan,
                         "ok" if rep_f.converged else "unconverged"))
            traj += _trajectory_rows(f"{tag} sigma={sigma_deg:g} {rep_f.label}", rep_f)
            for name, ph in (("identity", ident), ("full", full)):
                row, _ = _mc_row("sigma_deg", sigma_deg, f"monte carlo {name} {tag}", corr, Q, ph, n_mc, seed,
                                 opts.workers)
                rows.append(row)
            top = rep_f.objective + 1e-6
            if not (v_id <= (v_pair if K <= cfg.num_txs else v_id) <= top):
                summary["ordering_holds"] = False
            worst_semi_gap[f"{tag} sigma={sigma_deg:g}"] = 1.0 - rep_s.objective / rep_f.objective
            del rows[marker]


def run_mi_vs_users(config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    """Sum-MI versus maximum angular TX separation, one RIS (experiment ``fig3``).

    The receiver has 12 antennas and every spread is 4 degrees.
    """
    seed = _seed(config, opts)
    base = with_spread(with_num_riss(with_ns(config, _single_ns(config, opts)), 1), math.radians(4.0))
    base = base.replace(nr=12)
    rows = []
    unconverged = 0
    for M in base.experiment.user_counts:
        for max_angle in base.experiment.max_angle_deg:
            cfg = with_azimuths(base, equidistant_azimuths(M, max_angle))
            corr = build_correlation_set(cfg)
            Q = _q(cfg)
            v_id = phaseopt.weighted_objective(corr, Q, PhaseConfig.identity(1, cfg.ns))
            rows.append(("max_angle_deg", max_angle, f"identity M={M}", v_id, math.nan, "ok"))
            try:
                _, _, rep = phaseopt.semi_optimal_optimize(corr, Q, cfg.delta_q, cfg.positions, **_opt_kw(cfg))
                status = "ok" if rep.converged else "unconverged"
                unconverged += not rep.converged
                rows.append(("max_angle_deg", max_angle, f"semi-optimal M={M}", rep.objective, math.nan, status))
            except CapkitError as exc:
                unconverged += 1
                rows.append(("max_angle_deg", max_angle, f"semi-optimal M={M}", math.nan, math.nan,
                             f"failed: {type(exc).__name__}"))
    summary = {"ns": base.ns, "unconverged_points": unconverged}
    return ExperimentResult("fig3", base, seed, [Table("", SERIES, rows)], summary)


def _region_rows(points, ns, sigma_deg):
    rows = []
    for p in points:
        rows.append(tuple(p.mu) + tuple(p.rates) + (p.sum_rate, p.optimized, ns, sigma_deg))
    return rows


def run_region(config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    """Capacity regions with and without phase optimization (experiment ``fig4``)."""
    seed = _seed(config, opts)
    if config.num_txs != 2:
        raise ConfigError("the region experiment is defined for two TXs", "system.num_txs")
    base = with_num_riss(config, 1)
    n_mc = opts.samples or base.experiment.check_samples
    rows, mc_rows = [], []
    worst_mc = 0.0
    for ns in _ns_pair(base.experiment.region_ns, opts):
        for sigma_deg in base.experiment.region_sigma_deg:
            cfg = with_spread(with_ns(base, ns), math.radians(sigma_deg))
            corr = build_correlation_set(cfg)
            Q = _q(cfg)
            for mode in ("identity", "full"):
                pts = region.sweep_region(corr, Q, cfg.experiment.mu_steps, mode, cfg.delta_q, cfg.positions,
                                          cfg.optimizer, opts.workers)
                rows += _region_rows(pts, ns, sigma_deg)
                if mode == "full":
                    for p in pts:
                        mc = region.monte_carlo_rates(p, corr, Q, n_mc, seed)
                        for m, (r_a, r_mc) in enumerate(zip(p.rates, mc)):
                            mc_rows.append(("mu_1", p.mu[0], f"R_{m + 1} monte carlo ns={ns} sigma={sigma_deg:g}",
                                            r_mc, math.nan, "ok"))
                            if r_a > 1e-3 * max(p.rates):
                                worst_mc = max(worst_mc, abs(r_mc - r_a) / r_a)
    summary = {"mc_samples": n_mc, "worst_mc_relative_error": worst_mc}
    return ExperimentResult("fig4", base, seed,
                            [Table("", region_schema(2), rows), Table("mc", SERIES, mc_rows)], summary)


def cdf_scenario(config: ScenarioConfig, num_txs, ns):
    """Two uncorrelated RISs, a 12-antenna receiver and equidistant TXs."""
    cfg = with_num_riss(with_ns(config, ns), 2)
    cfg = with_azimuths(cfg, equidistant_azimuths(num_txs, 90.0))
    return cfg.replace(nr=12, ris_correlation="uncorrelated")


def sup_distance(dist: montecarlo.EmpiricalDistribution, stats: detequiv.MIStats, p_min=1e-3):
    """``max |F_emp - F_gauss|`` over thresholds where the Gaussian CDF is at least ``p_min``.

    Both one-sided limits of the empirical step function are compared.
    """
    x = dist.sorted
    n = x.size
    g = detequiv.gaussian_outage(stats, x)
    mask = g >= p_min
    if not np.any(mask):
        return 0.0
    hi = np.arange(1, n + 1) / n
    lo = np.arange(n) / n
    return float(max(np.max(np.abs(hi - g)[mask]), np.max(np.abs(lo - g)[mask])))


def run_cdf(config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    """Empirical sum-MI CDF against the Gaussian law (experiment ``fig5``)."""
    seed = _seed(config, opts)
    n_mc = opts.samples or config.experiment.variance_samples
    rows = []
    distances = {}
    for M in config.experiment.cdf_user_counts:
        for ns in _ns_pair(config.experiment.cdf_ns, opts):
            cfg = cdf_scenario(config, M, ns)
            corr = build_correlation_set(cfg)
            Q = _q(cfg)
            ident = PhaseConfig.identity(cfg.num_riss, ns)
            stats, _ = detequiv.analyze(corr, Q, ident)
            dist = montecarlo.mi_statistics(corr, Q, ident, None, n_mc, seed, opts.workers)
            tag = f"M={M} ns={ns}"
            grid = np.linspace(dist.sorted[0], dist.sorted[-1], 41)
            for x in grid:
                rows.append(("mi_nats", float(x), f"empirical {tag}", dist.cdf(x), math.nan, "ok"))
                rows.append(("mi_nats", float(x), f"gaussian {tag}", detequiv.gaussian_outage(stats, x), math.nan, "ok"))
            distances[tag] = {
                "sup_distance": sup_distance(dist, stats),
                "mean_analytic": stats.mean_total,
                "mean_mc": dist.mean,
                "variance_analytic": stats.variance,
                "variance_mc": dist.variance,
            }
    summary = {"samples": n_mc, "cases": distances}
    return ExperimentResult("fig5", config, seed, [Table("", SERIES, rows)], summary)


def run_quantization(config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    """Continuous, 2-bit, 1-bit and identity phases on the reference scenario."""
    seed = _seed(config, opts)
    cfg = with_ns(config, _single_ns(config, opts))
    corr = build_correlation_set(cfg)
    Q = _q(cfg)
    n_mc = opts.samples or cfg.experiment.check_samples
    full, _, rep = phaseopt.full_optimum(corr, Q, cfg.delta_q, cfg.positions, starts=("pairing", "semi"),
                                         identity_floor=True, **_opt_kw(cfg))
    configs = [
        ("identity", PhaseConfig.identity(cfg.num_riss, cfg.ns)),
        ("1-bit", quantize_phases(full, 1)),
        ("2-bit", quantize_phases(full, 2)),
        ("continuous", full),
    ]
    if cfg.quantization_bits is not None and cfg.quantization_bits not in (1, 2):
        configs.insert(3, (f"{cfg.quantization_bits}-bit", quantize_phases(full, cfg.quantization_bits)))
    rows, values = [], {}
    for i, (name, ph) in enumerate(configs):
        v = phaseopt.weighted_objective(corr, Q, ph)
        values[name] = v
        rows.append(("config", i, name, v, math.nan, "ok" if name != "continuous" or rep.converged else "unconverged"))
        row, _ = _mc_row("config", i, f"monte carlo {name}", corr, Q, ph, n_mc, seed, opts.workers)
        rows.append(row)
    summary = {"ns": cfg.ns, "values": values, "two_bit_ratio": values["2-bit"] / values["continuous"]}
    return ExperimentResult("quantization", cfg, seed, [Table("", SERIES, rows)], summary)


EXPERIMENTS = {
    "fig2": run_mi_vs_as,
    "fig3": run_mi_vs_users,
    "fig4": run_region,
    "fig5": run_cdf,
    "quantization": run_quantization,
}


def run_experiment(name, config: ScenarioConfig, opts: RunOptions) -> ExperimentResult:
    try:
        runner = EXPERIMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}", "experiment") from None
    return runner(config, opts)
