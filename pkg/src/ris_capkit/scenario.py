"""Experiment configuration, RIS geometry and wave vectors.

Scenario files are TOML.  Angles are written in degrees and SNRs in dB;
everything is converted to radians and linear scale on load.  The RIS
lies in the x-y plane with its normal along +z; azimuth is measured in
the x-y plane from +x and elevation from the plane towards +z.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

__all__ = [
    "AngularSpec",
    "RisGrid",
    "OptimizerSettings",
    "ExperimentSettings",
    "ScenarioConfig",
    "build_ris_grid",
    "wavevector",
    "db_to_linear",
    "linear_to_db",
    "validate",
    "load_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "scenario_hash",
    "table1_scenario",
    "with_ns",
]

ANTENNA_MODES = ("uncorrelated", "angular")
RIS_MODES = ("angular", "uncorrelated")


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0) if np.ndim(db) else 10.0 ** (float(db) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x) if np.ndim(x) else 10.0 * math.log10(x)


@dataclass(frozen=True)
class AngularSpec:
    """Mean direction and angle spread of an angular power spectrum (radians)."""

    azimuth: float
    elevation: float
    spread: float

    @classmethod
    def from_degrees(cls, azimuth, elevation, spread):
        return cls(math.radians(azimuth), math.radians(elevation), math.radians(spread))

    def to_degrees(self):
        return {
            "azimuth_deg": math.degrees(self.azimuth),
            "elevation_deg": math.degrees(self.elevation),
            "spread_deg": math.degrees(self.spread),
        }


@dataclass(frozen=True)
class RisGrid:
    rows: int
    cols: int
    spacing: float  # meters


@dataclass(frozen=True)
class OptimizerSettings:
    """Step size, stopping tolerance and iteration cap for the phase optimizers.

    ``fp_tol`` and ``fp_max_iter`` control the fixed-point solver.
    """

    step: float = 0.1
    tol: float = 1e-6
    max_iter: int = 500
    fp_tol: float = 1e-12
    fp_max_iter: int = 20000


@dataclass(frozen=True)
class ExperimentSettings:
    """Sweep grids used by the figure-style experiments (degrees where angular)."""

    sigma_deg: tuple = (2.0, 4.0, 5.0, 10.0, 20.0, 30.0, 40.0)
    max_angle_deg: tuple = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
    user_counts: tuple = (1, 2, 3, 4)
    region_sigma_deg: tuple = (4.0, 15.0)
    region_ns: tuple = (64, 144)
    cdf_user_counts: tuple = (2, 3, 5)
    cdf_ns: tuple = (64, 144)
    mu_steps: int = 11
    mean_samples: int = 20000
    variance_samples: int = 50000
    check_samples: int = 2000


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one MIMO-MAC-RIS experiment.

    ``incoming[k][m]`` is the angular spectrum of TX ``m`` arriving at RIS ``k``
    and ``outgoing[k]`` the spectrum leaving RIS ``k`` towards the receiver.
    ``tx_departure`` and ``rx_arrival`` are only used in ``"angular"``
    antenna mode, where the TX/RX arrays are half-wavelength ULAs.
    """

    num_txs: int
    num_riss: int
    nt: int
    nr: int
    ns: int
    snr: float
    direct_snr_ratio: float
    wavelength: float
    grid: RisGrid
    incoming: tuple
    outgoing: tuple
    antenna_mode: str = "uncorrelated"
    ris_correlation: str = "angular"
    tx_departure: tuple | None = None
    rx_arrival: AngularSpec | None = None
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    seed: int = 0
    quantization_bits: int | None = None

    @property
    def beta_r(self):
        return self.nr / self.nt

    @property
    def beta_s(self):
        return self.ns / self.nt

    @cached_property
    def positions(self):
        return build_ris_grid(self.grid.rows, self.grid.cols, self.grid.spacing)

    @cached_property
    def q_in(self):
        """Incoming wave vectors, shape ``(K, M, 3)``."""
        return np.array(
            [[wavevector(a.azimuth, a.elevation, self.wavelength) for a in row] for row in self.incoming]
        ).reshape(self.num_riss, self.num_txs, 3)

    @cached_property
    def q_out(self):
        """Outgoing wave vectors, shape ``(K, 3)``."""
        return np.array(
            [wavevector(a.azimuth, a.elevation, self.wavelength) for a in self.outgoing]
        ).reshape(self.num_riss, 3)

    @property
    def delta_q(self):
        """``q_out[k] - q_in[k, m]``, shape ``(K, M, 3)``."""
        return self.q_out[:, None, :] - self.q_in

    def replace(self, **changes):
        return validate(dataclasses.replace(self, **changes))


def build_ris_grid(rows, cols, spacing):
    """Element positions of a ``rows x cols`` planar lattice centred at the origin.

    Returns an ``(rows*cols, 3)`` array in row-major order with ``z = 0``.
    """
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ConfigError("grid dimensions must be positive integers", "ris.rows/cols")
    if not spacing > 0:
        raise ConfigError("element spacing must be positive", "ris.spacing")
    rows, cols = int(rows), int(cols)
    y = (np.arange(rows) - (rows - 1) / 2.0) * spacing
    x = (np.arange(cols) - (cols - 1) / 2.0) * spacing
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), np.zeros(rows * cols)])


def wavevector(azimuth, elevation, wavelength):
    """3-vector of norm ``2*pi/wavelength`` pointing along (azimuth, elevation)."""
    if not wavelength > 0:
        raise ConfigError("wavelength must be positive", "system.wavelength")
    k0 = 2.0 * np.pi / wavelength
    ce = math.cos(elevation)
    return k0 * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def _check_angular(spec, name, problems):
    if not isinstance(spec, AngularSpec):
        problems.append((name, "expected an angular spec"))
        return
    for attr in ("azimuth", "elevation", "spread"):
        if not math.isfinite(getattr(spec, attr)):
            problems.append((f"{name}.{attr}", "must be finite"))
    if spec.spread < 0:
        problems.append((f"{name}.spread", "angle spread must be nonnegative"))


def validate(config: ScenarioConfig) -> ScenarioConfig:
    """Check every invariant of ``config`` and materialize derived geometry.

    All violations are collected and reported together in one ``ConfigError``.
    """
    problems = []
    for name in ("num_txs", "num_riss", "nt", "nr", "ns"):
        v = getattr(config, name)
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            problems.append((name, "must be a positive integer"))
    if not (math.isfinite(config.snr) and config.snr >= 0):
        problems.append(("snr", "must be a nonnegative finite linear value"))
    if not (math.isfinite(config.direct_snr_ratio) and config.direct_snr_ratio >= 0):
        problems.append(("direct_snr_ratio", "must be nonnegative"))
    if not (isinstance(config.wavelength, (int, float)) and config.wavelength > 0):
        problems.append(("wavelength", "must be positive"))
    g = config.grid
    if not (isinstance(g.rows, (int, np.integer)) and g.rows >= 1 and isinstance(g.cols, (int, np.integer)) and g.cols >= 1):
        problems.append(("ris.rows/cols", "must be positive integers"))
    elif g.rows * g.cols != config.ns:
        problems.append(("ns", f"ns mismatch: grid {g.rows}x{g.cols} has {g.rows * g.cols} elements, ns={config.ns}"))
    if not g.spacing > 0:
        problems.append(("ris.spacing", "must be positive"))
    if config.ris_correlation not in RIS_MODES:
        problems.append(("ris.correlation", f"must be one of {RIS_MODES}"))
    if config.antenna_mode not in ANTENNA_MODES:
        problems.append(("antenna_correlation", f"must be one of {ANTENNA_MODES}"))

    if len(config.outgoing) != config.num_riss:
        problems.append(("ris", f"expected {config.num_riss} surfaces, got {len(config.outgoing)}"))
    if len(config.incoming) != config.num_riss:
        problems.append(("ris.incoming", f"expected {config.num_riss} surfaces"))
    for k, spec in enumerate(config.outgoing):
        _check_angular(spec, f"ris[{k}].outgoing", problems)
    for k, row in enumerate(config.incoming):
        if len(row) != config.num_txs:
            problems.append((f"ris[{k}].incoming", f"expected {config.num_txs} entries, got {len(row)}"))
        for m, spec in enumerate(row):
            _check_angular(spec, f"ris[{k}].incoming[{m}]", problems)
    if config.antenna_mode == "angular":
        if config.tx_departure is None or len(config.tx_departure) != config.num_txs:
            problems.append(("tx", f"angular mode needs {config.num_txs} [[tx]] departure specs"))
        else:
            for m, spec in enumerate(config.tx_departure):
                _check_angular(spec, f"tx[{m}].departure", problems)
        if config.rx_arrival is None:
            problems.append(("rx.arrival", "angular mode needs an RX arrival spec"))
        else:
            _check_angular(config.rx_arrival, "rx.arrival", problems)

    opt = config.optimizer
    if not opt.step > 0:
        problems.append(("optimizer.step", "must be positive"))
    if not opt.tol > 0:
        problems.append(("optimizer.tol", "must be positive"))
    if not opt.fp_tol > 0:
        problems.append(("optimizer.fp_tol", "must be positive"))
    if opt.max_iter < 1 or opt.fp_max_iter < 1:
        problems.append(("optimizer.max_iter", "iteration caps must be >= 1"))
    if not (isinstance(config.seed, (int, np.integer)) and 0 <= config.seed < 2**64):
        problems.append(("seed", "must be a 64-bit unsigned integer"))
    if config.quantization_bits is not None and (
        not isinstance(config.quantization_bits, (int, np.integer)) or config.quantization_bits < 1
    ):
        problems.append(("quantization_bits", "must be a positive integer"))
    ex = config.experiment
    if ex.mu_steps < 2:
        problems.append(("experiment.mu_steps", "grid resolution must be >= 2"))
    for name in ("mean_samples", "variance_samples", "check_samples"):
        if getattr(ex, name) < 2:
            problems.append((f"experiment.{name}", "must be >= 2"))

    if problems:
        if len(problems) == 1:
            raise ConfigError(problems[0][1], problems[0][0])
        raise ConfigError("; ".join(f"{f}: {msg}" for f, msg in problems))
    # touch the cached geometry so it is computed once, before sharing
    config.positions, config.q_in, config.q_out
    return config


# ---------------------------------------------------------------------------
# file format


_SYSTEM_KEYS = {
    "num_txs", "num_riss", "nt", "nr", "ns", "snr_db", "direct_snr_db",
    "wavelength", "antenna_correlation",
}
_RIS_KEYS = {"rows", "cols", "spacing", "correlation", "surface"}
_SURFACE_KEYS = {"outgoing", "incoming"}
_ANGLE_KEYS = {"azimuth_deg", "elevation_deg", "spread_deg"}
_OPT_KEYS = {f.name for f in dataclasses.fields(OptimizerSettings)}
_EXP_KEYS = {f.name for f in dataclasses.fields(ExperimentSettings)}
_RUN_KEYS = {"seed", "quantization_bits"}
_TOP_KEYS = {"system", "ris", "tx", "rx", "optimizer", "experiment", "run"}


def _reject_unknown(table, allowed, where):
    if not isinstance(table, Mapping):
        raise ConfigError("expected a table", where)
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", where)


def _require(table, key, where):
    if key not in table:
        raise ConfigError("missing required key", f"{where}.{key}")
    return table[key]


def _angle(table, where):
    _reject_unknown(table, _ANGLE_KEYS, where)
    try:
        return AngularSpec.from_degrees(
            float(_require(table, "azimuth_deg", where)),
            float(_require(table, "elevation_deg", where)),
            float(table.get("spread_deg", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), where) from None


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError("must be an integer", where)
    return value


def scenario_from_dict(data: Mapping[str, Any]) -> ScenarioConfig:
    """Build and validate a scenario from the parsed TOML structure."""
    _reject_unknown(data, _TOP_KEYS, "<top>")
    system = _require(data, "system", "<top>")
    _reject_unknown(system, _SYSTEM_KEYS, "system")
    ris = _require(data, "ris", "<top>")
    _reject_unknown(ris, _RIS_KEYS, "ris")

    num_txs = _int(_require(system, "num_txs", "system"), "system.num_txs")
    num_riss = _int(_require(system, "num_riss", "system"), "system.num_riss")
    rows = _int(_require(ris, "rows", "ris"), "ris.rows")
    cols = _int(_require(ris, "cols", "ris"), "ris.cols")
    ns = _int(system.get("ns", rows * cols), "system.ns")

    direct = system.get("direct_snr_db", "off")
    if isinstance(direct, str):
        if direct.lower() != "off":
            raise ConfigError("must be a number (dB) or 'off'", "system.direct_snr_db")
        direct_ratio = 0.0
    else:
        direct_ratio = db_to_linear(float(direct))

    surfaces = _require(ris, "surface", "ris")
    if not isinstance(surfaces, list):
        raise ConfigError("expected an array of [[ris.surface]] tables", "ris.surface")
    incoming, outgoing = [], []
    for k, surf in enumerate(surfaces):
        where = f"ris.surface[{k}]"
        _reject_unknown(surf, _SURFACE_KEYS, where)
        outgoing.append(_angle(_require(surf, "outgoing", where), f"{where}.outgoing"))
        inc = _require(surf, "incoming", where)
        if not isinstance(inc, list):
            raise ConfigError("expected a list of angle tables, one per TX", f"{where}.incoming")
        incoming.append(tuple(_angle(a, f"{where}.incoming[{m}]") for m, a in enumerate(inc)))

    tx_departure = None
    if "tx" in data:
        txs = data["tx"]
        if not isinstance(txs, list):
            raise ConfigError("expected an array of [[tx]] tables", "tx")
        deps = []
        for m, tx in enumerate(txs):
            _reject_unknown(tx, {"departure"}, f"tx[{m}]")
            deps.append(_angle(_require(tx, "departure", f"tx[{m}]"), f"tx[{m}].departure"))
        tx_departure = tuple(deps)
    rx_arrival = None
    if "rx" in data:
        _reject_unknown(data["rx"], {"arrival"}, "rx")
        rx_arrival = _angle(_require(data["rx"], "arrival", "rx"), "rx.arrival")

    opt_table = data.get("optimizer", {})
    _reject_unknown(opt_table, _OPT_KEYS, "optimizer")
    optimizer = OptimizerSettings(**opt_table)
    exp_table = dict(data.get("experiment", {}))
    _reject_unknown(exp_table, _EXP_KEYS, "experiment")
    for key, value in exp_table.items():
        if isinstance(value, list):
            exp_table[key] = tuple(value)
    experiment = ExperimentSettings(**exp_table)
    run = data.get("run", {})
    _reject_unknown(run, _RUN_KEYS, "run")

    config = ScenarioConfig(
        num_txs=num_txs,
        num_riss=num_riss,
        nt=_int(_require(system, "nt", "system"), "system.nt"),
        nr=_int(_require(system, "nr", "system"), "system.nr"),
        ns=ns,
        snr=db_to_linear(float(_require(system, "snr_db", "system"))),
        direct_snr_ratio=direct_ratio,
        wavelength=float(_require(system, "wavelength", "system")),
        grid=RisGrid(rows, cols, float(_require(ris, "spacing", "ris"))),
        incoming=tuple(incoming),
        outgoing=tuple(outgoing),
        antenna_mode=system.get("antenna_correlation", "uncorrelated"),
        ris_correlation=ris.get("correlation", "angular"),
        tx_departure=tx_departure,
        rx_arrival=rx_arrival,
        optimizer=optimizer,
        experiment=experiment,
        seed=_int(run.get("seed", 0), "run.seed"),
        quantization_bits=run.get("quantization_bits"),
    )
    return validate(config)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed scenario file: {exc}", str(path)) from None
    return scenario_from_dict(data)


def scenario_to_dict(config: ScenarioConfig) -> dict:
    """Inverse of :func:`scenario_from_dict` (file units: degrees, dB)."""
    system = {
        "num_txs": config.num_txs,
        "num_riss": config.num_riss,
        "nt": config.nt,
        "nr": config.nr,
        "ns": config.ns,
        "snr_db": linear_to_db(config.snr) if config.snr > 0 else -math.inf,
        "direct_snr_db": linear_to_db(config.direct_snr_ratio) if config.direct_snr_ratio > 0 else "off",
        "wavelength": config.wavelength,
        "antenna_correlation": config.antenna_mode,
    }
    surfaces = [
        {"outgoing": out.to_degrees(), "incoming": [a.to_degrees() for a in inc]}
        for out, inc in zip(config.outgoing, config.incoming)
    ]
    data = {
        "system": system,
        "ris": {"rows": config.grid.rows, "cols": config.grid.cols, "spacing": config.grid.spacing,
                "correlation": config.ris_correlation, "surface": surfaces},
        "optimizer": dataclasses.asdict(config.optimizer),
        "experiment": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(config.experiment).items()},
        "run": {"seed": config.seed},
    }
    if config.quantization_bits is not None:
        data["run"]["quantization_bits"] = config.quantization_bits
    if config.tx_departure is not None:
        data["tx"] = [{"departure": a.to_degrees()} for a in config.tx_departure]
    if config.rx_arrival is not None:
        data["rx"] = {"arrival": config.rx_arrival.to_degrees()}
    return data


def _canonical(config):
    """Internal-unit description used for hashing (no dB/degree round trips)."""
    d = dataclasses.asdict(config)
    return json.dumps(d, sort_keys=True, default=repr, separators=(",", ":"))


def scenario_hash(config: ScenarioConfig) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()[:16]


def table1_scenario(sigma_deg=5.0, num_riss=1, num_txs=2, ns=400, nr=8) -> ScenarioConfig:
    """The reference setup: 2.5 GHz, 10 dB SNR, 6 cm spacing, TXs at +/-45 deg.

    The direct link is switched off, as in all the reference figures.
    """
    side = int(round(math.sqrt(ns)))
    if side * side != ns:
        raise ConfigError("reference scenario needs a square RIS", "ns")
    azimuths = equidistant_azimuths(num_txs, 90.0)
    incoming = tuple(
        tuple(AngularSpec.from_degrees(az, 30.0, sigma_deg) for az in azimuths) for _ in range(num_riss)
    )
    outgoing = tuple(AngularSpec.from_degrees(0.0, 70.0, sigma_deg) for _ in range(num_riss))
    return validate(
        ScenarioConfig(
            num_txs=num_txs,
            num_riss=num_riss,
            nt=4,
            nr=nr,
            ns=ns,
            snr=db_to_linear(10.0),
            direct_snr_ratio=0.0,
            wavelength=0.12,
            grid=RisGrid(side, side, 0.06),
            incoming=incoming,
            outgoing=outgoing,
        )
    )


def equidistant_azimuths(num_txs, max_angle_deg):
    """Azimuths spread evenly over ``[-max/2, +max/2]`` (single TX at 0)."""
    if num_txs == 1:
        return [0.0]
    return list(np.linspace(max_angle_deg / 2.0, -max_angle_deg / 2.0, num_txs))


def with_ns(config: ScenarioConfig, ns: int) -> ScenarioConfig:
    """Same scenario on a square ``sqrt(ns) x sqrt(ns)`` RIS with unchanged spacing."""
    side = int(round(math.sqrt(ns)))
    if side * side != ns:
        raise ConfigError(f"ns={ns} is not a perfect square", "ns")
    return config.replace(ns=ns, grid=RisGrid(side, side, config.grid.spacing))


def with_spread(config: ScenarioConfig, sigma: float) -> ScenarioConfig:
    """Set every RIS-side angle spread to ``sigma`` radians."""
    incoming = tuple(tuple(dataclasses.replace(a, spread=sigma) for a in row) for row in config.incoming)
    outgoing = tuple(dataclasses.replace(a, spread=sigma) for a in config.outgoing)
    return config.replace(incoming=incoming, outgoing=outgoing)


def with_azimuths(config: ScenarioConfig, azimuths_deg: Sequence[float]) -> ScenarioConfig:
    """Replace the TX set by ``len(azimuths_deg)`` TXs with the given incoming azimuths.

    Elevation and spread are copied from the first TX of each RIS.
    """
    incoming = tuple(
        tuple(
            dataclasses.replace(row[0], azimuth=math.radians(az)) for az in azimuths_deg
        )
        for row in config.incoming
    )
    tx_departure = config.tx_departure
    if tx_departure is not None:
        tx_departure = tuple(tx_departure[min(m, len(tx_departure) - 1)] for m in range(len(azimuths_deg)))
    return config.replace(num_txs=len(azimuths_deg), incoming=incoming, tx_departure=tx_departure)


def with_num_riss(config: ScenarioConfig, num_riss: int) -> ScenarioConfig:
    """Replicate (or truncate) the RIS list; extra surfaces copy the first one."""
    incoming = tuple(config.incoming[min(k, config.num_riss - 1)] for k in range(num_riss))
    outgoing = tuple(config.outgoing[min(k, config.num_riss - 1)] for k in range(num_riss))
    return config.replace(num_riss=num_riss, incoming=incoming, outgoing=outgoing)
