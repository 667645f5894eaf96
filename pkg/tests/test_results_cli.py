import dataclasses
import json
import math

import numpy as np
import pytest

from ris_capkit import cli, experiments
from ris_capkit import results as rs
from ris_capkit.errors import ConfigError, ConvergenceError

# ------------------------------------------------------------------ results


def test_self_test_passes_and_detects_drift():
    rs.self_test()
    drifted = dataclasses.replace(rs.SERIES, columns=rs.SERIES.columns + ("extra",))
    with pytest.raises(ConfigError, match="bump its version"):
        rs.self_test({"series": drifted})
    with pytest.raises(ConfigError, match="not registered"):
        rs.self_test({"x": rs.Schema("x", 1, ("a",))})


def test_region_schema_columns():
    assert rs.region_schema(2).columns == ("mu_1", "mu_2", "R_1", "R_2", "sum_rate", "optimized", "ns", "sigma_deg")


@pytest.mark.parametrize("value, text", [
    (0.1, "0.1"), (1.0, "1.0"), (True, "true"), (False, "false"), (3, "3"), ("a b", "a b"),
    (math.nan, "nan"), (-math.inf, "-inf"), (np.float64(2.5), "2.5"), (np.int64(7), "7.0"),
])
def test_format_value(value, text):
    assert rs.format_value(value) == text


def test_format_value_round_trips():
    for v in np.random.default_rng(0).standard_normal(200) * 1e3:
        assert float(rs.format_value(float(v))) == v


def test_render_and_read_csv(tmp_path):
    rows = [("sigma_deg", 1.0, "a,b", 2.0, math.nan, "ok")]
    text = rs.render_csv(rs.SERIES, rows, {"seed": 3})
    assert text.splitlines()[0] == f"# schema: series v1 {rs.SERIES.fingerprint}"
    assert text.splitlines()[1] == "# seed: 3"
    p = rs.write_csv(tmp_path / "sub" / "t.csv", rs.SERIES, rows, {"seed": 3})
    meta, header, body = rs.read_csv(p)
    assert meta["seed"] == "3" and meta["schema"].startswith("series v1")
    assert tuple(header) == rs.SERIES.columns
    assert body == [["sigma_deg", "1.0", "a,b", "2.0", "nan", "ok"]]
    with pytest.raises(ConfigError):
        rs.render_csv(rs.SERIES, [(1, 2)])


def test_sidecar(tmp_path):
    import datetime as dt

    t = dt.datetime(2024, 1, 2, 3, 4, 5, tzinfo=dt.timezone.utc)
    sc = rs.Sidecar("fig2", "abc", 1, {"a": 1}, {"v": np.array([1.0, 2.0]), "x": np.float64(0.5)}, ["f.csv"])
    data = json.loads(rs.write_sidecar(tmp_path / "s.json", sc, t, t).read_text())
    assert data["summary"] == {"v": [1.0, 2.0], "x": 0.5}
    assert data["started"] == "2024-01-02T03:04:05+00:00"
    assert data["files"] == ["f.csv"] and data["seed"] == 1


# ---------------------------------------------------------------------- cli


def _run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def test_fig5_outputs(tmp_path):
    assert _run(tmp_path, "fig5", "--ns", "16", "--samples", "400", "--seed", "2") == 0
    meta, header, rows = rs.read_csv(tmp_path / "fig5.csv")
    assert meta["experiment"] == "fig5" and meta["seed"] == "2"
    assert json.loads(meta["scenario"])["system"]["ns"] == 400
    side = json.loads((tmp_path / "fig5.json").read_text())
    assert side["files"] == ["fig5.csv"] and side["scenario_hash"] == meta["scenario_hash"]
    assert side["summary"]["samples"] == 400
    assert {r[2] for r in rows} == {f"{kind} M={m} ns=16" for kind in ("empirical", "gaussian") for m in (2, 3, 5)}


def test_quantization_with_plot(tmp_path):
    assert _run(tmp_path, "quantization", "--ns", "16", "--samples", "50", "--plot") == 0
    assert (tmp_path / "quantization.png").stat().st_size > 1000
    _, _, rows = rs.read_csv(tmp_path / "quantization.csv")
    assert [r[2] for r in rows[::2]] == ["identity", "1-bit", "2-bit", "continuous"]


def test_scenario_file_keeps_its_size(tmp_path):
    toml = tmp_path / "s.toml"
    src = open("scenarios/desk.toml").read()
    toml.write_text(src)
    assert _run(tmp_path / "o", "quantization", "--scenario", str(toml), "--samples", "20") == 0
    side = json.loads((tmp_path / "o" / "quantization.json").read_text())
    assert side["summary"]["ns"] == side["scenario"]["system"]["ns"]


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[system]\nnum_txs = 2\nbogus = 1\n")
    assert _run(tmp_path, "fig5", "--scenario", str(bad)) == 2
    assert "invalid input" in capsys.readouterr().err
    assert _run(tmp_path, "fig5", "--scenario", str(tmp_path / "missing.toml")) == 2
    assert _run(tmp_path, "fig5", "--ns", "15") == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["fig9", "--out", str(tmp_path)])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["fig5", "--samples", "0", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_numerical_failure_exit_3_writes_partial(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ConvergenceError("stalled", residual=1.0, iterations=3)

    monkeypatch.setattr(experiments.phaseopt, "full_optimum", boom)
    assert _run(tmp_path, "fig2", "--ns", "16", "--samples", "20") == 3
    _, _, rows = rs.read_csv(tmp_path / "fig2.csv")
    failed = [r for r in rows if r[-1] != "ok"]
    assert failed == [["sigma_deg", rows[0][1], "pending K=1", "nan", "nan", "failed: ConvergenceError"]]
    assert {r[2] for r in rows if r[-1] == "ok"} == {"identity K=1", "pairing K=1", "semi-optimal K=1"}
    side = json.loads((tmp_path / "fig2.json").read_text())
    assert "stalled" in side["summary"]["failed"]


def test_reruns_are_byte_identical(tmp_path):
    for name, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        assert _run(tmp_path / name, "fig4", "--ns", "16", "--samples", "100", "--workers", workers) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert files == ["fig4.csv", "fig4_mc.csv"]
    for f in files:
        a = (tmp_path / "a" / f).read_bytes()
        assert a == (tmp_path / "b" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()


def test_seed_changes_monte_carlo_only(tmp_path):
    _run(tmp_path / "a", "fig5", "--ns", "16", "--samples", "200", "--seed", "1")
    _run(tmp_path / "b", "fig5", "--ns", "16", "--samples", "200", "--seed", "2")
    _, _, a = rs.read_csv(tmp_path / "a" / "fig5.csv")
    _, _, b = rs.read_csv(tmp_path / "b" / "fig5.csv")
    assert a != b
