import csv
import io

import numpy as np
import pytest

from fdmc_alloc import bench, cli
from fdmc_alloc.bench import ConfigError, parse_config, parse_quantity
from fdmc_alloc.channel import dbm_to_watt

SMALL = """
# tiny desk run
n_subcarriers = 2
n_dl = 1
n_ul = 1
trials = 2
sweep_values = 10 dBm, 20 dBm
"""


def test_parse_quantity_units():
    assert parse_quantity("18 dBm", "power") == pytest.approx(dbm_to_watt(18.0))
    assert parse_quantity("2 W", "power") == 2.0
    assert parse_quantity("5mW", "power") == pytest.approx(5e-3)
    assert parse_quantity("-90 dB", "ratio") == pytest.approx(1e-9)
    assert parse_quantity("10 dBi", "ratio") == pytest.approx(10.0)
    assert parse_quantity("2.5 GHz", "frequency") == 2.5e9
    assert parse_quantity("78 kHz", "frequency") == 78e3
    assert parse_quantity("0.6 km", "length") == 600.0
    with pytest.raises(ConfigError):
        parse_quantity("3 furlongs", "length")
    with pytest.raises(ConfigError):
        parse_quantity("dBm", "power")


def test_defaults_follow_simulation_table():
    cfg = parse_config("")
    assert cfg.carrier_hz == 2.5e9 and cfg.bandwidth_hz == 5e6
    assert cfg.n_subcarriers == 64 and cfg.subcarrier_hz == 78e3
    assert cfg.pathloss_exponent == 3.6 and cfg.rho == pytest.approx(1e-9)
    assert cfg.noise_dl_w == pytest.approx(dbm_to_watt(-125.0))
    assert cfg.p_max_ul_w == pytest.approx(dbm_to_watt(18.0))
    assert cfg.p_max_dl_w == pytest.approx(dbm_to_watt(31.0))
    par = cfg.params()
    assert par.si_cancellation_db == pytest.approx(-90.0)
    assert par.bs_antenna_gain_db == pytest.approx(10.0)


def test_config_parsing_and_errors():
    cfg = parse_config(SMALL + "p_max_dl = 40 dBm  # inline comment\n", master_seed=7)
    assert cfg.sweep_values == (10.0, 20.0)
    assert cfg.master_seed == 7
    assert cfg.p_max_dl_w == pytest.approx(10.0)
    for bad in ("nonsense", "foo = 1", "trials = 0", "sweep_values = 3, 2",
                "preset = fastest", "n_dl = x", "inner_radius = 700"):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_instances_reuse_drops_across_budgets():
    cfg = parse_config(SMALL)
    a = bench.make_instance(cfg, 1, p_max_dl_w=1.0)
    b = bench.make_instance(cfg, 1, p_max_dl_w=2.0)
    assert a.gains == b.gains and a.p_max_dl != b.p_max_dl
    c = bench.make_instance(parse_config(SMALL + "interference_free = true"), 1)
    assert c.rho == 0.0 and np.all(c.gains.F == 0)


def test_power_sweep_rows_and_audit():
    cfg = parse_config(SMALL)
    res = bench.run_power_sweep(cfg)
    assert [(r.sweep_value, r.scheme) for r in res.rows] == [
        (10.0, "proposed"), (10.0, "baseline1"), (10.0, "baseline2"),
        (20.0, "proposed"), (20.0, "baseline1"), (20.0, "baseline2")]
    for row in res.rows:
        assert row.trials == 2 and row.feasibility_failures == 0
        vals = [o.throughput for _, o in res.runs[(res.values.index(row.sweep_value),
                                                   row.scheme)]]
        assert row.mean_throughput == pytest.approx(np.mean(vals), rel=1e-15)
        assert row.std_error == pytest.approx(np.std(vals, ddof=1) / np.sqrt(2))
    # every row passes the round-trip audit
    assert bench.audit(res, 0, fraction=1.0) == len(res.rows)


def test_audit_detects_tampering():
    cfg = parse_config(SMALL.replace("sweep_values = 10 dBm, 20 dBm", "sweep_values = 10"))
    res = bench.run_power_sweep(cfg, schemes=("proposed",))
    inst, out = res.runs[(0, "proposed")][0]
    res.runs[(0, "proposed")][0] = (inst, bench.SchemeOutcome(
        out.scheme, out.throughput + 1.0, out.iterations, out.allocation))
    with pytest.raises(bench.AuditError):
        bench.audit(res, 0, fraction=1.0)


def test_csv_schema():
    rows = [bench.ResultRow(10.0, "proposed", 1.5, 0.1, 3, 5.0, 0)]
    text = bench.rows_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "# fdmc-alloc results v1"
    assert lines[1] == ("sweep_value,scheme,mean_throughput_bps_hz,std_error,trials,"
                        "mean_iterations,feasibility_failures")
    assert next(csv.reader(io.StringIO(lines[2]))) == ["10.0", "proposed", "1.5", "0.1", "3",
                                                       "5.0", "0"]


def test_user_sweep_single_pair_matches_direct_solve():
    cfg = parse_config("n_subcarriers = 2\ntrials = 2\nsweep_values = 1")
    res = bench.run_user_sweep(cfg, schemes=("proposed",))
    direct = [bench.run_scheme(bench.make_instance(cfg, t, n_users=1), "proposed", cfg)
              for t in range(2)]
    assert res.rows[0].mean_throughput == pytest.approx(np.mean([d.throughput for d in direct]),
                                                        rel=1e-15)
    with pytest.raises(ConfigError):
        bench.run_user_sweep(parse_config("sweep_values = 1.5"))


def test_failures_are_counted(monkeypatch):
    from fdmc_alloc.engine import NumericalFailure

    def boom(*a, **k):
        raise NumericalFailure("synthetic")

    monkeypatch.setattr(bench, "solve", boom)
    cfg = parse_config(SMALL)
    res = bench.run_power_sweep(cfg, schemes=("proposed",))
    assert all(r.feasibility_failures == 2 and r.trials == 0 for r in res.rows)
    assert res.failure_rate() == 1.0


def test_oracle_check_easy_regime():
    cfg = parse_config("n_subcarriers = 2\nn_dl = 1\nn_ul = 1\ntrials = 3\n"
                       "interference_free = true\noracle_levels = 16")
    check = bench.run_oracle_check(cfg)
    assert len(check.rows) == 3 and check.failures == 0
    for r in check.rows:
        assert r.ratio >= 0.99
        assert r.ratio <= 1.0 + check.grid_slack / r.oracle_objective
    text = bench.oracle_to_csv(check)
    assert text.startswith("# fdmc-alloc results v1\ninstance,oracle_objective,sca_objective,ratio")


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("trials = -1\n")
    assert cli.main(["solve", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["solve", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    big = tmp_path / "big.cfg"
    big.write_text("n_subcarriers = 16\nn_dl = 4\nn_ul = 4\noracle_cap = 1e6\n")
    assert cli.main(["oracle-check", "--config", str(big)]) == cli.EXIT_SIZE


def test_cli_failure_threshold(tmp_path, monkeypatch):
    from fdmc_alloc.engine import NumericalFailure

    calls = {"n": 0}
    real = bench.solve

    def flaky(inst, cfg):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NumericalFailure("synthetic")
        return real(inst, cfg)

    monkeypatch.setattr(bench, "solve", flaky)
    conf = tmp_path / "c.cfg"
    conf.write_text(SMALL)
    out = tmp_path / "o.csv"
    # one failed run out of 12 is above the 5% threshold
    assert cli.main(["sweep-power", "--config", str(conf), "--out", str(out)]) == cli.EXIT_FAILURES
    assert out.read_text().startswith("# fdmc-alloc results v1")


def test_cli_solve_and_trace(tmp_path, capsys):
    conf = tmp_path / "c.cfg"
    conf.write_text(SMALL)
    out, trace = tmp_path / "a.csv", tmp_path / "t.tsv"
    rc = cli.main(["solve", "--config", str(conf), "--out", str(out), "--trace", str(trace),
                   "--preset", "converged"])
    assert rc == 0
    assert out.read_text().splitlines()[1] == "i,m,r,p_w,q_w,utility_bps_hz"
    assert trace.read_text().startswith("k\tpenalized_objective")
    assert "bits/s/Hz" in capsys.readouterr().err


def test_cli_dump_channels(tmp_path):
    conf = tmp_path / "c.cfg"
    conf.write_text(SMALL)
    out = tmp_path / "g.csv"
    assert cli.main(["dump-channels", "--config", str(conf), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "i,kind,m,r,value"
    assert len(lines) == 1 + 2 * 4
