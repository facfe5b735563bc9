import csv
import math

import numpy as np
import pytest

from ipeps_ntu.errors import CrossoverNotBracketedError, FitError
from ipeps_ntu.experiments import (
    BIAS_GRIDS,
    CSV_COLUMNS,
    EvolutionRecord,
    EvolutionRow,
    QuenchRun,
    ThermalRun,
    fit_tc,
    run_quench,
    run_thermal_single,
    steepest_slope_temperature,
    survival_time,
)
from ipeps_ntu.gates import ModelParams


def test_steepest_slope_of_symmetric_sigmoid():
    beta = np.arange(0.0, 2.0001, 0.05)
    t_star = steepest_slope_temperature((beta, np.tanh((beta - 1) / 0.1)))
    assert 1 / t_star == pytest.approx(1.0, abs=0.005)


def test_steepest_slope_with_noise(rng):
    beta = np.arange(0.0, 2.0001, 0.05)
    sz = np.tanh((beta - 1) / 0.1) + 1e-4 * rng.standard_normal(len(beta))
    t_star = steepest_slope_temperature((beta, sz))
    assert abs(1 / t_star - 1.0) <= 2 * 0.05


def test_steepest_slope_needs_bracketed_crossover():
    beta = np.linspace(0, 1, 21)
    with pytest.raises(CrossoverNotBracketedError):
        steepest_slope_temperature((beta, 0.3 * beta))
    with pytest.raises(CrossoverNotBracketedError):
        steepest_slope_temperature((beta[:4], beta[:4]))


def test_fit_recovers_exact_power_law():
    hz = BIAS_GRIDS[2.5]
    pts = [(h, 0.6 + 2 * h ** (8 / 15)) for h in hz]
    res = fit_tc(pts)
    assert res.tc == pytest.approx(0.6, abs=1e-6)
    assert res.amp == pytest.approx(2.0, abs=1e-6)
    assert res.inv_beta_delta == pytest.approx(8 / 15, abs=1e-6)
    d = res.to_dict()
    assert set(d) == {"tc", "amp", "inv_beta_delta", "ci95", "points"}
    assert len(d["points"]) == len(hz)


def test_fit_confidence_intervals(rng):
    hz = BIAS_GRIDS[2.9]
    pts = [(h, 0.6 + 2 * h ** (8 / 15) + 1e-4 * rng.standard_normal()) for h in hz]
    lin = fit_tc(pts)
    boot = fit_tc(pts, bootstrap=200, seed=1)
    assert abs(lin.tc - 0.6) < 3 * lin.ci95["tc"]
    assert 0 < boot.ci95["tc"] < 10 * lin.ci95["tc"]
    assert boot.tc == lin.tc


def test_fit_input_validation():
    with pytest.raises(FitError):
        fit_tc([(1e-3, 1.0), (2e-3, 1.1), (3e-3, 1.2)])
    with pytest.raises(FitError):
        fit_tc([(1e-3, 1.0), (1e-3, 1.1), (3e-3, 1.2), (4e-3, 1.3)])


def test_run_configs_validate():
    with pytest.raises(ValueError):
        QuenchRun(ModelParams(), energy_drift_cap=0.0)
    with pytest.raises(ValueError):
        ThermalRun(ModelParams(), hz=())
    assert QuenchRun(ModelParams(), D=3).chi == 12
    assert ThermalRun(ModelParams(), scheme="ftu").warmup_beta == 0.1
    assert ThermalRun(ModelParams(), scheme="ntu").warmup_beta == 0.0


def test_classical_quench_csv(tmp_path):
    out = tmp_path / "q.csv"
    run = QuenchRun(ModelParams(hx=0.0), D=2, dt=0.01, scheme="ntu", t_max=0.3, observable_stride=5, with_xi=False)
    rec = run_quench(run, out_csv=out)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + 7
    back = EvolutionRecord.from_csv(out)
    t = back.column("time_or_beta")
    np.testing.assert_allclose(back.column("sx"), np.cos(2 * t) ** 4, atol=1e-10)
    assert np.max(np.abs(back.column("energy") - back.rows[0].energy)) < 1e-10
    assert rec.terminated == "completed" and survival_time(rec) == pytest.approx(0.3)


def test_survival_time_uses_last_good_row():
    rec = EvolutionRecord(ModelParams(), "ntu", 2, terminated="energy-drift")
    for i, t in enumerate([0.0, 0.1, 0.2]):
        rec.rows.append(EvolutionRow(i, t, 1, 0, 0, 0, 0, 0))
    assert survival_time(rec) == 0.1


def test_quench_resume_reproduces_uninterrupted_run(tmp_path):
    run = QuenchRun(ModelParams(hx=1.5), D=2, scheme="ntu", t_max=0.2, observable_stride=5, with_xi=False)
    full = run_quench(run)
    ck = tmp_path / "r.ckpt"
    out = tmp_path / "r.csv"
    part = run_quench(run, out_csv=out, checkpoint_path=ck, checkpoint_every=10, stop_after=13)
    assert part.terminated == "interrupted"
    run_quench(run, out_csv=out, resume=ck)
    resumed = EvolutionRecord.from_csv(out)
    assert [r.step for r in resumed.rows] == [r.step for r in full.rows]
    for name in ("sx", "sz", "energy"):
        np.testing.assert_allclose(resumed.column(name), full.column(name), atol=1e-10, rtol=0)


def test_thermal_run_starts_at_zero_and_magnetizes():
    run = ThermalRun(ModelParams(hx=0.0), hz=(1e-2,), D=2, chi=8, dbeta=0.01, beta_max=0.4, observable_stride=5, with_xi=False)
    rec = run_thermal_single(run, 1e-2)
    sz = rec.column("sz")
    assert rec.rows[0].time_or_beta == 0.0 and sz[0] == 0.0
    assert np.all(np.diff(sz) > 0)
    np.testing.assert_allclose(rec.column("time_or_beta"), 0.05 * np.arange(len(sz)), atol=1e-12)
