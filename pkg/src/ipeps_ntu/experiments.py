"""Experiment drivers: sudden quench, thermal bias sweeps and the critical-temperature fit."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.interpolate
import scipy.optimize
import scipy.stats

from . import checkpoint as ckpt
from .ctmrg import (
    CtmEnvironment,
    converge,
    correlation_length,
    expect_bond_energy,
    expect_one_site,
)
from .errors import CrossoverNotBracketedError, FitError
from .gates import SX, SZ, ModelParams, quench_gate, second_order_schedule
from .lattice import IpepsState, initial_product_state
from .thermal import (
    PurificationState,
    infinite_temperature_state,
    thermal_schedule,
    thermal_step,
    warmup_config,
)
from .truncation import TruncationConfig, evolve_step

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "time_or_beta", "sx", "sz", "energy", "xi", "max_eps", "ctm_sweeps")

#: Default bias fields of the pseudo-critical fits, keyed by transverse field.
BIAS_GRIDS = {
    2.9: tuple(np.geomspace(5e-4, 1e-2, 6)),
    2.5: tuple(np.geomspace(3.5e-4, 5.6e-3, 6)),
}


# --------------------------------------------------------------------------
# records


@dataclass
class EvolutionRow:
    step: int
    time_or_beta: float
    sx: float
    sz: float
    energy: float
    xi: float
    max_eps: float
    ctm_sweeps: int


@dataclass
class EvolutionRecord:
    """Observable time (or beta) series of one run."""

    params: ModelParams
    scheme: str
    D: int
    rows: list = field(default_factory=list)
    terminated: str = "completed"
    csv_path: Path | None = None

    def append(self, row: EvolutionRow) -> None:
        self.rows.append(row)
        if self.csv_path is not None:
            new = not self.csv_path.exists() or self.csv_path.stat().st_size == 0
            with open(self.csv_path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(CSV_COLUMNS)
                w.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path, params=None, scheme="", D=0) -> "EvolutionRecord":
        rec = cls(params or ModelParams(), scheme, D)
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rec.rows.append(
                    EvolutionRow(
                        int(d["step"]),
                        *(float(d[c]) for c in CSV_COLUMNS[1:-1]),
                        int(d["ctm_sweeps"]),
                    )
                )
        return rec


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _truncate_csv(path: Path, last_step: int) -> None:
    """Drop rows written after ``last_step`` (left over from an interrupted run)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


# --------------------------------------------------------------------------
# observables


def observe(
    state,
    params: ModelParams,
    chi: int,
    env: CtmEnvironment | None = None,
    with_xi: bool = True,
    tol: float = 1e-10,
    max_sweeps: int = 200,
):
    """Converge CTMRG (warm-started from ``env``) and evaluate the standard observables.

    Returns ``(values, env)`` with ``values`` a dict of ``sx, sz, energy, xi, ctm_sweeps``.
    """
    env = converge(state, chi, tol=tol, max_sweeps=max_sweeps, env=env)
    vals = {
        "sx": expect_one_site(env, state, SX),
        "sz": expect_one_site(env, state, SZ),
        "energy": expect_bond_energy(env, state, params),
        "xi": correlation_length(env, state) if with_xi else math.nan,
        "ctm_sweeps": env.sweeps,
    }
    return vals, env


# --------------------------------------------------------------------------
# quench


@dataclass
class QuenchRun:
    params: ModelParams
    D: int = 2
    chi: int | None = None
    dt: float = 0.01
    scheme: str = "ntu"
    t_max: float = 1.0
    energy_drift_cap: float = 0.01
    observable_stride: int = 10
    with_xi: bool = True
    ctm_tol: float = 1e-10
    ctm_max_sweeps: int = 200

    def __post_init__(self):
        if self.chi is None:
            self.chi = 4 * self.D
        if not self.energy_drift_cap > 0:
            raise ValueError("energy_drift_cap must be positive")
        if not self.dt > 0 or self.observable_stride < 1:
            raise ValueError("dt must be positive and observable_stride >= 1")
        TruncationConfig(self.scheme, self.D)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))


def _save_ckpt(path, state, step, t, run_params, scheme, env, extra):
    if path is not None:
        ckpt.save(path, ckpt.Checkpoint(state, step, t, run_params, scheme, env, None, extra))


def run_quench(
    run: QuenchRun,
    out_csv=None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    resume=None,
    trace: Callable[[str], None] | None = None,
    stop_after: int | None = None,
) -> EvolutionRecord:
    """Real-time evolution from the fully polarized ``|+>`` product state.

    Every ``observable_stride`` steps CTMRG is reconverged (warm start) and a
    row is recorded.  The run stops at ``t_max`` or as soon as the energy per
    site drifts from its initial value by more than ``energy_drift_cap``.
    ``stop_after`` halts after that many steps without marking the run as
    finished (used to emulate interruptions).
    """
    params = run.params
    config = TruncationConfig(run.scheme, run.D)
    schedule = second_order_schedule(lambda s: quench_gate(params, s), run.dt)
    record = EvolutionRecord(params, run.scheme, run.D, csv_path=Path(out_csv) if out_csv else None)

    if resume is not None:
        ck = ckpt.load(resume)
        state, env, step = ck.state, ck.env, ck.step_index
        e0, eps_acc = ck.extra["e0"], ck.extra["eps_acc"]
        if record.csv_path is not None:
            _truncate_csv(record.csv_path, step)
    else:
        state = initial_product_state(2, np.array([1.0, 1.0]) / math.sqrt(2), dtype=complex)
        step, eps_acc = 0, 0.0
        if record.csv_path is not None and record.csv_path.exists():
            record.csv_path.unlink()
        vals, env = observe(state, params, run.chi, None, run.with_xi, run.ctm_tol, run.ctm_max_sweeps)
        e0 = vals["energy"]
        record.append(EvolutionRow(0, 0.0, max_eps=0.0, **_row_vals(vals)))

    n_total = run.n_steps
    while step < n_total:
        if stop_after is not None and step >= stop_after:
            record.terminated = "interrupted"
            return record
        if run.scheme == "ftu":
            env = converge(state, run.chi, env=env)
        state, rep = evolve_step(state, schedule, config, env)
        env = rep.env or env
        step += 1
        eps_acc = max(eps_acc, rep.max_eps)
        t = step * run.dt
        if trace is not None:
            trace(rep.to_json(step=step, time=t))
        if step % run.observable_stride == 0 or step == n_total:
            vals, env = observe(state, params, run.chi, env, run.with_xi, run.ctm_tol, run.ctm_max_sweeps)
            record.append(EvolutionRow(step, t, max_eps=eps_acc, **_row_vals(vals)))
            eps_acc = 0.0
            if abs(vals["energy"] - e0) > run.energy_drift_cap:
                record.terminated = "energy-drift"
                break
        if checkpoint_every and step % checkpoint_every == 0:
            _save_ckpt(checkpoint_path, state, step, t, params, run.scheme, env, {"e0": e0, "eps_acc": eps_acc})
    return record


def _row_vals(vals: dict) -> dict:
    return {k: vals[k] for k in ("sx", "sz", "energy", "xi", "ctm_sweeps")}


def survival_time(record: EvolutionRecord) -> float:
    """Last recorded time before the energy drift exceeded its cap."""
    times = record.column("time_or_beta")
    if record.terminated == "energy-drift":
        return float(times[-2]) if len(times) > 1 else 0.0
    return float(times[-1])


# --------------------------------------------------------------------------
# thermal


@dataclass
class ThermalRun:
    params: ModelParams
    hz: Sequence[float] = (0.0,)
    D: int = 2
    chi: int = 40
    dbeta: float = 0.0025
    scheme: str = "ntu"
    beta_max: float = 1.2
    warmup_beta: float | None = None
    observable_stride: int = 40
    with_xi: bool = True
    ctm_tol: float = 1e-10
    ctm_max_sweeps: int = 200

    def __post_init__(self):
        if not self.dbeta > 0:
            raise ValueError("dbeta must be positive")
        if len(self.hz) == 0:
            raise ValueError("hz list is empty")
        if self.warmup_beta is None:
            self.warmup_beta = 0.1 if self.scheme == "ftu" else 0.0
        TruncationConfig(self.scheme, self.D)

    @property
    def n_steps(self) -> int:
        return int(round(self.beta_max / self.dbeta))


def run_thermal_single(
    run: ThermalRun,
    hz: float,
    out_csv=None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    resume=None,
    trace: Callable[[str], None] | None = None,
    stop_after: int | None = None,
) -> EvolutionRecord:
    """Imaginary-time sweep from ``beta = 0`` to ``beta_max`` at one bias field."""
    params = ModelParams(run.params.hx, hz, run.params.coupling)
    config = TruncationConfig(run.scheme, run.D)
    schedule = thermal_schedule(params, run.dbeta)
    record = EvolutionRecord(params, run.scheme, run.D, csv_path=Path(out_csv) if out_csv else None)

    if resume is not None:
        ck = ckpt.load(resume)
        state, env, step = ck.state, ck.env, ck.step_index
        eps_acc = ck.extra["eps_acc"]
        if record.csv_path is not None:
            _truncate_csv(record.csv_path, step)
    else:
        state = infinite_temperature_state()
        step, eps_acc, env = 0, 0.0, None
        if record.csv_path is not None and record.csv_path.exists():
            record.csv_path.unlink()
        vals, env = observe(state, params, run.chi, None, run.with_xi, run.ctm_tol, run.ctm_max_sweeps)
        record.append(EvolutionRow(0, 0.0, max_eps=0.0, **_row_vals(vals)))

    n_total = run.n_steps
    while step < n_total:
        if stop_after is not None and step >= stop_after:
            record.terminated = "interrupted"
            return record
        cfg = warmup_config(config, state.beta, run.warmup_beta)
        if cfg.scheme == "ftu":
            env = converge(state, run.chi, env=env)
        beta = (step + 1) * run.dbeta
        state, rep = thermal_step(state, schedule, cfg, beta, env if cfg.scheme == "ftu" else None)
        if rep.env is not None:
            env = rep.env
        step += 1
        eps_acc = max(eps_acc, rep.max_eps)
        if trace is not None:
            trace(rep.to_json(step=step, beta=beta, hz=hz))
        if step % run.observable_stride == 0 or step == n_total:
            vals, env = observe(state, params, run.chi, env, run.with_xi, run.ctm_tol, run.ctm_max_sweeps)
            record.append(EvolutionRow(step, beta, max_eps=eps_acc, **_row_vals(vals)))
            eps_acc = 0.0
        if checkpoint_every and step % checkpoint_every == 0:
            _save_ckpt(checkpoint_path, state, step, beta, params, run.scheme, env, {"eps_acc": eps_acc})
    return record


def run_thermal(run: ThermalRun, out_dir=None, **kw) -> list[EvolutionRecord]:
    """One :func:`run_thermal_single` per bias field; CSVs go to ``out_dir`` if given."""
    out = []
    for hz in run.hz:
        csv_path = None
        if out_dir is not None:
            csv_path = Path(out_dir) / f"thermal_hx{run.params.hx:g}_hz{hz:g}_{run.scheme}_D{run.D}.csv"
        out.append(run_thermal_single(run, hz, out_csv=csv_path, **kw))
    return out


# --------------------------------------------------------------------------
# pseudo-critical temperature and the power-law fit


def _noise_level(y: np.ndarray) -> float:
    """Rough iid noise estimate from third differences (variance ``20 sigma^2``)."""
    if len(y) < 8:
        return 0.0
    d3 = np.diff(y, 3)
    mad = np.median(np.abs(d3 - np.median(d3))) * 1.4826
    return float(mad / math.sqrt(20))


def steepest_slope_temperature(record, refine: int = 10) -> float:
    """Temperature ``T* = 1/beta*`` where ``|d<Z>/d beta|`` is largest.

    Parameters
    ----------
    record : EvolutionRecord or tuple of arrays
        Either a thermal record or ``(beta, sz)``.
    refine : int
        Density of the evaluation grid relative to the data grid.

    Raises
    ------
    CrossoverNotBracketedError
        If the steepest slope sits on the boundary of the sampled range.
    """
    if isinstance(record, EvolutionRecord):
        x, y = record.column("time_or_beta"), record.column("sz")
    else:
        x, y = (np.asarray(v, dtype=float) for v in record)
    if len(x) < 5:
        raise CrossoverNotBracketedError("need at least 5 points")
    order = np.argsort(x)
    x, y = x[order], y[order]
    sigma = _noise_level(y)
    if sigma <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        sigma = 0.0  # clean data: interpolate
    with warnings.catch_warnings():
        # an inexact smoothing target is fine; the returned spline is still usable
        warnings.filterwarnings("ignore", message=r"\s*The maximal number of iterations")
        spline = scipy.interpolate.UnivariateSpline(x, y, k=3, s=len(x) * sigma**2)
    fine = np.linspace(x[0], x[-1], refine * (len(x) - 1) + 1)
    slope = np.abs(spline.derivative()(fine))
    i = int(np.argmax(slope))
    edge = max(slope[0], slope[-1])
    if i in (0, len(fine) - 1) or slope[i] <= edge * (1 + 1e-3):
        raise CrossoverNotBracketedError(
            f"steepest slope at the edge of beta in [{x[0]:g}, {x[-1]:g}]"
        )
    return 1.0 / fine[i]


@dataclass
class FitResult:
    tc: float
    amp: float
    inv_beta_delta: float
    ci95: dict
    pseudo_tc_points: list

    def to_dict(self) -> dict:
        return {
            "tc": self.tc,
            "amp": self.amp,
            "inv_beta_delta": self.inv_beta_delta,
            "ci95": dict(self.ci95),
            "points": [list(p) for p in self.pseudo_tc_points],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _power_law(theta, hz):
    tc, amp, expo = theta
    return tc + amp * hz**expo


def _lm(hz, ts, theta0, max_iter):
    res = scipy.optimize.least_squares(
        lambda th: _power_law(th, hz) - ts, theta0, method="lm", max_nfev=max_iter, xtol=1e-15, ftol=1e-15, gtol=1e-15
    )
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"fit did not converge: {res.message} (nfev={res.nfev}, x={res.x})")
    return res


def fit_tc(points, max_iter: int = 500, bootstrap: int = 0, seed: int | None = None) -> FitResult:
    """Levenberg-Marquardt fit of ``T*(hz) = Tc + A hz**e``.

    Confidence half-widths come from the linearized covariance scaled by
    the residual variance and the two-sided 95% Student-t factor.  With
    ``bootstrap > 0`` they are instead half the 2.5-97.5 percentile range
    of that many residual-resampled refits.
    """
    pts = sorted((float(h), float(t)) for h, t in points)
    if len(pts) < 4:
        raise FitError("need at least 4 (hz, T*) points")
    hz = np.array([p[0] for p in pts])
    ts = np.array([p[1] for p in pts])
    if len(set(hz)) != len(hz) or np.any(hz <= 0):
        raise FitError("bias fields must be distinct and positive")
    spread = ts.max() - ts.min()
    tc0 = ts.min() - 0.1 * spread
    e0 = 8 / 15
    amp0 = float(np.mean((ts[[0, -1]] - tc0) / hz[[0, -1]] ** e0))
    theta0 = np.array([tc0, amp0, e0])

    res = _lm(hz, ts, theta0, max_iter)
    dof = len(ts) - 3
    jac = res.jac
    ssr = float(np.sum(res.fun**2))
    try:
        cov = np.linalg.inv(jac.T @ jac) * (ssr / dof if dof > 0 else math.nan)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular fit Jacobian: {exc}") from exc
    tq = scipy.stats.t.ppf(0.975, dof) if dof > 0 else math.nan
    half = tq * np.sqrt(np.clip(np.diag(cov), 0, None))
    if bootstrap > 0:
        rng = np.random.default_rng(seed)
        fitted = ts + res.fun
        draws = []
        for _ in range(bootstrap):
            sample = fitted - rng.choice(res.fun, size=len(ts), replace=True)
            try:
                draws.append(_lm(hz, sample, res.x, max_iter).x)
            except FitError:
                continue
        if draws:
            lo, hi = np.percentile(np.array(draws), [2.5, 97.5], axis=0)
            half = (hi - lo) / 2
    tc, amp, expo = (float(v) for v in res.x)
    if not tc < ts.min():
        log.warning("fitted Tc=%.4f is not below the smallest T*=%.4f", tc, ts.min())
    return FitResult(
        tc=tc,
        amp=amp,
        inv_beta_delta=expo,
        ci95={"tc": float(half[0]), "amp": float(half[1]), "inv_beta_delta": float(half[2])},
        pseudo_tc_points=pts,
    )
