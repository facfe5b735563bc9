"""Hermitian purification of thermal states.

The half-temperature density matrix ``rho(beta/2)`` is written as an iPEPS
whose physical leg runs over the Hermitian operator basis
``(X, Y, Z, 1)``::

    rho(beta/2) = sum_{a_1 a_2 ...} c_{a_1 a_2 ...} O^{a_1} (x) O^{a_2} (x) ...

Because the basis is Hermitian and the evolution is a conjugation
``rho -> g rho g^dagger``, all coefficients stay real.  Expectation values are
``Tr[rho(beta/2) O rho(beta/2)] / Tr[rho(beta/2)^2]``, i.e. thermal averages
at inverse temperature ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .ctmrg import CtmEnvironment, converge
from .errors import SymmetryViolationError
from .gates import OPERATOR_BASIS, ModelParams, ScheduleItem, second_order_schedule, thermal_gate
from .lattice import IpepsState, initial_product_state
from .truncation import StepReport, TruncationConfig, evolve_step

#: Imaginary residue tolerated before a purification is declared non-Hermitian.
REALNESS_TOL = 1e-12


@dataclass(frozen=True)
class PurificationState:
    """Operator-basis iPEPS of ``rho(beta/2)``; ``beta`` is the full inverse temperature."""

    inner: IpepsState
    beta: float = 0.0

    basis = OPERATOR_BASIS

    def __post_init__(self):
        if self.inner.phys_dim != len(OPERATOR_BASIS):
            raise ValueError(f"purification needs p=4, got p={self.inner.phys_dim}")
        check_real(self.inner)
        if self.inner.scalar_kind != "real":
            object.__setattr__(self, "inner", _real_part(self.inner))


def _real_part(state: IpepsState) -> IpepsState:
    return IpepsState(np.ascontiguousarray(state.a.real), np.ascontiguousarray(state.b.real), state.normalization_log)


def check_real(state: IpepsState) -> None:
    """Raise :class:`SymmetryViolationError` if a tensor has an imaginary residue."""
    for name, t in (("A", state.a), ("B", state.b)):
        if np.iscomplexobj(t):
            scale = max(float(np.max(np.abs(t))), 1e-300)
            resid = float(np.max(np.abs(t.imag))) / scale
            if resid > REALNESS_TOL:
                raise SymmetryViolationError(f"tensor {name} has imaginary residue {resid:.2e}")


def infinite_temperature_state() -> PurificationState:
    """``D = 1`` purification with only the identity component, ``rho(0) ~ 1``."""
    return PurificationState(initial_product_state(4, [0.0, 0.0, 0.0, 1.0], dtype=float), 0.0)


def thermal_schedule(params: ModelParams, dbeta: float) -> list[ScheduleItem]:
    """Second-order step that advances ``beta`` by ``dbeta``."""
    return second_order_schedule(lambda s: thermal_gate(params, s), dbeta)


def thermal_step(
    state: PurificationState,
    schedule: list[ScheduleItem],
    config: TruncationConfig,
    beta: float,
    env: CtmEnvironment | None = None,
) -> tuple[PurificationState, StepReport]:
    """One Trotter step on the purification; ``beta`` is the value reached afterwards."""
    inner, report = evolve_step(state.inner, schedule, config, env)
    check_real(inner)
    return PurificationState(inner, beta), report


def warmup_config(config: TruncationConfig, beta: float, warmup_beta: float) -> TruncationConfig:
    """SVDU while ``beta < warmup_beta``, the configured scheme afterwards."""
    if beta < warmup_beta and config.scheme != "svdu":
        return TruncationConfig(
            scheme="svdu",
            target_D=config.target_D,
            als_max_sweeps=config.als_max_sweeps,
            als_rel_tol=config.als_rel_tol,
            pinv_tol_grid=config.pinv_tol_grid,
            debug=config.debug,
        )
    return config


def thermal_evolve(
    state: PurificationState,
    params: ModelParams,
    dbeta: float,
    config: TruncationConfig,
    beta_max: float,
    warmup_beta: float = 0.0,
    chi: int | None = None,
) -> Iterator[tuple[float, PurificationState]]:
    """Imaginary-time evolution, yielding ``(beta, state)`` after every step.

    ``beta`` after ``N`` steps from ``state.beta`` is ``state.beta + N * dbeta``.
    FTU runs need ``chi``; their environment is reconverged (warm-started)
    before every step.
    """
    if not dbeta > 0:
        raise ValueError("dbeta must be positive")
    if warmup_beta < 0:
        raise ValueError("warmup_beta must be non-negative")
    if config.scheme == "ftu" and chi is None:
        raise ValueError("FTU evolution needs chi")
    schedule = thermal_schedule(params, dbeta)
    beta0 = state.beta
    n_steps = max(0, math.ceil((beta_max - beta0) / dbeta - 1e-9))
    env = None
    for n in range(1, n_steps + 1):
        cfg = warmup_config(config, state.beta, warmup_beta)
        if cfg.scheme == "ftu":
            env = converge(state, chi, env=env)
        state, report = thermal_step(state, schedule, cfg, beta0 + n * dbeta, env)
        env = report.env or env
        yield state.beta, state
