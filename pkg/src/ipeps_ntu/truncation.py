"""Bond truncation: SVDU, NTU and FTU sharing one ALS optimizer.

After a gate is applied and reduced (:func:`~ipeps_ntu.lattice.apply_gate_and_reduce`)
the exact bond matrix ``P = R_A R_B^T`` has to be approximated by
``M_A M_B^T`` with inner dimension ``D``.  The error is measured in a metric
``g`` over the ``(m, n)`` legs of ``P``::

    eps = vec(M_A M_B^T - P)^dagger  g  vec(M_A M_B^T - P)

``g`` is stored as a ``(m*n, m*n)`` matrix whose rows are bra indices.  SVDU
uses ``g = 1``, NTU the exactly contracted nearest-neighbour cluster and FTU a
CTMRG environment.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .ctmrg import CtmEnvironment, converge
from .errors import DegenerateMetricError, MonotonicityError, StaleEnvironmentError
from .gates import SITES, ScheduleItem
from .lattice import IpepsState, ReducedPair, apply_gate_and_reduce, assemble, canonical_pair
from .tensor import eigh_hermitian, hermitize, pinv_from_eigh, svd_truncated

log = logging.getLogger(__name__)

Scheme = Literal["svdu", "ntu", "ftu"]

#: Singular values below this fraction of the largest are never kept as bond states.
SVD_CUTOFF = 1e-14
#: Normalized error below which the ALS loop stops immediately.
EPS_FLOOR = 1e-26
#: Fraction of clamped negative spectral weight above which an FTU metric is flagged.
CLAMP_WARNING = 0.05


@dataclass(frozen=True)
class TruncationConfig:
    scheme: Scheme = "ntu"
    target_D: int = 2
    als_max_sweeps: int = 100
    als_rel_tol: float = 1e-12
    pinv_tol_grid: tuple = (1e-15, 1e-12, 1e-10, 1e-8)
    debug: bool = False

    def __post_init__(self):
        if self.scheme not in ("svdu", "ntu", "ftu"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.target_D < 1:
            raise ValueError("target_D must be >= 1")
        grid = tuple(self.pinv_tol_grid)
        if not grid or list(grid) != sorted(grid):
            raise ValueError("pinv_tol_grid must be non-empty and ascending")
        object.__setattr__(self, "pinv_tol_grid", grid)


@dataclass
class MetricTensor:
    g: np.ndarray
    provenance: Literal["identity", "ntu-exact", "ftu-ctmrg"]
    clamped_weight: float = 0.0
    warning: bool = False


@dataclass
class TruncationReport:
    epsilon_final: float
    epsilon_initial: float
    sweeps_used: int = 0
    chosen_pinv_tol: float | None = None
    svd_truncation_weight: float = 0.0
    history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# SVDU


def _balanced_split(x: np.ndarray, target_D: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Truncated SVD ``x ~ U S W^H`` split as ``M_A = U S^1/2``, ``M_B = conj(W) S^1/2``."""
    res = svd_truncated(x, target_D, rel_cutoff=SVD_CUTOFF)
    sq = np.sqrt(res.s)
    return res.u * sq, res.v.conj() * sq, res.truncation_weight


def svdu_truncate(pair: ReducedPair, target_D: int):
    """Local truncation by SVD of ``R_A R_B^T``; the error is the Frobenius one."""
    m_a, m_b, weight = _balanced_split(pair.product(), target_D)
    report = TruncationReport(epsilon_final=weight, epsilon_initial=weight, svd_truncation_weight=weight)
    return m_a, m_b, report


def identity_metric(pair: ReducedPair) -> MetricTensor:
    return MetricTensor(np.eye(pair.m * pair.n), "identity")


# --------------------------------------------------------------------------
# NTU


def _edge_pair(t: np.ndarray, keep: tuple[int, ...]) -> np.ndarray:
    """Trace all legs of ``t`` except ``keep`` against its conjugate.

    Returns legs ``keep`` (ket) followed by ``keep`` (bra).
    """
    traced = [i for i in range(t.ndim) if i not in keep]
    x = np.tensordot(t, t.conj(), axes=(traced, traced))
    order = np.argsort(np.argsort(keep))  # free legs come out in ascending axis order
    k = len(keep)
    return x.transpose(list(order) + [k + i for i in order])


def _central_double(q: np.ndarray, side: np.ndarray, leg: int) -> np.ndarray:
    """Double isometry with the outer neighbour ``side[ket, bra]`` absorbed on ``leg``.

    ``q`` has legs ``(p, x, y, z, m)``; the result has legs
    ``(x_rest..., m, x_rest'..., m')`` with the two remaining bond legs.
    """
    qs = np.tensordot(q, side, axes=(leg, 0))  # leg moved to the end as bra index
    rest = [i for i in range(1, 4) if i != leg]
    # qs legs: p, rest0, rest1, m, leg'  (order of the remaining q legs preserved)
    out = np.tensordot(qs, q.conj(), axes=([0, 4], [0, leg]))
    return out  # (r0, r1, m, r0', r1', m')


def ntu_metric(state: IpepsState, pair: ReducedPair) -> MetricTensor:
    """Exact metric of the nearest-neighbour cluster around the gated bond.

    In the canonical frame the cluster is::

              TL -- TR
              |     |
        NL -- QA == QB -- NR
              |     |
              BL -- BR

    where ``TL, BL, NL`` carry the right tensor of the bond and ``TR, BR, NR``
    the left one (checkerboard).  Outer bra and ket legs are traced pairwise.
    The contraction is ordered so its cost scales as ``D**8``.
    """
    left, right = canonical_pair(state, pair.bond)
    # neighbours of the left site are right-type tensors and vice versa
    e_nl = _edge_pair(right, (4,))  # (r, r')
    e_nr = _edge_pair(left, (2,))  # (l, l')
    e_tl = _edge_pair(right, (3, 4))  # (b, r, b', r')
    e_tr = _edge_pair(left, (3, 2))  # (b, l, b', l')
    e_bl = _edge_pair(right, (1, 4))  # (t, r, t', r')
    e_br = _edge_pair(left, (1, 2))  # (t, l, t', l')
    top = np.tensordot(e_tl, e_tr, axes=([1, 3], [1, 3]))  # (ta, ta', tb, tb')
    bot = np.tensordot(e_bl, e_br, axes=([1, 3], [1, 3]))  # (ba, ba', bb, bb')

    # q_a legs (p, t, l, b, m): absorb NL on l -> (t, b, m, t', b', m')
    lft = _central_double(pair.q_a, e_nl, 2)
    # q_b legs (p, t, b, r, n): absorb NR on r -> (t, b, n, t', b', n')
    rgt = _central_double(pair.q_b, e_nr, 3)

    x = np.tensordot(lft, top, axes=([0, 3], [0, 1]))  # (b, m, b', m', tb, tb')
    x = np.tensordot(x, bot, axes=([0, 2], [0, 1]))  # (m, m', tb, tb', bb, bb')
    x = np.tensordot(x, rgt, axes=([2, 4, 3, 5], [0, 1, 3, 4]))  # (m, m', n, n')
    mn = pair.m * pair.n
    g = x.transpose(1, 3, 0, 2).reshape(mn, mn)
    return MetricTensor(hermitize(g), "ntu-exact")


# --------------------------------------------------------------------------
# FTU


def _split_double(t: np.ndarray, axis: int) -> np.ndarray:
    """Split a double-layer leg of dimension ``D**2`` into ``(D, D)``."""
    d = int(round(math.sqrt(t.shape[axis])))
    return t.reshape(t.shape[:axis] + (d, d) + t.shape[axis + 1 :])


def _hole_half(c_up, t_up, t_side, c_dn, t_dn, q, legs, left_side: bool):
    """Contract one half of the CTMRG hole with the double isometry ``q``.

    Returns ``(x_up, x_dn, k, k')`` where ``x_up``/``x_dn`` are the open
    environment legs along the upper and lower edge and ``k`` the bond-facing
    leg of ``q``.
    """
    if left_side:
        x = np.tensordot(c_up, t_up, axes=(1, 0))  # (c1d, t1r, t1d)
        x = np.tensordot(x, t_side, axes=(0, 1))  # (t1r, t1d, t4d, t4r)
        x = np.tensordot(x, c_dn, axes=(2, 1))  # (t1r, t1d, t4r, c4r)
        x = np.tensordot(x, t_dn, axes=(3, 1))  # (t1r, t1d, t4r, t3r, t3u)
    else:
        x = np.tensordot(t_up, c_up, axes=(1, 0))  # (t1l, t1d, c2d)
        x = np.tensordot(x, t_side, axes=(2, 0))  # (t1l, t1d, t2d, t2l)
        x = np.tensordot(x, c_dn, axes=(2, 0))  # (t1l, t1d, t2l, c3l)
        x = np.tensordot(x, t_dn, axes=(3, 0))  # (t1l, t1d, t2l, t3l, t3u)
    # (x_up, up(D,D'), side(D,D'), x_dn, dn(D,D'))
    x = _split_double(_split_double(_split_double(x, 4), 2), 1)
    up, side, dn = legs
    # ket: contract q's (up, side, dn) with the ket halves
    y = np.tensordot(q, x, axes=([up, side, dn], [1, 3, 6]))  # (p, k, x_up, up', side', x_dn, dn')
    y = np.tensordot(y, q.conj(), axes=([0, 3, 4, 6], [0, up, side, dn]))  # (k, x_up, x_dn, k')
    return y.transpose(1, 2, 0, 3)


def ftu_metric(env: CtmEnvironment, pair: ReducedPair, state: IpepsState | None = None) -> MetricTensor:
    """Metric from the CTMRG environment surrounding the two-site hole.

    The result is hermitized, its overall sign fixed by a positive trace, and
    negative eigenvalues are clamped to zero (projection onto the PSD cone).
    """
    if not env.converged:
        raise StaleEnvironmentError("FTU needs a converged environment")
    if state is not None and not env.compatible_with(state):
        raise StaleEnvironmentError("environment bond dimensions do not match the state")
    bond = pair.bond
    e = env if bond.horizontal else env.rotated()
    s = 0 if bond.a_first else 1
    u = 1 - s
    lft = _hole_half(e.c[0][s], e.t[0][s], e.t[3][s], e.c[3][s], e.t[2][s], pair.q_a, (1, 2, 3), True)
    rgt = _hole_half(e.c[1][u], e.t[0][u], e.t[1][u], e.c[2][u], e.t[2][u], pair.q_b, (1, 3, 2), False)
    x = np.tensordot(lft, rgt, axes=([0, 1], [0, 1]))  # (m, m', n, n')
    mn = pair.m * pair.n
    g = x.transpose(1, 3, 0, 2).reshape(mn, mn)
    return psd_repair(g, "ftu-ctmrg")


def psd_repair(g: np.ndarray, provenance: str = "ftu-ctmrg") -> MetricTensor:
    """Hermitize, fix the sign by a positive trace and clamp negative eigenvalues.

    ``clamped_weight`` is the removed negative spectral weight relative to
    ``sum |lambda|``; above :data:`CLAMP_WARNING` the metric is flagged.
    """
    g = hermitize(g)
    if np.real(np.trace(g)) < 0:
        g = -g
    w, v = eigh_hermitian(g)
    neg = float(-np.sum(w[w < 0]))
    total = float(np.sum(np.abs(w)))
    clamped = neg / total if total > 0 else 0.0
    w = np.clip(w, 0.0, None)
    g = hermitize((v * w) @ v.conj().T)
    warn = clamped > CLAMP_WARNING
    if warn:
        log.warning("metric: clamped %.3g of its spectral weight", clamped)
    return MetricTensor(g, provenance, clamped_weight=clamped, warning=warn)


# --------------------------------------------------------------------------
# ALS


def truncation_error(metric: MetricTensor, pair: ReducedPair, m_a: np.ndarray, m_b: np.ndarray) -> float:
    """Normalized error ``eps / (P^dagger g P)``."""
    p = pair.product().reshape(-1)
    d = (m_a @ m_b.T).reshape(-1) - p
    norm = float(np.real(np.vdot(p, metric.g @ p)))
    return float(np.real(np.vdot(d, metric.g @ d))) / norm


class _AlsProblem:
    """Quadratic forms for one ALS half step, all in normalized units."""

    def __init__(self, pair: ReducedPair, metric: MetricTensor):
        self.m, self.n = pair.m, pair.n
        p = pair.product()
        self.g4 = metric.g.reshape(self.m, self.n, self.m, self.n)
        gp = (metric.g @ p.reshape(-1)).reshape(self.m, self.n)
        self.norm = float(np.real(np.vdot(p.reshape(-1), gp.reshape(-1))))
        if not self.norm > 0:
            raise DegenerateMetricError("exact bond matrix has zero norm in the metric")
        self.gp = gp / self.norm
        self.g4 = self.g4 / self.norm

    def reduced(self, fixed: np.ndarray, side: str):
        """``(g_X, J_X)`` for the free matrix on ``side`` with the other one fixed."""
        if side == "a":
            # g_A[(i',c'),(i,c)] = sum_{j'j} conj(M_B[j',c']) g[i'j',ij] M_B[j,c]
            x = np.tensordot(self.g4, fixed, axes=(3, 0))  # (i', j', i, c)
            x = np.tensordot(fixed.conj(), x, axes=(0, 1))  # (c', i', i, c)
            k = fixed.shape[1]
            g_red = x.transpose(1, 0, 2, 3).reshape(self.m * k, self.m * k)
            j_red = (self.gp @ fixed.conj()).reshape(-1)  # (i', c')
        else:
            x = np.tensordot(self.g4, fixed, axes=(2, 0))  # (i', j', j, c)
            x = np.tensordot(fixed.conj(), x, axes=(0, 0))  # (c', j', j, c)
            k = fixed.shape[1]
            g_red = x.transpose(1, 0, 2, 3).reshape(self.n * k, self.n * k)
            j_red = (self.gp.T @ fixed.conj()).reshape(-1)  # (j', c')
        return hermitize(g_red), j_red

    @staticmethod
    def energy(g_red, j_red, x) -> float:
        return float(np.real(np.vdot(x, g_red @ x)) - 2 * np.real(np.vdot(x, j_red)) + 1.0)


def _tilt(m_a: np.ndarray, m_b: np.ndarray, towards: str):
    """Regauge so the matrix that is *not* optimized is an isometry."""
    k = m_a.shape[1]
    res = svd_truncated(m_a @ m_b.T, k)
    u, s, w = res.u, res.s, res.v.conj()
    if len(s) < k:  # keep the inner dimension fixed
        pad = k - len(s)
        u = np.pad(u, ((0, 0), (0, pad)))
        w = np.pad(w, ((0, 0), (0, pad)))
        s = np.pad(s, (0, pad))
    if towards == "a":
        return u * s, w
    return u, w * s


def als_optimize(pair: ReducedPair, metric: MetricTensor, config: TruncationConfig, seed=None):
    """Alternating least squares for ``M_A M_B^T ~ R_A R_B^T`` in the metric ``g``.

    Each half step tilts the gauge, builds the reduced metric and source for
    the free matrix and sets it to ``pinv(g_X, tol) J_X`` with ``tol`` picked
    from ``config.pinv_tol_grid`` by smallest error.  Stops when the relative
    change of the error drops below ``config.als_rel_tol``.
    """
    if seed is None:
        m_a, m_b, svd_rep = svdu_truncate(pair, config.target_D)
    else:
        m_a, m_b = seed
        svd_rep = TruncationReport(0.0, 0.0)
    weight = svd_rep.svd_truncation_weight
    eps0 = truncation_error(metric, pair, m_a, m_b)
    report = TruncationReport(
        epsilon_final=eps0, epsilon_initial=eps0, svd_truncation_weight=weight, history=[eps0]
    )
    if config.target_D >= min(pair.m, pair.n) or eps0 <= EPS_FLOOR:
        return m_a, m_b, report

    prob = _AlsProblem(pair, metric)
    eps = eps0
    tol_used = None
    for sweep in range(1, config.als_max_sweeps + 1):
        eps_start = eps
        for side in ("a", "b"):
            m_a, m_b = _tilt(m_a, m_b, side)
            fixed = m_b if side == "a" else m_a
            g_red, j_red = prob.reduced(fixed, side)
            w, v = eigh_hermitian(g_red)
            best = None
            for tol in config.pinv_tol_grid:
                try:
                    x = pinv_from_eigh(w, v, tol) @ j_red
                except DegenerateMetricError:
                    continue
                e = prob.energy(g_red, j_red, x)
                if best is None or e < best[0]:
                    best = (e, tol, x)
            if best is None:
                raise DegenerateMetricError("reduced metric has no usable eigenvalues")
            e, tol_used, x = best
            if e > eps + 1e-12:
                raise MonotonicityError(f"ALS error rose from {eps:.3e} to {e:.3e}; metric not PSD?")
            if side == "a":
                m_a = x.reshape(prob.m, -1)
            else:
                m_b = x.reshape(prob.n, -1)
            eps = max(e, 0.0)
        report.history.append(eps)
        report.sweeps_used = sweep
        if eps <= EPS_FLOOR or abs(eps_start - eps) <= config.als_rel_tol * max(eps_start, EPS_FLOOR):
            break
    m_a, m_b, _ = _balanced_split(m_a @ m_b.T, config.target_D)
    report.epsilon_final = truncation_error(metric, pair, m_a, m_b)
    report.chosen_pinv_tol = tol_used
    return m_a, m_b, report


# --------------------------------------------------------------------------
# evolution step


@dataclass
class StepReport:
    max_eps: float
    bonds: list = field(default_factory=list)
    env_sweeps: int = 0
    env: CtmEnvironment | None = field(default=None, repr=False)

    def to_json(self, **extra) -> str:
        payload = {
            "max_eps": self.max_eps,
            "env_sweeps": self.env_sweeps,
            "bonds": [
                {k: v for k, v in asdict(r).items() if k != "history"} | {"bond": b}
                for b, r in self.bonds
            ],
        }
        payload.update(extra)
        return json.dumps(payload)


def truncate_bond(state: IpepsState, pair: ReducedPair, config: TruncationConfig, env=None):
    """Dispatch to the configured scheme; returns ``(m_a, m_b, report)``."""
    if config.scheme == "svdu":
        return svdu_truncate(pair, config.target_D)
    if config.scheme == "ntu":
        metric = ntu_metric(state, pair)
    else:
        metric = ftu_metric(env, pair, state)
    return als_optimize(pair, metric, config)


def _check_isometries(pair: ReducedPair) -> None:
    for q in (pair.q_a, pair.q_b):
        mat = q.reshape(-1, q.shape[-1])
        err = np.max(np.abs(mat.conj().T @ mat - np.eye(mat.shape[1])))
        assert err < 1e-12, f"isometry violated by {err:.2e}"


def evolve_step(
    state: IpepsState,
    schedule: list[ScheduleItem],
    config: TruncationConfig,
    env: CtmEnvironment | None = None,
) -> tuple[IpepsState, StepReport]:
    """Apply one full Trotter schedule.

    One-site gates are absorbed into the physical legs; every bond gate is
    reduced, truncated with ``config.scheme`` and re-assembled.  FTU requires
    ``env``; if the bond dimensions of the state drift away from those of
    ``env`` (e.g. while ``D`` is still growing) the environment is
    re-converged on the current state and returned in ``report.env``.
    """
    if config.scheme == "ftu" and env is None:
        raise StaleEnvironmentError("FTU evolution requires a CTMRG environment")
    report = StepReport(max_eps=0.0)
    for item in schedule:
        if item.target == SITES:
            state = state.apply_one_site(item.gate.one_site)
            continue
        pair = apply_gate_and_reduce(state, item.gate, item.target)
        if config.debug:
            _check_isometries(pair)
        if config.scheme == "ftu" and not env.compatible_with(state):
            env = converge(state, env.chi, env=env)
            report.env_sweeps += env.sweeps
        m_a, m_b, rep = truncate_bond(state, pair, config, env)
        state = assemble(state, pair, m_a, m_b)
        report.bonds.append((item.target.value, rep))
        report.max_eps = max(report.max_eps, rep.epsilon_final)
    report.env = env
    return state, report
