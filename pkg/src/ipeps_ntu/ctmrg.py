"""Corner transfer matrix renormalization for the checkerboard double layer.

Environment tensors are indexed by sublattice ``s`` (0 = A, 1 = B): by the
checkerboard translation symmetry the environment of a site depends only on
its sublattice.  Legs of every environment tensor are listed clockwise::

    C1 (down, right)     T1 (left, right, down)     C2 (left, down)
    T4 (down, up, right)        site               T2 (up, down, left)
    C4 (right, up)       T3 (right, left, up)       C3 (up, left)

Edge legs that touch the site are double-layer legs of dimension ``D**2``
(ket index major).  With this convention a 90 degree rotation of the lattice
only relabels environment tensors, so a single left move plus rotations
implements all four directional moves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
import numpy as np
import scipy.sparse.linalg

from .errors import DivergenceError, IllConditionedStateError, StaleEnvironmentError
from .gates import OPERATOR_BASIS, SX, SZ, ModelParams
from .lattice import IpepsState
from .tensor import svd_truncated

log = logging.getLogger(__name__)

PROJECTOR_CUTOFF = 1e-10


def double_tensor(t: np.ndarray, op: np.ndarray | None = None) -> np.ndarray:
    """Bra-ket double tensor ``sum conj(t[p']) op[p', p] t[p]`` with legs of dim ``D**2``."""
    ket = t if op is None else np.tensordot(op, t, axes=(1, 0))
    d = np.tensordot(ket, t.conj(), axes=(0, 0))  # (t,l,b,r, t',l',b',r')
    _, dt, dl, db, dr = t.shape
    d = d.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return np.ascontiguousarray(d).reshape(dt * dt, dl * dl, db * db, dr * dr)


def _rotate_double(a: np.ndarray) -> np.ndarray:
    return a.transpose(3, 0, 1, 2)


@dataclass
class CtmEnvironment:
    """Corners ``c[k][s]`` and edges ``t[k][s]`` (``k`` = 0..3 for C1..C4, T1..T4)."""

    c: list
    t: list
    chi: int
    converged: bool = False
    sweeps: int = 0
    spectra: list = field(default_factory=list)
    bond_shape: tuple = ()

    def rotated(self) -> "CtmEnvironment":
        """Relabel for a lattice rotated counter-clockwise by 90 degrees."""
        c = [self.c[1], self.c[2], self.c[3], self.c[0]]
        t = [self.t[1], self.t[2], self.t[3], self.t[0]]
        bs = self.bond_shape
        if bs:
            bs = (bs[3], bs[0], bs[1], bs[2])
        return replace(self, c=c, t=t, bond_shape=bs)

    def copy(self) -> "CtmEnvironment":
        return replace(
            self,
            c=[list(x) for x in self.c],
            t=[list(x) for x in self.t],
            spectra=list(self.spectra),
        )

    def corner_spectra(self) -> list[np.ndarray]:
        out = []
        for k in range(4):
            for s in range(2):
                sv = np.linalg.svd(self.c[k][s], compute_uv=False)
                out.append(sv / sv[0] if sv[0] > 0 else sv)
        return out

    def compatible_with(self, state: IpepsState) -> bool:
        return self.bond_shape == _bond_shape(state)


def _bond_shape(state: IpepsState) -> tuple:
    return tuple(state.a.shape[1:])


# --------------------------------------------------------------------------
# initialization and moves


def _trace_vec(dim2: int) -> np.ndarray:
    d = int(round(math.sqrt(dim2)))
    return np.eye(d).reshape(dim2)


def initial_environment(sites: list[np.ndarray], chi: int) -> CtmEnvironment:
    """Environment of an open boundary where outer bra and ket legs are traced."""
    c = [[None, None] for _ in range(4)]
    t = [[None, None] for _ in range(4)]
    for s in range(2):
        # corners sit on diagonal neighbours (same sublattice), edges on nearest ones
        d, o = sites[s], sites[1 - s]
        dt, dl, db, dr = (_trace_vec(n) for n in d.shape)
        ot, ol, ob, orr = (_trace_vec(n) for n in o.shape)
        c[0][s] = np.einsum("tlbr,t,l->br", d, dt, dl)
        c[1][s] = np.einsum("tlbr,t,r->lb", d, dt, dr)
        c[2][s] = np.einsum("tlbr,b,r->tl", d, db, dr)
        c[3][s] = np.einsum("tlbr,l,b->rt", d, dl, db)
        t[0][s] = np.einsum("tlbr,t->lrb", o, ot)
        t[1][s] = np.einsum("tlbr,r->tbl", o, orr)
        t[2][s] = np.einsum("tlbr,b->rlt", o, ob)
        t[3][s] = np.einsum("tlbr,l->btr", o, ol)
    env = CtmEnvironment(c=c, t=t, chi=chi)
    _normalize_env(env)
    return env


def _normalize_env(env: CtmEnvironment) -> None:
    for k in range(4):
        for s in range(2):
            c = env.c[k][s]
            env.c[k][s] = c / np.linalg.norm(c, 2)
            e = env.t[k][s]
            env.t[k][s] = e / np.max(np.abs(e))


def _quadrants(env: CtmEnvironment, sites, s: int):
    """Four quadrants around the cut below row ``y`` whose upper-left site is ``s``."""
    u = 1 - s
    c1, t1, t4 = env.c[0][s], env.t[0][s], env.t[3][s]
    q1 = np.tensordot(c1, t1, axes=(1, 0))  # (c1d, t1r, t1d)
    q1 = np.tensordot(q1, t4, axes=(0, 1))  # (t1r, t1d, t4d, t4r)
    q1 = np.tensordot(q1, sites[s], axes=([1, 3], [0, 1]))  # (t1r, t4d, ab, ar)
    q1 = q1.transpose(1, 2, 0, 3)  # down (t4d, ab), right (t1r, ar)

    c2, t1u, t2 = env.c[1][u], env.t[0][u], env.t[1][u]
    q2 = np.tensordot(t1u, c2, axes=(1, 0))  # (t1l, t1d, c2d)
    q2 = np.tensordot(q2, t2, axes=(2, 0))  # (t1l, t1d, t2d, t2l)
    q2 = np.tensordot(q2, sites[u], axes=([1, 3], [0, 3]))  # (t1l, t2d, al, ab)
    q2 = q2.transpose(0, 2, 1, 3)  # left (t1l, al), down (t2d, ab)

    c4, t3u, t4u = env.c[3][u], env.t[2][u], env.t[3][u]
    q4 = np.tensordot(c4, t4u, axes=(1, 0))  # (c4r, t4u, t4r)
    q4 = np.tensordot(q4, t3u, axes=(0, 1))  # (t4u, t4r, t3r, t3u)
    q4 = np.tensordot(q4, sites[u], axes=([1, 3], [1, 2]))  # (t4u, t3r, at, ar)
    q4 = q4.transpose(0, 2, 1, 3)  # up (t4u, at), right (t3r, ar)

    c3, t2s, t3s = env.c[2][s], env.t[1][s], env.t[2][s]
    q3 = np.tensordot(t2s, c3, axes=(1, 0))  # (t2u, t2l, c3l)
    q3 = np.tensordot(q3, t3s, axes=(2, 0))  # (t2u, t2l, t3l, t3u)
    q3 = np.tensordot(q3, sites[s], axes=([1, 3], [3, 2]))  # (t2u, t3l, at, al)
    q3 = q3.transpose(0, 2, 1, 3)  # up (t2u, at), left (t3l, al)
    return q1, q2, q3, q4


def _projectors(env: CtmEnvironment, sites, s: int, chi: int):
    """Oblique projectors for the left legs of cut ``s``.

    Returns ``(p_upper, p_lower)``: ``p_upper`` attaches to legs arriving from
    above the cut, ``p_lower`` to legs arriving from below; both have shape
    ``(chi_old, D**2, chi_new)``.
    """
    q1, q2, q3, q4 = _quadrants(env, sites, s)
    up = np.tensordot(q1, q2, axes=([2, 3], [0, 1]))  # (i..., j...)
    dn = np.tensordot(q4, q3, axes=([2, 3], [2, 3]))
    shp_i = up.shape[:2]
    ni = shp_i[0] * shp_i[1]
    r1 = up.reshape(ni, -1)
    r2 = dn.reshape(ni, -1)
    r1 = r1 / np.max(np.abs(r1))
    r2 = r2 / np.max(np.abs(r2))
    res = svd_truncated(r1.T @ r2, chi, rel_cutoff=PROJECTOR_CUTOFF)
    isq = 1.0 / np.sqrt(res.s)
    p_upper = (r2 @ res.v) * isq
    p_lower = (r1 @ res.u.conj()) * isq
    return p_upper.reshape(shp_i + (-1,)), p_lower.reshape(shp_i + (-1,))


def _left_move(env: CtmEnvironment, sites, chi: int) -> None:
    proj = [_projectors(env, sites, s, chi) for s in range(2)]
    new_c1, new_t4, new_c4 = [None, None], [None, None], [None, None]
    for s in range(2):
        u = 1 - s
        pu_above, pl_above = proj[u]  # cut above the absorbed site
        pu_below, pl_below = proj[s]  # cut below it
        x = np.tensordot(env.c[0][s], env.t[0][s], axes=(1, 0))  # (c1d, t1r, t1d)
        new_c1[u] = np.tensordot(pu_above, x, axes=([0, 1], [0, 2]))  # (k, t1r)
        y = np.tensordot(env.t[3][s], sites[s], axes=(2, 1))  # (t4d, t4u, at, ab, ar)
        y = np.tensordot(pl_above, y, axes=([0, 1], [1, 2]))  # (k_up, t4d, ab, ar)
        y = np.tensordot(pu_below, y, axes=([0, 1], [1, 2]))  # (k_dn, k_up, ar)
        new_t4[u] = y
        z = np.tensordot(env.c[3][s], env.t[2][s], axes=(0, 1))  # (c4u, t3r, t3u)
        new_c4[u] = np.tensordot(z, pl_below, axes=([0, 2], [0, 1]))  # (t3r, k)
    for s in range(2):
        c1 = new_c1[s]
        c4 = new_c4[s]
        t4 = new_t4[s]
        if not (np.all(np.isfinite(c1)) and np.all(np.isfinite(c4)) and np.all(np.isfinite(t4))):
            raise DivergenceError("non-finite environment tensor")
        env.c[0][s] = c1 / np.linalg.norm(c1, 2)
        env.c[3][s] = c4 / np.linalg.norm(c4, 2)
        env.t[3][s] = t4 / np.max(np.abs(t4))


def _sweep(env: CtmEnvironment, sites, chi: int) -> CtmEnvironment:
    for _ in range(4):
        _left_move(env, sites, chi)
        env = env.rotated()
        sites = [_rotate_double(a) for a in sites]
    return env


def _spectra_delta(old: list, new: list) -> float:
    if not old:
        return math.inf
    delta = 0.0
    for a, b in zip(old, new):
        n = max(len(a), len(b))
        pa = np.zeros(n)
        pb = np.zeros(n)
        pa[: len(a)] = a
        pb[: len(b)] = b
        delta = max(delta, float(np.max(np.abs(pa - pb))))
    return delta


def converge(
    state,
    chi: int,
    tol: float = 1e-10,
    max_sweeps: int = 200,
    env: CtmEnvironment | None = None,
    min_sweeps: int = 2,
) -> CtmEnvironment:
    """Run CTMRG sweeps until the normalized corner spectra stop changing.

    Parameters
    ----------
    state : IpepsState or PurificationState
        The state whose double-layer network is contracted.
    chi : int
        Environment bond dimension.
    env : CtmEnvironment, optional
        Warm start; ignored if its bond dimensions no longer match the state.
    """
    if chi < 1:
        raise ValueError("chi must be >= 1")
    ipeps = _as_ipeps(state)
    sites = [double_tensor(ipeps.a), double_tensor(ipeps.b)]
    if env is None or not env.compatible_with(ipeps):
        env = initial_environment(sites, chi)
    else:
        env = env.copy()
    env.chi = chi
    env.bond_shape = _bond_shape(ipeps)
    env.converged = False
    prev = env.corner_spectra()
    for sweep in range(1, max_sweeps + 1):
        env = _sweep(env, sites, chi)
        spectra = env.corner_spectra()
        delta = _spectra_delta(prev, spectra)
        prev = spectra
        env.sweeps = sweep
        if sweep >= min_sweeps and delta < tol:
            env.converged = True
            break
    else:
        log.warning("CTMRG not converged after %d sweeps (delta=%.3g)", max_sweeps, delta)
    env.spectra = prev
    return env


# --------------------------------------------------------------------------
# observables


def _as_ipeps(state) -> IpepsState:
    return getattr(state, "inner", state)


def insertion(state, op: np.ndarray) -> np.ndarray:
    """Operator to sandwich between bra and ket physical legs.

    For a pure state this is ``op``.  For a purification ``rho = sum c_a O^a``
    it is the basis-structure matrix ``Tr[O^a op O^b] / 2``.
    """
    if hasattr(state, "inner"):
        basis = np.array(OPERATOR_BASIS)
        return np.einsum("aij,jk,bki->ab", basis, op, basis) / 2
    return op


def _left_block(env, a_site, s):
    x = np.tensordot(env.c[0][s], env.t[0][s], axes=(1, 0))  # (c1d, t1r, t1d)
    x = np.tensordot(x, env.t[3][s], axes=(0, 1))  # (t1r, t1d, t4d, t4r)
    x = np.tensordot(x, a_site, axes=([1, 3], [0, 1]))  # (t1r, t4d, ab, ar)
    x = np.tensordot(x, env.c[3][s], axes=(1, 1))  # (t1r, ab, ar, c4r)
    x = np.tensordot(x, env.t[2][s], axes=([3, 1], [1, 2]))  # (t1r, ar, t3r)
    return x


def _right_block(env, a_site, s):
    x = np.tensordot(env.t[0][s], env.c[1][s], axes=(1, 0))  # (t1l, t1d, c2d)
    x = np.tensordot(x, env.t[1][s], axes=(2, 0))  # (t1l, t1d, t2d, t2l)
    x = np.tensordot(x, a_site, axes=([1, 3], [0, 3]))  # (t1l, t2d, al, ab)
    x = np.tensordot(x, env.c[2][s], axes=(1, 0))  # (t1l, al, ab, c3l)
    x = np.tensordot(x, env.t[2][s], axes=([3, 2], [0, 2]))  # (t1l, al, t3l)
    return x


def _transfer(env, a_site, s, vec):
    """Push a left vector ``(t1, a, t3)`` through one column of sublattice ``s``."""
    x = np.tensordot(vec, env.t[0][s], axes=(0, 0))  # (a, t3, t1r, t1d)
    x = np.tensordot(x, a_site, axes=([0, 3], [1, 0]))  # (t3, t1r, ab, ar)
    x = np.tensordot(x, env.t[2][s], axes=([0, 2], [1, 2]))  # (t1r, ar, t3r)
    return x


def _one_site_value(env, a_site, s) -> complex:
    x = np.tensordot(env.c[0][s], env.t[0][s], axes=(1, 0))  # (c1d, t1r, t1d)
    x = np.tensordot(x, env.c[1][s], axes=(1, 0))  # (c1d, t1d, c2d)
    x = np.tensordot(x, env.t[3][s], axes=(0, 1))  # (t1d, c2d, t4d, t4r)
    x = np.tensordot(x, a_site, axes=([0, 3], [0, 1]))  # (c2d, t4d, ab, ar)
    x = np.tensordot(x, env.t[1][s], axes=([0, 3], [0, 2]))  # (t4d, ab, t2d)
    y = np.tensordot(env.c[3][s], env.t[2][s], axes=(0, 1))  # (c4u, t3r, t3u)
    y = np.tensordot(y, env.c[2][s], axes=(1, 1))  # (c4u, t3u, c3u)
    return complex(np.tensordot(x, y, axes=([0, 1, 2], [0, 1, 2])))


def _check_env(env: CtmEnvironment, state) -> None:
    if not env.compatible_with(_as_ipeps(state)):
        raise StaleEnvironmentError("environment was converged for different bond dimensions")


def _norm_checked(value: complex) -> complex:
    if abs(value) < 1e-300 or not np.isfinite(value):
        raise IllConditionedStateError("norm contraction vanishes")
    return value


def expect_one_site_sublattice(env: CtmEnvironment, state, op: np.ndarray, s: int) -> complex:
    """``<op>`` on sublattice ``s`` (0 = A, 1 = B)."""
    _check_env(env, state)
    t = _as_ipeps(state).site(s)
    norm = _norm_checked(_one_site_value(env, double_tensor(t), s))
    return _one_site_value(env, double_tensor(t, insertion(state, op)), s) / norm


def expect_one_site(env: CtmEnvironment, state, op: np.ndarray) -> float:
    """Sublattice-averaged ``<op>`` of a Hermitian one-site operator."""
    vals = [expect_one_site_sublattice(env, state, op, s) for s in range(2)]
    return float(np.real(np.mean(vals)))


def _rotated_state(state):
    if hasattr(state, "inner"):
        return replace(state, inner=state.inner.rotated())
    return state.rotated()


def _chain(env, state, op1, op2, s: int, distance: int) -> tuple[complex, complex]:
    """Operator and plain contractions of a horizontal row segment.

    ``op1`` sits on a site of sublattice ``s`` and ``op2`` ``distance`` sites
    to its right.  Both chains are rescaled by the same factors, so only
    their ratio is meaningful.
    """
    ipeps = _as_ipeps(state)
    plain = [double_tensor(ipeps.a), double_tensor(ipeps.b)]
    end = (s + distance) % 2
    v_p = _left_block(env, plain[s], s)
    v_o = _left_block(env, double_tensor(ipeps.site(s), insertion(state, op1)), s)
    u = s
    for _ in range(distance - 1):
        u = 1 - u
        v_p = _transfer(env, plain[u], u, v_p)
        v_o = _transfer(env, plain[u], u, v_o)
        scale = np.max(np.abs(v_p))
        v_p = v_p / scale
        v_o = v_o / scale
    r_p = _right_block(env, plain[end], end)
    r_o = _right_block(env, double_tensor(ipeps.site(end), insertion(state, op2)), end)
    return complex(np.tensordot(v_o, r_o, axes=3)), complex(np.tensordot(v_p, r_p, axes=3))


def expect_two_site(env, state, op1, op2, s: int = 0, distance: int = 1, direction: str = "horizontal") -> complex:
    """``<op1_n op2_{n+distance}>`` along a lattice axis, ``n`` on sublattice ``s``."""
    if distance < 1:
        raise ValueError("distance must be >= 1")
    _check_env(env, state)
    if direction == "vertical":
        env, state = env.rotated(), _rotated_state(state)
    elif direction != "horizontal":
        raise ValueError(f"unknown direction {direction!r}")
    val, norm = _chain(env, state, op1, op2, s, distance)
    return val / _norm_checked(norm)


def bond_correlator(env, state, op1=SZ, op2=SZ) -> tuple[float, float]:
    """Sublattice-averaged nearest-neighbour ``<op1 op2>`` (horizontal, vertical)."""
    out = []
    for direction in ("horizontal", "vertical"):
        vals = [expect_two_site(env, state, op1, op2, s, 1, direction) for s in range(2)]
        out.append(float(np.real(np.mean(vals))))
    return out[0], out[1]


def expect_bond_energy(env, state, params: ModelParams) -> float:
    """Energy per site; every site owns one horizontal and one vertical bond."""
    zz_h, zz_v = bond_correlator(env, state)
    sx = expect_one_site(env, state, SX) if params.hx else 0.0
    sz = expect_one_site(env, state, SZ) if params.hz else 0.0
    return -params.coupling * (zz_h + zz_v) - params.hx * sx - params.hz * sz


def connected_correlator(env, state, op1, op2, distance: int, direction: str = "horizontal") -> float:
    """``<op1_n op2_{n+R}> - <op1_n><op2_{n+R}>`` averaged over the sublattice of ``n``."""
    vals = []
    env_d, state_d = (env.rotated(), _rotated_state(state)) if direction == "vertical" else (env, state)
    for s in range(2):
        both = expect_two_site(env_d, state_d, op1, op2, s, distance)
        one = expect_one_site_sublattice(env_d, state_d, op1, s)
        two = expect_one_site_sublattice(env_d, state_d, op2, (s + distance) % 2)
        vals.append(both - one * two)
    return float(np.real(np.mean(vals)))


def _transfer_spectrum(env, state, k: int = 2) -> np.ndarray:
    """Largest-magnitude eigenvalues of the two-column row transfer operator."""
    ipeps = _as_ipeps(state)
    plain = [double_tensor(ipeps.a), double_tensor(ipeps.b)]
    shape = (env.t[0][0].shape[0], plain[0].shape[1], env.t[2][0].shape[1])
    n = int(np.prod(shape))

    def matvec(x):
        v = x.reshape(shape)
        v = _transfer(env, plain[0], 0, v)
        v = _transfer(env, plain[1], 1, v)
        return v.reshape(-1)

    dtype = np.result_type(plain[0], env.t[0][0], env.t[2][0])
    if n <= 256:
        mat = np.column_stack([matvec(e) for e in np.eye(n, dtype=dtype)])
        vals = np.linalg.eigvals(mat)
    else:
        op = scipy.sparse.linalg.LinearOperator((n, n), matvec=matvec, dtype=dtype)
        vals = scipy.sparse.linalg.eigs(op, k=k + 1, which="LM", return_eigenvectors=False, tol=1e-10)
    vals = np.abs(vals)
    vals = np.sort(vals)[::-1]
    return np.pad(vals, (0, max(0, k - len(vals))))[:k]


def correlation_length(env, state, direction: str = "horizontal") -> float:
    """Correlation length in lattice units from the row transfer operator.

    The checkerboard transfer operator has period two columns, so with its
    leading eigenvalues ``l0 > l1`` the length is ``2 / ln(l0 / l1)``.
    Returns ``0`` when ``l1`` vanishes and ``inf`` when ``l0`` is degenerate.
    """
    _check_env(env, state)
    if direction == "vertical":
        env, state = env.rotated(), _rotated_state(state)
    lam = _transfer_spectrum(env, state)
    if lam[0] <= 0:
        raise IllConditionedStateError("vanishing transfer operator")
    ratio = lam[1] / lam[0]
    if ratio < 1e-14:
        return 0.0
    if ratio > 1 - 1e-12:
        return math.inf
    return -2.0 / math.log(ratio)
