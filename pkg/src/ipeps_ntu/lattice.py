"""Checkerboard iPEPS, bond bookkeeping and the reduction of gated tensors.

Site tensors carry legs ``(p, top, left, bottom, right)``.  Every bond of
``A`` faces a bond of ``B``::

    A.top <-> B.bottom    A.left <-> B.right
    A.bottom <-> B.top    A.right <-> B.left

Bond updates are written once, for a horizontal bond with a *left* tensor
``L`` and a *right* tensor ``R`` (``L.right <-> R.left``).  Vertical bonds are
mapped onto this canonical frame by rotating the whole lattice by 90 degrees
counter-clockwise, which sends every ``bottom`` leg to ``right``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidStateError, ShapeError
from .gates import Bond, TrotterGate
from .tensor import qr

P, T, L, B, R = range(5)


def rotate_site(t: np.ndarray) -> np.ndarray:
    """Rotate a site tensor counter-clockwise: new (t, l, b, r) = old (r, t, l, b)."""
    return t.transpose(0, 4, 1, 2, 3)


def unrotate_site(t: np.ndarray) -> np.ndarray:
    return t.transpose(0, 2, 3, 4, 1)


@dataclass(frozen=True)
class IpepsState:
    """Two-tensor iPEPS on the checkerboard lattice.

    Attributes
    ----------
    a, b : ndarray
        Site tensors with legs ``(p, top, left, bottom, right)``.
    normalization_log : float
        Sum of ``log`` of all scale factors divided out of the tensors.
    """

    a: np.ndarray
    b: np.ndarray
    normalization_log: float = 0.0

    def __post_init__(self):
        a, b = self.a, self.b
        if a.ndim != 5 or b.ndim != 5:
            raise ShapeError("site tensors must have 5 legs (p, t, l, b, r)")
        if a.shape[P] != b.shape[P]:
            raise ShapeError("A and B have different physical dimensions")
        facing = ((T, B), (L, R), (B, T), (R, L))
        for la, lb in facing:
            if a.shape[la] != b.shape[lb]:
                raise ShapeError(f"A leg {la} (dim {a.shape[la]}) faces B leg {lb} (dim {b.shape[lb]})")

    @property
    def phys_dim(self) -> int:
        return self.a.shape[P]

    @property
    def bond_dim(self) -> int:
        return max(self.a.shape[1:])

    @property
    def dtype(self):
        return np.result_type(self.a, self.b)

    @property
    def scalar_kind(self) -> str:
        return "complex" if np.iscomplexobj(self.a) or np.iscomplexobj(self.b) else "real"

    def site(self, sublattice: int) -> np.ndarray:
        """Tensor of sublattice 0 (A) or 1 (B)."""
        return self.a if sublattice == 0 else self.b

    def rotated(self) -> "IpepsState":
        """Same state with the lattice rotated counter-clockwise by 90 degrees."""
        return replace(self, a=rotate_site(self.a), b=rotate_site(self.b))

    def normalized(self) -> "IpepsState":
        """Divide each tensor by its largest absolute entry."""
        sa = float(np.max(np.abs(self.a)))
        sb = float(np.max(np.abs(self.b)))
        if not (sa > 0 and sb > 0 and math.isfinite(sa) and math.isfinite(sb)):
            raise InvalidStateError("cannot normalize a zero or non-finite tensor")
        return IpepsState(self.a / sa, self.b / sb, self.normalization_log + math.log(sa) + math.log(sb))

    def apply_one_site(self, op: np.ndarray) -> "IpepsState":
        """Act with ``op[out, in]`` on the physical leg of both sublattices."""
        a = np.tensordot(op, self.a, axes=(1, 0))
        b = np.tensordot(op, self.b, axes=(1, 0))
        return IpepsState(a, b, self.normalization_log).normalized()


def initial_product_state(p: int, local_vector, dtype=None) -> IpepsState:
    """``D = 1`` product state with the same local vector on both sublattices."""
    v = np.asarray(local_vector, dtype=dtype)
    if v.shape != (p,):
        raise ShapeError(f"local vector must have length p={p}")
    if not np.any(v != 0):
        raise InvalidStateError("local vector is zero")
    t = v.reshape(p, 1, 1, 1, 1).copy()
    return IpepsState(t, t.copy()).normalized()


def canonical_pair(state: IpepsState, bond: Bond) -> tuple[np.ndarray, np.ndarray]:
    """Left and right tensors of ``bond`` in the canonical horizontal frame."""
    a, b = (state.a, state.b) if bond.horizontal else (rotate_site(state.a), rotate_site(state.b))
    return (a, b) if bond.a_first else (b, a)


def from_canonical(bond: Bond, left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`canonical_pair`; returns ``(A, B)``."""
    a, b = (left, right) if bond.a_first else (right, left)
    if not bond.horizontal:
        a, b = unrotate_site(a), unrotate_site(b)
    return a, b


@dataclass(frozen=True)
class ReducedPair:
    """Gated bond split into fixed isometries and small reduced matrices.

    ``q_a`` has legs ``(p, t, l, b, m)`` and ``q_b`` legs ``(p, t, b, r, n)``
    in the canonical frame; ``r_a`` is ``(m, D, k)`` and ``r_b`` is
    ``(n, D, k)``, where ``D`` is the old bond and ``k`` the gate-rank leg.
    The gated two-site network equals ``q_a . (r_a r_b^T) . q_b``.
    """

    q_a: np.ndarray
    q_b: np.ndarray
    r_a: np.ndarray
    r_b: np.ndarray
    bond: Bond
    _product: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def bond_leg_dim(self) -> int:
        """Dimension ``rD`` of the bond-facing leg of ``r_a``."""
        return self.r_a.shape[1] * self.r_a.shape[2]

    @property
    def m(self) -> int:
        return self.r_a.shape[0]

    @property
    def n(self) -> int:
        return self.r_b.shape[0]

    def product(self) -> np.ndarray:
        """The exact ``m x n`` matrix ``R_A R_B^T``."""
        if self._product is None:
            pa = self.r_a.reshape(self.m, -1)
            pb = self.r_b.reshape(self.n, -1)
            object.__setattr__(self, "_product", pa @ pb.T)
        return self._product


def apply_gate_and_reduce(state: IpepsState, gate: TrotterGate, bond: Bond) -> ReducedPair:
    """Apply the two-site gate to ``bond`` and QR-reduce both gated tensors."""
    left, right = canonical_pair(state, bond)
    p = state.phys_dim
    if gate.g_a.shape[:2] != (p, p) or gate.g_b.shape[:2] != (p, p):
        raise ShapeError(f"gate acts on dimension {gate.g_a.shape[0]}, state has p={p}")
    if left.shape[R] != right.shape[L]:
        raise ShapeError("bond legs of the pair differ")
    k = gate.rank
    # (p, t, l, b, r, k)
    la = np.tensordot(gate.g_a, left, axes=(1, 0)).transpose(0, 2, 3, 4, 5, 1)
    # (p, t, b, r, l, k)
    rb = np.tensordot(gate.g_b, right, axes=(1, 0)).transpose(0, 2, 4, 5, 3, 1)
    sa, sb = la.shape, rb.shape
    qa, ra = qr(la.reshape(-1, sa[4] * k))
    qb, rb_ = qr(rb.reshape(-1, sb[4] * k))
    return ReducedPair(
        q_a=qa.reshape(sa[:4] + (-1,)),
        q_b=qb.reshape(sb[:4] + (-1,)),
        r_a=ra.reshape(-1, sa[4], k),
        r_b=rb_.reshape(-1, sb[4], k),
        bond=bond,
    )


def _bond_phases(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Unit phases that make every new bond vector overlap positively with the old one.

    ``old`` and ``new`` are left tensors whose last leg is the updated bond.
    Columns without a usable predecessor get the phase that makes their
    largest entry real and positive.  Keeping the bond gauge continuous from
    step to step lets CTMRG environments be reused as warm starts.
    """
    k_new = new.shape[-1]
    nm = new.reshape(-1, k_new)
    ph = np.ones(k_new, dtype=np.result_type(new, 1.0))
    k_old = old.shape[-1] if old.shape[:-1] == new.shape[:-1] else 0
    om = old.reshape(-1, old.shape[-1]) if k_old else None
    for k in range(k_new):
        c = 0.0
        if k < k_old:
            c = np.vdot(nm[:, k], om[:, k])
            if abs(c) <= 1e-8 * np.linalg.norm(nm[:, k]) * np.linalg.norm(om[:, k]):
                c = 0.0
        if c == 0.0:
            c = np.conj(nm[np.argmax(np.abs(nm[:, k])), k])
        if abs(c) > 0:
            ph[k] = c / abs(c)
    return ph


def assemble(state: IpepsState, pair: ReducedPair, m_a: np.ndarray, m_b: np.ndarray) -> IpepsState:
    """Fuse truncated matrices with the isometries: ``A' = Q_A M_A``, ``B' = Q_B M_B``.

    ``m_a`` is ``(m, D_new)`` and ``m_b`` is ``(n, D_new)``; the new bond
    matrix is ``m_a @ m_b.T``.  The bond gauge is aligned with the previous
    tensors (see :func:`_bond_phases`) and both tensors are renormalized.
    """
    if m_a.shape[0] != pair.m or m_b.shape[0] != pair.n or m_a.shape[1] != m_b.shape[1]:
        raise ShapeError(f"M shapes {m_a.shape}, {m_b.shape} do not fit pair ({pair.m}, {pair.n})")
    left = np.tensordot(pair.q_a, m_a, axes=(4, 0))
    ph = _bond_phases(canonical_pair(state, pair.bond)[0], left)
    if np.iscomplexobj(ph):
        left = left * ph
        m_b = m_b * ph.conj()
    else:
        left = left * ph
        m_b = m_b * ph
    right = np.tensordot(pair.q_b, m_b, axes=(4, 0)).transpose(0, 1, 4, 2, 3)
    a, b = from_canonical(pair.bond, left, right)
    return IpepsState(a, b, state.normalization_log).normalized()
