"""Quantum Ising model, Trotter gates and second-order Suzuki-Trotter schedules.

Two gate flavours are produced:

* ``unitary-quench`` gates act on a spin-1/2 physical leg (``p = 2``) and
  implement ``exp(-i dt H)`` for real-time evolution.
* ``purification-thermal`` gates are superoperators acting on the ``p = 4``
  operator-basis leg of a Hermitian purification.  They implement
  ``rho -> g rho g^dagger`` with ``g = exp(-d beta H / 4)``.

Every two-site gate is stored as a pair of factors ``g_a[out, in, k]`` and
``g_b[out, in, k]`` joined by an internal leg of dimension ``rank``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.linalg

from .errors import BasisExpansionError
from .tensor import svd_truncated

SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SY = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SZ = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
ID2 = np.eye(2, dtype=complex)

#: Hermitian operator basis ``O^a`` (x, y, z, identity); ``Tr[O^a O^b] = 2 delta_ab``.
OPERATOR_BASIS = (SX, SY, SZ, ID2)

FACTOR_CUTOFF = 1e-14


@dataclass(frozen=True)
class ModelParams:
    """Ising model ``H = -J sum ZZ - hx sum X - hz sum Z``.

    ``coupling`` is the ferromagnetic ``J``; it is 1 everywhere except in
    degenerate test models.
    """

    hx: float = 0.0
    hz: float = 0.0
    coupling: float = 1.0

    def __post_init__(self):
        if self.hx < 0 or self.hz < 0:
            raise ValueError(f"fields must be non-negative, got hx={self.hx}, hz={self.hz}")

    @property
    def one_site_hamiltonian(self) -> np.ndarray:
        return -self.hx * SX - self.hz * SZ

    @property
    def bond_hamiltonian(self) -> np.ndarray:
        return -self.coupling * np.kron(SZ, SZ)

    def to_dict(self) -> dict:
        return {"hx": self.hx, "hz": self.hz, "coupling": self.coupling}


class GateKind(str, enum.Enum):
    QUENCH = "unitary-quench"
    THERMAL = "purification-thermal"


@dataclass(frozen=True)
class TrotterGate:
    """Factorized two-site gate plus the one-site gate applied to every site."""

    g_a: np.ndarray
    g_b: np.ndarray
    one_site: np.ndarray
    step: float
    kind: GateKind

    @property
    def rank(self) -> int:
        return self.g_a.shape[2]

    @property
    def phys_dim(self) -> int:
        return self.g_a.shape[0]

    def two_site(self) -> np.ndarray:
        """Full two-site matrix with rows ``(out_a, out_b)`` and columns ``(in_a, in_b)``."""
        p = self.phys_dim
        full = np.einsum("ack,bdk->abcd", self.g_a, self.g_b)
        return full.reshape(p * p, p * p)


def factorize_two_site(op: np.ndarray, p: int, cutoff: float = FACTOR_CUTOFF) -> tuple[np.ndarray, np.ndarray]:
    """Split a ``(p*p, p*p)`` operator into ``g_a[out, in, k]``, ``g_b[out, in, k]``.

    The operator is regrouped as ``(out_a, in_a) x (out_b, in_b)`` and SVD'd;
    singular values are split symmetrically between the two factors.
    """
    t = op.reshape(p, p, p, p).transpose(0, 2, 1, 3).reshape(p * p, p * p)
    res = svd_truncated(t, p * p, rel_cutoff=cutoff)
    sq = np.sqrt(res.s)
    g_a = (res.u * sq).reshape(p, p, -1)
    g_b = (res.v.conj() * sq).reshape(p, p, -1)
    return g_a, g_b


def quench_gate(params: ModelParams, dt: float) -> TrotterGate:
    """Real-time gate ``exp(-i dt H)`` split into bond and one-site parts."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    bond = scipy.linalg.expm(-1j * dt * params.bond_hamiltonian)
    one = scipy.linalg.expm(-1j * dt * params.one_site_hamiltonian)
    g_a, g_b = factorize_two_site(bond, 2)
    return TrotterGate(g_a, g_b, one, dt, GateKind.QUENCH)


def superoperator(op: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> op X op^dagger`` in the tensor-product operator basis.

    For an ``n``-site operator (``n`` = 1 or 2) the result has shape
    ``(4**n, 4**n)`` with entry ``[a', a] = Tr[O^a' op O^a op^dagger] / 2**n``.
    """
    dim = op.shape[0]
    n = {2: 1, 4: 2}[dim]
    if n == 1:
        basis = list(OPERATOR_BASIS)
    else:
        basis = [np.kron(x, y) for x in OPERATOR_BASIS for y in OPERATOR_BASIS]
    stack = np.array(basis)
    images = np.einsum("ij,ajk,lk->ail", op, stack, op.conj())
    sup = np.einsum("bji,aij->ba", stack, images) / dim
    if np.max(np.abs(sup.imag), initial=0.0) > 1e-12:
        raise BasisExpansionError("superoperator has imaginary entries in a Hermitian basis")
    return np.ascontiguousarray(sup.real)


def thermal_gate(params: ModelParams, dbeta: float) -> TrotterGate:
    """Imaginary-time superoperator gate for one step ``dbeta`` of the purification.

    The bond operator is ``1 + tanh(J dbeta / 4) ZZ`` (the scalar prefactor of
    ``exp(J dbeta ZZ / 4)`` is dropped); the one-site operator is
    ``exp(dbeta (hx X + hz Z) / 4)``.  Both act as ``X -> g X g^dagger``.
    """
    if not dbeta > 0:
        raise ValueError("dbeta must be positive")
    c = np.tanh(params.coupling * dbeta / 4)
    bond = np.eye(4) + c * np.kron(SZ, SZ)
    one = scipy.linalg.expm(-dbeta * params.one_site_hamiltonian / 4)
    g_a, g_b = factorize_two_site(superoperator(bond), 4)
    return TrotterGate(g_a, g_b, superoperator(one), dbeta, GateKind.THERMAL)


# --------------------------------------------------------------------------
# second-order schedule


class Bond(str, enum.Enum):
    """The four inequivalent bonds of the checkerboard lattice."""

    AB_H = "A-left-B-right"
    BA_H = "B-left-A-right"
    AB_V = "A-top-B-bottom"
    BA_V = "B-top-A-bottom"

    @property
    def horizontal(self) -> bool:
        return self in (Bond.AB_H, Bond.BA_H)

    @property
    def a_first(self) -> bool:
        """True if sublattice A is the left/top site of the bond."""
        return self in (Bond.AB_H, Bond.AB_V)


#: Bond order of one first-order sweep.
BOND_SWEEP = (Bond.AB_H, Bond.BA_H, Bond.AB_V, Bond.BA_V)

#: Target marker for a one-site gate applied to both sublattices.
SITES = "sites"

Target = Union[Bond, str]


@dataclass(frozen=True)
class ScheduleItem:
    target: Target
    gate: TrotterGate = field(repr=False)

    @property
    def is_bond(self) -> bool:
        return isinstance(self.target, Bond)


def second_order_schedule(
    gate_builder: Callable[[float], TrotterGate], step: float, fuse_middle: bool = True
) -> list[ScheduleItem]:
    """Palindromic second-order Trotter step.

    Half-step one-site gates, the bond sweep at half step, the reversed sweep
    at half step, and half-step one-site gates again.  With ``fuse_middle`` the
    two adjacent half-step gates on the last bond are merged into one
    full-step gate, which leaves the composition unchanged.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    half = gate_builder(step / 2)
    items = [ScheduleItem(SITES, half)]
    items += [ScheduleItem(b, half) for b in BOND_SWEEP]
    if fuse_middle:
        items[-1] = ScheduleItem(BOND_SWEEP[-1], gate_builder(step))
        items += [ScheduleItem(b, half) for b in reversed(BOND_SWEEP[:-1])]
    else:
        items += [ScheduleItem(b, half) for b in reversed(BOND_SWEEP)]
    items.append(ScheduleItem(SITES, half))
    return items
