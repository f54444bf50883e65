"""Truth forward operator of fluorescence optical tomography.

The measurement operator maps a fluorophore concentration ``c`` on the mesh
vertices to the ``k x k`` source/detector matrix

    T(c)_ij = sum_p V_pi U_pj DD_p c_p,

with ``U`` the excitation fields for each source and ``V`` the adjoint
emission fields for each detector, both in orthonormalized bases.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .fem import FemSystem
from .linalg import SPDFactor, sym_generalized_eig

COUPLINGS = ("unit", "robin")


def _coupling_scale(system: FemSystem, coupling: str) -> float:
    # "robin" reads the boundary condition as kappa dn u + rho (u - q) = 0
    if coupling == "unit":
        return 1.0
    if coupling == "robin":
        return float(system.params.rho)
    raise ValueError(f"coupling must be one of {COUPLINGS}, got {coupling!r}")


def _solve_fields(system: FemSystem, Q: np.ndarray, coupling: str, block: int = 256,
                  factor: SPDFactor | None = None) -> np.ndarray:
    factor = SPDFactor(system.A_sys) if factor is None else factor
    scale = _coupling_scale(system, coupling)
    E = system.E
    m, k = E.shape[0], Q.shape[1]
    out = np.empty((m, k))
    for j in range(0, k, block):
        rhs = scale * (E @ Q[:, j:j + block])
        out[:, j:j + block] = factor.solve(rhs)
    return out


def solve_excitation(system_x: FemSystem, Qx: np.ndarray, coupling: str = "robin") -> np.ndarray:
    """Excitation fields ``(K + M + R) U = E Qx`` for every source column."""
    return _solve_fields(system_x, np.asarray(Qx, dtype=float), coupling)


def solve_emission_adjoint(system_m: FemSystem, Qm: np.ndarray, coupling: str = "robin") -> np.ndarray:
    """Adjoint emission fields, one per detector column of ``Qm``."""
    return _solve_fields(system_m, np.asarray(Qm, dtype=float), coupling)


@dataclass(frozen=True)
class TruthOperator:
    """Orthonormalized excitation/emission factors of the truth operator.

    ``U`` and ``V`` may hold only the leading columns (``n_stored < k``) when
    built in streaming mode; the full spectra ``sx`` and ``sm`` are always kept.
    """

    U: np.ndarray
    V: np.ndarray
    Qx: np.ndarray
    Qm: np.ndarray
    sx: np.ndarray
    sm: np.ndarray
    DD: np.ndarray
    SX: object
    SY: object
    SZ: object
    mesh_level: int = 0
    coupling: str = "robin"
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.sx.size

    @property
    def complete(self) -> bool:
        return self.U.shape[1] == self.k and self.V.shape[1] == self.k

    def norm_estimate(self) -> float:
        return operator_norm(self)


def _orthonormal_pair(F: np.ndarray, Q: np.ndarray, GU, SY):
    Cm = F.T @ (GU @ F)
    B = SY.toarray() if hasattr(SY, "toarray") else np.asarray(SY)
    res = sym_generalized_eig(Cm, B)
    A = res.eigenvectors
    return F @ A, Q @ A, np.sqrt(res.eigenvalues)


def orthonormalize(U, V, Qx, Qm, GU, SY, SZ, DD=None, SX=None, mesh_level: int = 0,
                   coupling: str = "robin") -> TruthOperator:
    """Rotate sources and detectors so that ``Uᵀ GU U`` and ``Vᵀ GU V`` are diagonal.

    Solves ``Uᵀ GU U a = d SY a`` (likewise for ``V`` with ``SZ``) and stores
    ``U A``, ``Q A`` and singular values ``sqrt(d)`` in descending order.
    """
    U2, Qx2, sx = _orthonormal_pair(U, Qx, GU, SY)
    V2, Qm2, sm = _orthonormal_pair(V, Qm, GU, SZ)
    return TruthOperator(U=U2, V=V2, Qx=Qx2, Qm=Qm2, sx=sx, sm=sm, DD=DD, SX=SX, SY=SY, SZ=SZ,
                         mesh_level=mesh_level, coupling=coupling)


def _stream_orthonormal(system: FemSystem, coupling: str, keep, block: int):
    """Generalized eigenpairs of ``(Uᵀ GU U, SY)`` and the leading ``keep`` fields.

    Builds the Gram ``k x k`` block by block, then recomputes only the needed
    fields ``U A[:, :keep]`` from the rotated sources, so at most one copy of
    the ``m x k`` field matrix is alive.
    """
    factor = SPDFactor(system.A_sys)
    m, k = system.E.shape
    scale = _coupling_scale(system, coupling)
    with tempfile.TemporaryDirectory() as tmp:
        # the full field matrix lives on disk; only two column blocks are in memory
        F = np.lib.format.open_memmap(os.path.join(tmp, "F.npy"), mode="w+", shape=(m, k),
                                      fortran_order=True)
        for j in range(0, k, block):
            cols = np.arange(j, min(j + block, k))
            F[:, cols] = factor.solve(scale * system.E[:, cols].toarray())
        C = np.empty((k, k))
        for i in range(0, k, block):
            Fi = np.array(F[:, i:i + block])
            Wi = system.GU @ Fi
            for j in range(i, k, block):
                Fj = Fi if j == i else np.array(F[:, j:j + block])
                C[i:i + block, j:j + block] = Wi.T @ Fj
                C[j:j + block, i:i + block] = C[i:i + block, j:j + block].T
            del Fi, Wi
        del F
    res = sym_generalized_eig(C, system.SY.toarray())
    s = np.sqrt(res.eigenvalues)
    if keep is None:
        keep = k
    elif isinstance(keep, float):
        keep = max(int(np.sum(s ** 2 > keep ** 2)), 1)
    keep = min(int(keep), k)
    Q = res.eigenvectors
    fields = _solve_fields(system, Q[:, :keep], coupling, block, factor)
    return fields, Q, s


def build_truth_operator(system_x: FemSystem, system_m: FemSystem, *, coupling: str = "robin",
                         mesh_level: int = 0, keep_x=None, keep_m=None,
                         block: int = 256) -> TruthOperator:
    """Assemble the orthonormalized truth operator from two FEM systems.

    ``keep_x``/``keep_m`` limit the number of stored field columns (the
    spectra stay complete); use them when the full fields do not fit. An
    integer keeps that many columns, a float ``t`` keeps those with ``s > t``.
    """
    keep_all = keep_x is None and keep_m is None
    if keep_all:
        k = system_x.E.shape[1]
        I = np.eye(k)
        U = solve_excitation(system_x, I, coupling)
        V = solve_emission_adjoint(system_m, I, coupling)
        return orthonormalize(U, V, I, I, system_x.GU, system_x.SY, system_m.SY,
                              DD=system_x.DD, SX=system_x.SX, mesh_level=mesh_level, coupling=coupling)
    U, Qx, sx = _stream_orthonormal(system_x, coupling, keep_x, block)
    V, Qm, sm = _stream_orthonormal(system_m, coupling, keep_m, block)
    return TruthOperator(U=U, V=V, Qx=Qx, Qm=Qm, sx=sx, sm=sm, DD=system_x.DD, SX=system_x.SX,
                         SY=system_x.SY, SZ=system_m.SY, mesh_level=mesh_level, coupling=coupling)


def _require_complete(op: TruthOperator):
    if not op.complete:
        raise ValueError("operator stores truncated fields; the full T is unavailable")


def apply_T(op: TruthOperator, c: np.ndarray) -> np.ndarray:
    """``T(c) = Vᵀ diag(DD c) U`` as a ``k x k`` matrix."""
    _require_complete(op)
    c = np.asarray(c, dtype=float)
    return op.V.T @ ((op.DD * c)[:, None] * op.U)


def apply_Tt(op: TruthOperator, M: np.ndarray) -> np.ndarray:
    """X-adjoint of :func:`apply_T`: ``(T* M)_p = sum_ij V_pi M_ij U_pj``."""
    _require_complete(op)
    M = np.asarray(M, dtype=float)
    return np.einsum("pj,pj->p", op.V @ M, op.U)


def apply_T_sub(op: TruthOperator, c: np.ndarray, rows, cols) -> np.ndarray:
    """Subblock ``T(c)[rows][:, cols]`` using only the needed field columns."""
    c = np.asarray(c, dtype=float)
    return op.V[:, rows].T @ ((op.DD * c)[:, None] * op.U[:, cols])


def apply_Tt_sub(op: TruthOperator, M: np.ndarray, rows, cols) -> np.ndarray:
    return np.einsum("pj,pj->p", op.V[:, rows] @ M, op.U[:, cols])


def operator_norm(op: TruthOperator, tol: float = 1e-10, maxit: int = 500, seed: int = 0,
                  rows=None, cols=None) -> float:
    """``sup ||T(c)||_F / ||c||_X`` by power iteration on ``T* T`` in the X inner product.

    With ``rows``/``cols`` the norm of the subblock ``T(c)[rows][:, cols]`` is
    estimated instead; this works on operators that store truncated fields.
    """
    if rows is None and cols is None:
        fwd, adj = (lambda c: apply_T(op, c)), (lambda M: apply_Tt(op, M))
    else:
        rows = np.arange(op.V.shape[1]) if rows is None else rows
        cols = np.arange(op.U.shape[1]) if cols is None else cols
        fwd = lambda c: apply_T_sub(op, c, rows, cols)
        adj = lambda M: apply_Tt_sub(op, M, rows, cols)
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(op.m)
    DD = op.DD
    c /= np.sqrt(np.dot(DD * c, c))
    est = 0.0
    for _ in range(maxit):
        w = adj(fwd(c))
        lam = float(np.sqrt(np.dot(DD * w, w)))
        if lam == 0:
            return 0.0
        c = w / lam
        if abs(lam - est) <= tol * lam:
            est = lam
            break
        est = lam
    return float(np.sqrt(est))
