"""Solver kernels: sparse SPD direct solves, generalized eigenproblems and CG."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class FactorizationError(np.linalg.LinAlgError):
    """A matrix expected to be SPD failed to factor."""


class InconsistencyError(ValueError):
    """A matrix expected to be PSD has clearly negative eigenvalues."""


@dataclass(frozen=True)
class GeneralizedEigenResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


class SPDFactor:
    """Reusable sparse LU factor of an SPD matrix with symmetric pivoting.

    SuperLU with diagonal pivoting and a symmetric ordering yields an LDLᵀ-like
    factor; a nonpositive pivot in ``U`` means the input was not SPD.
    """

    def __init__(self, A: sp.spmatrix):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise FactorizationError(f"matrix is not square: {A.shape}")
        try:
            self._lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        piv = self._lu.U.diagonal()
        bad = np.flatnonzero(~(piv > 0))
        if bad.size:
            i = int(bad[0])
            raise FactorizationError(
                f"matrix is not SPD: pivot {i} (column {int(self._lu.perm_c[i])}) = {piv[i]:.3e}"
            )
        self.shape = A.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if sp.issparse(rhs):
            rhs = rhs.toarray()
        return self._lu.solve(rhs)


def spd_solve_multi(A_sys: sp.spmatrix, RHS: np.ndarray) -> np.ndarray:
    """Solve ``A_sys X = RHS`` for all columns with a single factorization."""
    if sp.issparse(RHS):
        RHS = RHS.toarray()
    return SPDFactor(A_sys).solve(RHS)


def sym_generalized_eig(C: np.ndarray, B: np.ndarray) -> GeneralizedEigenResult:
    """Full decomposition ``C A = B A diag(d)`` with ``Aᵀ B A = I``, ``d`` descending.

    Reduces to a standard problem through the Cholesky factor ``B = L Lᵀ``.
    Small negative eigenvalues down to ``-1e-10 ||C||`` are clamped to zero.
    """
    C = np.asarray(C, dtype=float)
    B = np.asarray(B, dtype=float)
    C = 0.5 * (C + C.T)
    try:
        L = np.linalg.cholesky(0.5 * (B + B.T))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"B is not SPD: {exc}") from exc
    W = sla.solve_triangular(L, C, lower=True)
    W = sla.solve_triangular(L, W.T, lower=True)
    d, Z = np.linalg.eigh(0.5 * (W + W.T))
    A = sla.solve_triangular(L.T, Z, lower=False)
    order = np.arange(d.size)[::-1]
    d, A = d[order], A[:, order]
    floor = 1e-10 * np.linalg.norm(C, 2) if C.size else 0.0
    if d.size and d[-1] < -floor:
        raise InconsistencyError(f"C is not PSD: eigenvalue {d[-1]:.3e} < -{floor:.3e}")
    d = np.where(d < 0, 0.0, d)
    return GeneralizedEigenResult(eigenvalues=d, eigenvectors=A)


@dataclass
class CGResult:
    c: np.ndarray
    iterations: int
    converged: bool
    residuals: list


def cg_normal_equations(
    applyT: Callable[[np.ndarray], np.ndarray],
    applyTt: Callable[[np.ndarray], np.ndarray],
    Mdelta: np.ndarray,
    alpha: float,
    tol: float,
    maxit: int = 10_000,
    weights: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> CGResult:
    """CG for ``(T*T + alpha I) c = T* M`` in the weighted inner product.

    ``weights`` are the X-inner-product weights (lumped quadrature); ``applyTt``
    must be the adjoint with respect to them, so the operator is self-adjoint
    and positive definite in that inner product. Stops when the relative
    residual ``||r||_X / ||b||_X`` drops to ``tol``, like MATLAB's ``pcg``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    b = applyTt(Mdelta)
    w = np.ones_like(b) if weights is None else np.asarray(weights, dtype=float)

    def dot(x, y):
        return float(np.dot(w * x, y))

    def normal(x):
        return applyTt(applyT(x)) + alpha * x

    bnorm = np.sqrt(dot(b, b))
    if bnorm == 0:
        return CGResult(np.zeros_like(b), 0, True, [0.0])
    c = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - normal(c) if x0 is not None else b.copy()
    p = r.copy()
    rr = dot(r, r)
    residuals = [np.sqrt(rr) / bnorm]
    if residuals[-1] <= tol:
        return CGResult(c, 0, True, residuals)
    for it in range(1, maxit + 1):
        q = normal(p)
        step = rr / dot(p, q)
        c += step * p
        r -= step * q
        rr_new = dot(r, r)
        residuals.append(np.sqrt(rr_new) / bnorm)
        if residuals[-1] <= tol:
            return CGResult(c, it, True, residuals)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(c, maxit, False, residuals)


def adjoint_mismatch(applyT, applyTt, weights, m: int, shape, rng, trials: int = 10) -> float:
    """Largest relative gap ``|<Tc, M>_F - <c, T*M>_X| / (||c||_X ||M||_F)``."""
    worst = 0.0
    for _ in range(trials):
        c = rng.standard_normal(m)
        M = rng.standard_normal(shape)
        lhs = float(np.sum(applyT(c) * M))
        rhs = float(np.dot(weights * c, applyTt(M)))
        scale = np.sqrt(np.dot(weights * c, c)) * np.linalg.norm(M)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst
