"""P1 finite element matrices on a disk mesh.

All element integrals are exact for products of P1 functions. Matrices are
returned in CSR format with duplicates summed and explicit zeros dropped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

GRAM_VARIANTS = ("L2", "H1")

# P1 mass on a triangle of unit area
_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class OpticalParameters:
    kappa: float
    mu: float
    rho: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


# excitation and emission wavelengths of the test problem
EXCITATION = OpticalParameters(kappa=1.0, mu=0.2, rho=10.0)
EMISSION = OpticalParameters(kappa=2.0, mu=0.1, rho=10.0)


def _finalize(rows, cols, vals, shape) -> sp.csr_matrix:
    mat = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def _element_pattern(tri: np.ndarray):
    rows = np.repeat(tri, tri.shape[1], axis=1).ravel()
    cols = np.tile(tri, (1, tri.shape[1])).ravel()
    return rows, cols


def _gradients(mesh: Mesh):
    """Barycentric gradients (T, 3, 2) and triangle areas (T,)."""
    p = mesh.vertices[mesh.triangles]
    area = mesh.signed_areas()
    # grad(lambda_i) = rot90(opposite edge) / (2 area)
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    edges = np.stack([e0, e1, e2], axis=1)
    grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    return grads, area


def assemble_stiffness(mesh: Mesh, kappa: float = 1.0) -> sp.csr_matrix:
    """``K_pq = kappa * int grad(phi_p) . grad(phi_q)``."""
    grads, area = _gradients(mesh)
    local = kappa * area[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    rows, cols = _element_pattern(mesh.triangles)
    n = mesh.n_vertices
    return _finalize(rows, cols, local.ravel(), (n, n))


def assemble_mass(mesh: Mesh, mu: float = 1.0) -> sp.csr_matrix:
    """Consistent P1 mass matrix scaled by ``mu``."""
    n = mesh.n_vertices
    if mu == 0:
        return sp.csr_matrix((n, n))
    area = mesh.signed_areas()
    local = mu * area[:, None, None] * _MASS_REF[None]
    rows, cols = _element_pattern(mesh.triangles)
    return _finalize(rows, cols, local.ravel(), (n, n))


def _boundary_local(mesh: Mesh):
    be = mesh.boundary_edges()
    h = np.linalg.norm(mesh.vertices[be[:, 0]] - mesh.vertices[be[:, 1]], axis=1)
    return be, h


def assemble_robin(mesh: Mesh, rho: float = 1.0) -> sp.csr_matrix:
    """``R_pq = rho * int_{boundary} phi_p phi_q ds`` on the polygonal boundary."""
    be, h = _boundary_local(mesh)
    local = rho * h[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]
    rows, cols = _element_pattern(be)
    n = mesh.n_vertices
    return _finalize(rows, cols, local.ravel(), (n, n))


def assemble_source_coupling(mesh: Mesh) -> sp.csr_matrix:
    """``E_pj = int phi_p psi_j ds``; column ``j`` belongs to ``boundary_cycle[j]``."""
    return assemble_robin(mesh, 1.0)[:, mesh.boundary_cycle].tocsr()


def assemble_boundary_gram(mesh: Mesh) -> sp.csr_matrix:
    """H1 inner product on the boundary curve, indexed along ``boundary_cycle``.

    Periodic 1-D P1 mass plus tangential stiffness on the polygonal boundary.
    """
    _, h = _boundary_local(mesh)
    k = mesh.n_boundary
    i = np.arange(k)
    j = (i + 1) % k
    pairs = np.column_stack([i, j])
    mass = h[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]
    stiff = (1.0 / h)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None]
    rows, cols = _element_pattern(pairs)
    return _finalize(rows, cols, (mass + stiff).ravel(), (k, k))


def lumped_quadrature(mesh: Mesh) -> np.ndarray:
    """Row sums of the unit mass matrix (lumped L2 weights)."""
    area = mesh.signed_areas()
    weights = np.zeros(mesh.n_vertices)
    np.add.at(weights, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    return weights


@dataclass(frozen=True)
class FemSystem:
    """Matrices of one PDE (excitation or emission) on one mesh."""

    A_sys: sp.csr_matrix
    E: sp.csr_matrix
    SX: sp.csr_matrix
    GU: sp.csr_matrix
    SY: sp.csr_matrix
    DD: np.ndarray
    params: OpticalParameters


def assemble_system(mesh: Mesh, params: OpticalParameters, gram: str = "L2") -> FemSystem:
    """Assemble ``K + M + R`` and every Gram matrix needed downstream.

    ``gram`` selects the inner product measuring the excitation/emission
    fields: ``"L2"`` uses the mass matrix, ``"H1"`` adds the unit stiffness.
    """
    if gram not in GRAM_VARIANTS:
        raise ValueError(f"gram must be one of {GRAM_VARIANTS}, got {gram!r}")
    K = assemble_stiffness(mesh, params.kappa)
    M = assemble_mass(mesh, params.mu)
    R = assemble_robin(mesh, params.rho)
    SX = assemble_mass(mesh, 1.0)
    GU = SX if gram == "L2" else (assemble_stiffness(mesh, 1.0) + SX).tocsr()
    return FemSystem(
        A_sys=(K + M + R).tocsr(),
        E=assemble_source_coupling(mesh),
        SX=SX,
        GU=GU,
        SY=assemble_boundary_gram(mesh),
        DD=lumped_quadrature(mesh),
        params=params,
    )
