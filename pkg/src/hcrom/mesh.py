"""Conforming P1 triangulations of the unit disk.

The coarse mesh is built from concentric rings; finer meshes come from
uniform red refinement with boundary midpoints pushed back onto the circle.
Vertex indices of a parent mesh are a prefix of the child's indices.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh parameters or malformed mesh files."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation of the unit disk.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    boundary_cycle : (B,) int array
        Boundary vertices in counterclockwise order; consecutive entries
        (cyclically) span a boundary edge.
    level : int
        Number of refinements applied to the coarsest mesh.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_cycle: np.ndarray
    level: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_cycle"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_cycle.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges (sorted vertex pairs) and the number of triangles owning each."""
        if "edges" not in self._cache:
            t = self.triangles
            all_edges = np.sort(
                np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1
            )
            uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
            self._cache["edges"] = (uniq, counts)
        return self._cache["edges"]

    def boundary_edges(self) -> np.ndarray:
        """Boundary edges as (B, 2) pairs following the cycle orientation."""
        b = self.boundary_cycle
        return np.column_stack([b, np.roll(b, -1)])

    def edge_lengths(self) -> np.ndarray:
        e, _ = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def quality_ratio(self) -> float:
        """Ratio of longest to shortest edge."""
        lengths = self.edge_lengths()
        return float(lengths.max() / lengths.min())

    def to_text(self) -> str:
        lines = [f"{self.n_vertices} {self.n_triangles} {self.n_boundary}"]
        lines += [f"{x:.17g} {y:.17g}" for x, y in self.vertices]
        lines += [f"{i} {j} {k}" for i, j, k in self.triangles]
        lines += [str(int(b)) for b in self.boundary_cycle]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """Hex SHA-256 of the canonical text serialization."""
        if "fingerprint" not in self._cache:
            digest = hashlib.sha256(self.to_text().encode("ascii")).hexdigest()
            self._cache["fingerprint"] = digest
        return self._cache["fingerprint"]

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_text())


def load_mesh(path, level: int = 0) -> Mesh:
    """Read a mesh in the plain text format written by :meth:`Mesh.save`."""
    with open(path, encoding="ascii") as fh:
        tokens = fh.read().split("\n")
    try:
        nv, nt, nb = (int(s) for s in tokens[0].split())
        body = tokens[1 : 1 + nv + nt + nb]
        vertices = np.array([[float(s) for s in ln.split()] for ln in body[:nv]])
        triangles = np.array(
            [[int(s) for s in ln.split()] for ln in body[nv : nv + nt]], dtype=np.int64
        )
        cycle = np.array([int(ln) for ln in body[nv + nt :]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if vertices.shape != (nv, 2) or triangles.shape != (nt, 3) or cycle.shape != (nb,):
        raise MeshError(f"malformed mesh file {path}: header/body size mismatch")
    return Mesh(vertices, triangles, cycle, level)


def _merge_rings(inner: np.ndarray, outer: np.ndarray) -> list[tuple[int, int, int]]:
    # Zip two closed rings of equally spaced vertices into a strip of CCW
    # triangles, always advancing the ring whose next vertex has the smaller
    # polar angle. Angles j/n are compared exactly as j * n' vs j' * n so that
    # ties resolve identically in every quadrant.
    n_in, n_out = len(inner), len(outer)
    tris = []
    a = b = 0
    while a < n_in or b < n_out:
        ia, ob = inner[a % n_in], outer[b % n_out]
        outer_first = a == n_in or (b < n_out and (b + 1) * n_in <= (a + 1) * n_out)
        if outer_first:
            tris.append((ia, ob, outer[(b + 1) % n_out]))
            b += 1
        else:
            tris.append((ia, ob, inner[(a + 1) % n_in]))
            a += 1
    return tris


def unit_disk_mesh(n_boundary: int) -> Mesh:
    """Concentric-ring triangulation of the unit disk.

    Ring ``i`` (``i = 1..n_boundary/4``) sits at radius ``4 i / n_boundary``
    and carries ``4 i`` equally spaced vertices, so all tangential spacings
    agree with the boundary spacing ``2 pi / n_boundary``.
    """
    if int(n_boundary) != n_boundary or n_boundary < 8 or n_boundary % 4:
        raise MeshError(f"n_boundary must be a multiple of 4 and >= 8, got {n_boundary}")
    n_boundary = int(n_boundary)
    n_rings = n_boundary // 4
    coords = [(0.0, 0.0)]
    rings = []
    for i in range(1, n_rings + 1):
        n = 4 * i
        theta = 2.0 * np.pi * np.arange(n) / n
        r = i / n_rings
        start = len(coords)
        coords.extend(zip(r * np.cos(theta), r * np.sin(theta)))
        if i == n_rings:
            # exact unit modulus on the boundary
            last = np.array(coords[start:])
            last /= np.linalg.norm(last, axis=1, keepdims=True)
            coords[start:] = [tuple(p) for p in last]
        rings.append(np.arange(start, start + n))

    tris = []
    first = rings[0]
    for j in range(len(first)):
        tris.append((0, first[j], first[(j + 1) % len(first)]))
    for i in range(n_rings - 1):
        tris.extend(_merge_rings(rings[i], rings[i + 1]))

    return Mesh(
        np.array(coords, dtype=float),
        np.array(tris, dtype=np.int64),
        rings[-1].astype(np.int64),
        0,
    )


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement; boundary midpoints are projected onto the circle."""
    t = mesh.triangles
    nv = mesh.n_vertices
    local = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    uniq, inverse = np.unique(np.sort(local, axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(3, -1)
    mid = nv + inverse  # mid[0]: edge (0,1), mid[1]: edge (1,2), mid[2]: edge (2,0)

    midpoints = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])

    # boundary midpoints, in cycle order
    bedges = mesh.boundary_edges()
    order = np.lexsort((uniq[:, 1], uniq[:, 0]))
    keys = np.sort(bedges, axis=1)
    pos = np.searchsorted(uniq[order, 0] * (nv + 1) + uniq[order, 1],
                          keys[:, 0] * (nv + 1) + keys[:, 1])
    bmid = order[pos]
    midpoints[bmid] /= np.linalg.norm(midpoints[bmid], axis=1, keepdims=True)

    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab, bc, ca = mid[0], mid[1], mid[2]
    children = np.concatenate([
        np.column_stack([a, ab, ca]),
        np.column_stack([ab, b, bc]),
        np.column_stack([ca, bc, c]),
        np.column_stack([ab, bc, ca]),
    ])
    cycle = np.column_stack([mesh.boundary_cycle, nv + bmid]).ravel()
    return Mesh(np.vstack([mesh.vertices, midpoints]), children, cycle, mesh.level + 1)


def disk_mesh(level: int, n_boundary: int = 88) -> Mesh:
    """Coarse ring mesh refined ``level`` times."""
    mesh = unit_disk_mesh(n_boundary)
    for _ in range(level):
        mesh = refine(mesh)
    return mesh
