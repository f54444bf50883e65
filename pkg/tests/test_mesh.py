import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hcrom.mesh import MeshError, disk_mesh, load_mesh, refine, unit_disk_mesh


def check_invariants(mesh):
    assert np.all(mesh.signed_areas() > 0)
    edges, counts = mesh.edges()
    assert set(np.unique(counts)) <= {1, 2}
    V, E, F = mesh.n_vertices, len(edges), mesh.n_triangles
    assert V - E + F == 1
    bnd = {tuple(e) for e in edges[counts == 1]}
    cyc = {tuple(sorted(e)) for e in mesh.boundary_edges()}
    assert bnd == cyc
    assert len(np.unique(edges[counts == 1])) == mesh.n_boundary
    r = np.linalg.norm(mesh.vertices[mesh.boundary_cycle], axis=1)
    assert np.max(np.abs(r - 1)) <= 1e-12


@given(st.integers(min_value=2, max_value=30).map(lambda q: 4 * q))
@settings(max_examples=20, deadline=None)
def test_generator_invariants(n):
    mesh = unit_disk_mesh(n)
    check_invariants(mesh)
    assert mesh.n_boundary == n
    assert mesh.quality_ratio() <= 3


def test_boundary_equally_spaced():
    mesh = unit_disk_mesh(88)
    ang = np.angle(mesh.vertices[mesh.boundary_cycle] @ np.array([1, 1j]))
    steps = np.diff(np.unwrap(ang))
    np.testing.assert_allclose(steps, 2 * np.pi / 88, rtol=1e-12)


def test_coarse_mesh_size():
    mesh = unit_disk_mesh(88)
    assert mesh.n_boundary == 88
    assert 900 <= mesh.n_vertices <= 1100


@pytest.mark.parametrize("n", [0, 4, 6, 10, 90])
def test_rejects_bad_boundary_count(n):
    with pytest.raises(MeshError):
        unit_disk_mesh(n)


def test_refine_counts_and_invariants():
    mesh = unit_disk_mesh(88)
    counts = [88]
    for _ in range(2):
        fine = refine(mesh)
        assert fine.n_triangles == 4 * mesh.n_triangles
        assert fine.level == mesh.level + 1
        # parent vertices keep their indices
        np.testing.assert_array_equal(fine.vertices[: mesh.n_vertices], mesh.vertices)
        assert mesh.quality_ratio() <= 6 and fine.quality_ratio() <= 2 * mesh.quality_ratio()
        check_invariants(fine)
        mesh = fine
        counts.append(mesh.n_boundary)
    assert counts == [88, 176, 352]


def test_area_converges():
    errs = [abs(disk_mesh(l).signed_areas().sum() - np.pi) for l in range(4)]
    for a, b in zip(errs, errs[1:]):
        assert a / b >= 3.5


def test_text_roundtrip(tmp_path):
    mesh = disk_mesh(1)
    p = tmp_path / "m.txt"
    mesh.save(p)
    back = load_mesh(p, level=1)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.boundary_cycle, mesh.boundary_cycle)
    assert back.fingerprint() == mesh.fingerprint()
    assert p.read_text().splitlines()[0] == f"{mesh.n_vertices} {mesh.n_triangles} {mesh.n_boundary}"


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("3 1 3\n0 0\n1 0\n")
    with pytest.raises(MeshError):
        load_mesh(p)


def test_fingerprint_differs_between_levels():
    assert disk_mesh(0).fingerprint() != disk_mesh(1).fingerprint()
