"""Geodesic polyhedron construction, topology, and round-trip."""

import numpy as np
import pytest

from meshpose.errors import ResourceLimitError
from meshpose.icosphere import (PolyMesh, build_geodesic_polyhedron,
                                load_polymesh, save_polymesh,
                                vertex_neighborhoods)


@pytest.mark.parametrize("level,verts,faces", [
    (0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280),
])
def test_counts(level, verts, faces):
    mesh = build_geodesic_polyhedron(level)
    assert len(mesh.vertices) == verts == 10 * 4 ** level + 2
    assert len(mesh.faces) == faces


def test_vertices_on_sphere():
    for radius in (1.0, 3.5):
        mesh = build_geodesic_polyhedron(2, radius=radius)
        norms = np.linalg.norm(mesh.vertices, axis=1)
        assert np.max(np.abs(norms - radius)) < 1e-12
        assert abs(mesh.radius - radius) < 1e-12


def test_closed_manifold_every_edge_shared_twice():
    mesh = build_geodesic_polyhedron(2)
    assert set(mesh.edge_counts().values()) == {2}
    # Euler characteristic of a sphere: V - E + F = 2.
    v, e, f = len(mesh.vertices), len(mesh.edge_counts()), len(mesh.faces)
    assert v - e + f == 2


def test_outward_winding():
    mesh = build_geodesic_polyhedron(1)
    tri = mesh.vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centers = tri.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", normals, centers) > 0)


def test_level_and_radius_validation():
    with pytest.raises(ValueError):
        build_geodesic_polyhedron(-1)
    with pytest.raises(ResourceLimitError):
        build_geodesic_polyhedron(5)
    with pytest.raises(ValueError):
        build_geodesic_polyhedron(1, radius=0.0)


def test_polymesh_validation():
    with pytest.raises(ValueError):
        PolyMesh(np.zeros((4, 2)), np.zeros((1, 3), dtype=np.int32))
    with pytest.raises(ValueError):
        PolyMesh(np.zeros((4, 3)), np.array([[0, 1, 9]], dtype=np.int32))


def test_polymesh_arrays_immutable():
    mesh = build_geodesic_polyhedron(0)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 5.0


def test_neighborhoods_contain_self_and_are_symmetric():
    mesh = build_geodesic_polyhedron(1)
    hoods = vertex_neighborhoods(mesh, 0.5)
    for k, hood in enumerate(hoods):
        assert k in hood
        for j in hood:
            assert k in hoods[j]


def test_neighborhood_radius_zero_is_self_only():
    mesh = build_geodesic_polyhedron(1)
    hoods = vertex_neighborhoods(mesh, 0.0)
    assert all(len(h) == 1 and h[0] == k for k, h in enumerate(hoods))


def test_neighborhoods_match_bruteforce_arcs():
    sphere_r = 2.0
    mesh = build_geodesic_polyhedron(1, radius=sphere_r)
    radius = 0.8
    hoods = vertex_neighborhoods(mesh, radius)
    unit = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    for k in range(len(mesh.vertices)):
        arcs = sphere_r * np.arccos(np.clip(unit @ unit[k], -1, 1))
        expect = set(np.nonzero(arcs <= radius)[0].tolist())
        assert set(hoods[k].tolist()) == expect


def test_save_load_roundtrip_exact(tmp_path):
    mesh = build_geodesic_polyhedron(2, radius=1.7)
    path = tmp_path / "mesh.json"
    save_polymesh(mesh, path)
    back = load_polymesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
