"""Geodesic polyhedra: subdivided icosahedra with vertices on a sphere.

The mesh geometry is pose-agnostic, which is what lets per-instance feature
banks share one vertex layout and be merged by pure rotation later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ResourceLimitError

LEVEL_CAP = 4


@dataclass(frozen=True)
class PolyMesh:
    """Closed triangle mesh with all vertices at one radius from the origin.

    ``vertices`` is (K, 3) float64, ``faces`` (F, 3) int32 with consistently
    outward winding.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (K, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.faces:
            for i, j in ((a, b), (b, c), (c, a)):
                key = (min(i, j), max(i, j))
                counts[key] = counts.get(key, 0) + 1
        return counts


# Icosahedron with outward-wound faces; vertices are scaled to the unit
# sphere before subdivision.
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int32,
)


def build_geodesic_polyhedron(level: int, radius: float = 1.0) -> PolyMesh:
    """Icosahedron subdivided ``level`` times, re-projected to ``radius``.

    Vertex count is 10 * 4**level + 2.  Levels above 4 are rejected as
    exceeding the desk-scale cap.
    """
    if level < 0:
        raise ValueError(f"subdivision level must be >= 0, got {level}")
    if level > LEVEL_CAP:
        raise ResourceLimitError(f"subdivision level {level} exceeds cap {LEVEL_CAP}")
    if radius <= 0.0:
        raise ValueError(f"radius must be > 0, got {radius}")

    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]

    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            idx = midpoint.get(key)
            if idx is None:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    vertices = np.array(verts) * radius
    return PolyMesh(vertices=vertices, faces=np.array(faces, dtype=np.int32))


def vertex_neighborhoods(mesh: PolyMesh, radius: float) -> list[np.ndarray]:
    """Per-vertex index arrays of vertices within arc distance ``radius``.

    Arc distance is measured on the circumscribing sphere; each vertex is a
    member of its own neighborhood.
    """
    v = mesh.vertices
    norms = np.linalg.norm(v, axis=1)
    unit = v / norms[:, None]
    cosang = np.clip(unit @ unit.T, -1.0, 1.0)
    arc = np.arccos(cosang) * norms[:, None]
    return [np.nonzero(arc[k] <= radius)[0].astype(np.int32) for k in range(len(v))]


def save_polymesh(mesh: PolyMesh, path: str | Path) -> None:
    """JSON with 17-significant-digit reals for exact round-trip."""
    verts = [
        "[" + ",".join(f"{x:.17g}" for x in row) + "]" for row in mesh.vertices
    ]
    faces = [f"[{a},{b},{c}]" for a, b, c in mesh.faces]
    text = (
        '{"vertices":[' + ",".join(verts) + '],"faces":[' + ",".join(faces) + "]}"
    )
    Path(path).write_text(text)


def load_polymesh(path: str | Path) -> PolyMesh:
    data = json.loads(Path(path).read_text())
    return PolyMesh(
        vertices=np.array(data["vertices"], dtype=np.float64),
        faces=np.array(data["faces"], dtype=np.int32),
    )
