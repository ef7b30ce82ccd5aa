"""Marching-cubes isosurface extraction and ASCII PLY export.

The 256-entry triangle table is generated once at import from the cube's
face structure: on every face, each run of consecutive inside corners is cut
off by one segment, segments chain into closed polygons across faces, and
polygons are fan-triangulated. Because a face's segments depend only on that
face's four corners, neighbouring cubes always agree and the surface is
closed wherever it does not touch the grid boundary. Faces with two
diagonal inside corners resolve by separating the inside corners.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from nfldm.camera import GridSpec

CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
         (0, 4), (1, 5), (2, 6), (3, 7)]
_EDGE_ID = {frozenset(e): i for i, e in enumerate(EDGES)}


def _faces() -> List[List[int]]:
    """Cube faces as corner cycles, counter-clockwise seen from outside."""
    faces = []
    for axis, val in itertools.product(range(3), (0, 1)):
        ids = [i for i in range(8) if CORNERS[i][axis] == val]
        others = [a for a in range(3) if a != axis]
        ang = [np.arctan2(CORNERS[i][others[1]] - 0.5, CORNERS[i][others[0]] - 0.5) for i in ids]
        cyc = [ids[k] for k in np.argsort(ang)]
        p = CORNERS[cyc].astype(float)
        normal = np.cross(p[1] - p[0], p[2] - p[1])
        outward = np.zeros(3)
        outward[axis] = 1 if val else -1
        if normal @ outward < 0:
            cyc = cyc[::-1]
        faces.append(cyc)
    return faces


FACES = _faces()


def _case_polygons(case: int) -> List[List[int]]:
    inside = [(case >> i) & 1 for i in range(8)]
    nxt: Dict[int, int] = {}
    for cyc in FACES:
        n = len(cyc)
        for k in range(n):
            prev, cur = cyc[k - 1], cyc[k]
            if inside[cur] and not inside[prev]:
                entry = _EDGE_ID[frozenset((prev, cur))]
                m = k
                while inside[cyc[(m + 1) % n]]:
                    m += 1
                exit_ = _EDGE_ID[frozenset((cyc[m % n], cyc[(m + 1) % n]))]
                nxt[exit_] = entry
    polys, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        poly, e = [], start
        while e not in seen:
            seen.add(e)
            poly.append(e)
            e = nxt[e]
        polys.append(poly)
    return polys


def _build_table() -> List[List[Tuple[int, int, int]]]:
    table = []
    for case in range(256):
        tris = []
        for poly in _case_polygons(case):
            for i in range(1, len(poly) - 1):
                tris.append((poly[0], poly[i], poly[i + 1]))
        table.append(tris)
    return table


TRI_TABLE = _build_table()


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def euler_characteristic(self) -> int:
        edges = {tuple(sorted(e)) for t in self.triangles for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
        used = len(np.unique(self.triangles)) if len(self.triangles) else 0
        return used - len(edges) + len(self.triangles)

    def is_closed(self) -> bool:
        """Every edge shared by exactly two triangles, with opposite orientation."""
        count: Dict[Tuple[int, int], int] = {}
        for t in self.triangles:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                count[(a, b)] = count.get((a, b), 0) + 1
        return all(v == 1 and count.get((b, a), 0) == 1 for (a, b), v in count.items())


def marching_cubes(density, iso: float = 0.5, spec: GridSpec = None) -> Mesh:
    """Isosurface of a ``(Z, X, Y)`` grid sampled at voxel centres.

    Values strictly above ``iso`` count as inside. Output triangles are wound
    so their normals point from inside to outside. Vertices are in world
    coordinates when ``spec`` is given, else in ``(z, x, y)`` index units.
    """
    vol = np.asarray(density, dtype=np.float64)
    if vol.ndim != 3 or min(vol.shape) < 2:
        raise ValueError("density grid must be 3D with extent >= 2 per axis")
    inside = vol > iso
    nz, nx, ny = vol.shape
    # corner (a, b, c) of the local cube maps to grid offset (dz, dx, dy) = (c, a, b)
    offs = [(c[2], c[0], c[1]) for c in CORNERS]
    case = np.zeros((nz - 1, nx - 1, ny - 1), dtype=np.int64)
    for bit, (dz, dx, dy) in enumerate(offs):
        case |= inside[dz:nz - 1 + dz, dx:nx - 1 + dx, dy:ny - 1 + dy].astype(np.int64) << bit
    active = np.argwhere((case > 0) & (case < 255))

    vert_index: Dict[Tuple[int, int, int, int, int, int], int] = {}
    verts: List[np.ndarray] = []
    tris: List[Tuple[int, int, int]] = []

    def vertex(cell, edge):
        a, b = EDGES[edge]
        pa = tuple(int(cell[k] + offs[a][k]) for k in range(3))
        pb = tuple(int(cell[k] + offs[b][k]) for k in range(3))
        key = min(pa, pb) + max(pa, pb)
        if key not in vert_index:
            va, vb = vol[pa], vol[pb]
            t = (iso - va) / (vb - va)
            verts.append(np.array(pa, float) + t * (np.array(pb, float) - np.array(pa, float)))
            vert_index[key] = len(verts) - 1
        return vert_index[key]

    for cell in active:
        for e0, e1, e2 in TRI_TABLE[case[tuple(cell)]]:
            tris.append((vertex(cell, e0), vertex(cell, e1), vertex(cell, e2)))

    v = np.array(verts).reshape(-1, 3)
    tri = np.array(tris, dtype=np.int64).reshape(-1, 3)
    # local cube axes (a, b, c) = grid (x, y, z) so index-space winding flips handedness
    tri = tri[:, [0, 2, 1]]
    if spec is not None:
        v = np.asarray(spec.origin) + (v + 0.5) * np.asarray(spec.voxel_size)
        v = v[:, [1, 2, 0]]
    return Mesh(v, tri)


def write_ply(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\ncomment marching-cubes isosurface\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def read_ply(path) -> Mesh:
    """Reads the ASCII subset produced by :func:`write_ply`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError("not a PLY file")
    n_v = n_f = 0
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        i += 1
    body = lines[i + 1:]
    verts = [list(map(float, l.split())) for l in body[:n_v]]
    faces = [list(map(int, l.split()))[1:4] for l in body[n_v:n_v + n_f]]
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
