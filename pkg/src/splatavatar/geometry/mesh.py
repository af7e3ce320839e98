"""Triangle meshes: densification, vertex normals and ASCII PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BODY, HEAD, HAND = 0, 1, 2
REGION_NAMES = {BODY: "body", HEAD: "head", HAND: "hand"}

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass
class TriMesh:
    vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3
    region: np.ndarray  # V

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.region is None:
            self.region = np.full(len(self.vertices), BODY, dtype=np.int64)
        self.region = np.asarray(self.region, dtype=np.int64)
        if len(self.region) != len(self.vertices):
            raise ValueError("region labels must cover every vertex")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.linalg.norm(v - np.roll(v, -1, axis=1), axis=-1)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    @staticmethod
    def concatenate(meshes: list["TriMesh"]) -> "TriMesh":
        verts, faces, regions = [], [], []
        offset = 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            regions.append(m.region)
            offset += m.n_vertices
        return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(regions))


def _violations(verts: np.ndarray, faces: np.ndarray, edge_thresh: float, area_thresh: float) -> np.ndarray:
    v = verts[faces]
    e = v - np.roll(v, -1, axis=1)
    longest = np.sqrt((e**2).sum(-1)).max(1)
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)
    return (area > 0.0) & ((longest > edge_thresh) | (area > area_thresh))


def densify_mesh(mesh: TriMesh, edge_thresh: float, area_thresh: float) -> TriMesh:
    """Recursively split faces into four via edge midpoints.

    A face is split while any of its edges is longer than ``edge_thresh`` or its
    area exceeds ``area_thresh``; zero-area faces are left alone. Midpoints are
    shared between neighbouring faces and take the region label of their
    lower-index endpoint. Input vertices keep their indices, so the output vertex
    array starts with the input one.
    """
    if not (edge_thresh > 0 and area_thresh > 0):
        raise ValueError("thresholds must be positive")
    verts = mesh.vertices.copy()
    region = list(mesh.region)
    new_verts: list[np.ndarray] = []
    midpoints: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        idx = midpoints.get(key)
        if idx is None:
            idx = len(verts) + len(new_verts)
            new_verts.append(0.5 * (all_verts(i) + all_verts(j)))
            region.append(region[key[0]])
            midpoints[key] = idx
        return idx

    def all_verts(i: int) -> np.ndarray:
        return verts[i] if i < len(verts) else new_verts[i - len(verts)]

    done = []
    pending = mesh.faces
    while len(pending):
        if new_verts:
            verts = np.concatenate([verts, np.array(new_verts)])
            new_verts = []
        split = _violations(verts, pending, edge_thresh, area_thresh)
        nxt = []
        for face, s in zip(pending.tolist(), split.tolist()):
            if not s:
                done.append(face)
                continue
            a, b, c = face
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        pending = np.array(nxt, dtype=np.int64).reshape(-1, 3)
    if new_verts:
        verts = np.concatenate([verts, np.array(new_verts)])
    faces = np.array(done, dtype=np.int64).reshape(-1, 3)
    return TriMesh(verts, faces, np.array(region, dtype=np.int64))


def vertex_normals(mesh: TriMesh) -> tuple[np.ndarray, int]:
    """Area-weighted vertex normals.

    Returns the V x 3 unit normals and the number of vertices that fell back to
    ``(0, 0, 1)`` because they had no incident face or a zero-length sum.
    """
    v = mesh.vertices
    f = mesh.faces
    acc = np.zeros_like(v)
    if len(f):
        # cross product length is twice the face area, which is the weighting
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for corner in range(3):
            np.add.at(acc, f[:, corner], fn)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-12
    out = np.where(bad[:, None], FALLBACK_NORMAL, acc / np.where(bad, 1.0, norm)[:, None])
    return out, int(bad.sum())


def write_ply(path: str | Path, mesh: TriMesh) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property int region",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, r in zip(mesh.vertices, mesh.region):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(r)}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path: str | Path) -> TriMesh:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vprops: list[str] = []
    current = None
    i = 1
    while True:
        line = text[i].strip()
        i += 1
        parts = line.split()
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vprops.append(parts[-1])
        elif parts[0] == "end_header":
            break
    rows = np.array([list(map(float, text[i + j].split())) for j in range(n_vert)]).reshape(n_vert, -1)
    i += n_vert
    col = {name: k for k, name in enumerate(vprops)}
    verts = rows[:, [col["x"], col["y"], col["z"]]]
    region = rows[:, col["region"]].astype(np.int64) if "region" in col else None
    faces = []
    for j in range(n_face):
        vals = list(map(int, text[i + j].split()))
        if vals[0] != 3:
            raise ValueError("only triangular faces are supported")
        faces.append(vals[1:4])
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), region)
