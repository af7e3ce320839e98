"""Procedural T-pose mannequin standing in for a parametric body model.

The body is z-up, faces -y, and is assembled from a torso capsule, a head
sphere and four limb capsules. Region labels (body/head/hand) come from
construction; finer garment parts used by the data painter are classified
from canonical coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import BODY, HAND, HEAD, TriMesh, densify_mesh, vertex_normals
from .points import farthest_point_subsample, normal_frames

HEAD_CENTER = np.array([0.0, 0.0, 0.72])
HEAD_RADIUS = 0.12
SHOULDER_X = 0.20
HAND_X = 0.74
ARM_END_X = 0.85
HIP_Z = -0.05
ANKLE_Z = -0.85
FOOT_Z = -0.74

# garment parts used for painting
TORSO, ARM, HAND_PART, LEG, FOOT, HAIR, FACE = range(7)
PART_NAMES = ("torso", "arm", "hand", "leg", "foot", "hair", "face")

SHAPE_DIMS = 10


def revolve(p0, p1, profile, n_around: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed surface of revolution about the segment ``p0 -> p1``.

    ``profile`` lists ``(t, rho)`` pairs strictly between the poles, where ``t``
    is the signed distance along the axis from ``p0`` and ``rho`` the ring radius.
    The two poles sit at ``t_first - rho``-style end caps supplied by the caller
    as the first and last profile entries with ``rho == 0``.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    axis /= np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)

    (t_start, _), (t_end, _) = profile[0], profile[-1]
    rings = profile[1:-1]
    verts = [p0 + t_start * axis]
    for t, rho in rings:
        for j in range(n_around):
            a = 2.0 * math.pi * j / n_around
            verts.append(p0 + t * axis + rho * (math.cos(a) * u + math.sin(a) * w))
    verts.append(p0 + t_end * axis)
    verts = np.array(verts)

    faces = []
    bottom, top = 0, len(verts) - 1
    n_rings = len(rings)

    def ring(r, j):
        return 1 + r * n_around + (j % n_around)

    for j in range(n_around):
        faces.append((bottom, ring(0, j + 1), ring(0, j)))
    for r in range(n_rings - 1):
        for j in range(n_around):
            a, b = ring(r, j), ring(r, j + 1)
            c, d = ring(r + 1, j), ring(r + 1, j + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    for j in range(n_around):
        faces.append((top, ring(n_rings - 1, j), ring(n_rings - 1, j + 1)))
    return verts, np.array(faces, dtype=np.int64)


def capsule(p0, p1, radius: float, n_around: int, n_cyl: int, n_cap: int) -> TriMesh:
    length = float(np.linalg.norm(np.subtract(p1, p0)))
    profile = [(-radius, 0.0)]
    for i in range(1, n_cap + 1):
        th = 0.5 * math.pi * i / (n_cap + 1)
        profile.append((-radius * math.cos(th), radius * math.sin(th)))
    for i in range(n_cyl):
        profile.append((length * i / max(n_cyl - 1, 1), radius))
    for i in range(n_cap, 0, -1):
        th = 0.5 * math.pi * i / (n_cap + 1)
        profile.append((length + radius * math.cos(th), radius * math.sin(th)))
    profile.append((length + radius, 0.0))
    v, f = revolve(p0, p1, profile, n_around)
    return TriMesh(v, f, None)


def uv_sphere(center, radius: float, n_around: int, n_rings: int) -> TriMesh:
    center = np.asarray(center, dtype=np.float64)
    profile = [(-radius, 0.0)]
    for i in range(1, n_rings + 1):
        th = math.pi * i / (n_rings + 1)
        profile.append((-radius * math.cos(th), radius * math.sin(th)))
    profile.append((radius, 0.0))
    v, f = revolve(center, center + [0.0, 0.0, 1.0], profile, n_around)
    return TriMesh(v, f, None)


def icosphere(subdivisions: int = 2) -> TriMesh:
    """Unit icosphere via midpoint subdivision of an icosahedron."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    mesh = TriMesh(v, f, None)
    for _ in range(subdivisions):
        edge = float(mesh.edge_lengths().min()) * 0.99
        mesh = densify_mesh(mesh, edge, math.inf)
        mesh = TriMesh(mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True), mesh.faces, mesh.region)
    return mesh


def mannequin_mesh() -> TriMesh:
    """Coarse (~670 vertex) T-pose mannequin with region labels."""
    torso = capsule([0, 0, HIP_Z], [0, 0, 0.45], 0.16, 16, 4, 3)
    torso.vertices[:, 1] *= 0.65
    head = uv_sphere(HEAD_CENTER, HEAD_RADIUS, 14, 7)
    head.region[:] = HEAD
    parts = [torso, head]
    for side in (-1.0, 1.0):
        arm = capsule([side * SHOULDER_X, 0, 0.43], [side * ARM_END_X, 0, 0.43], 0.05, 10, 6, 2)
        arm.region[np.abs(arm.vertices[:, 0]) > HAND_X] = HAND
        leg = capsule([side * 0.09, 0, HIP_Z], [side * 0.09, 0, ANKLE_Z], 0.07, 10, 6, 2)
        parts.extend([arm, leg])
    return TriMesh.concatenate(parts)


def body_parts(points: np.ndarray) -> np.ndarray:
    """Classify canonical points into garment parts for painting."""
    p = np.asarray(points)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    parts = np.full(len(p), TORSO, dtype=np.int64)
    ax = np.abs(x)
    head = np.linalg.norm(p - HEAD_CENTER, axis=1) < HEAD_RADIUS * 1.05
    arm = (ax > SHOULDER_X + 0.02) & (z > 0.3) & ~head
    parts[arm] = ARM
    parts[arm & (ax > HAND_X)] = HAND_PART
    leg = (z < HIP_Z - 0.02) & ~arm
    parts[leg] = LEG
    parts[leg & (z < FOOT_Z)] = FOOT
    rel = p - HEAD_CENTER
    hair = head & ((rel[:, 2] > 0.03) | ((y > 0.0) & (rel[:, 2] > -0.09)))
    parts[head] = FACE
    parts[hair] = HAIR
    return parts


def _shape_basis(v: np.ndarray) -> np.ndarray:
    """Smooth proportional deformations, V x 3 x SHAPE_DIMS (metres per unit coefficient)."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    ax = np.abs(x)
    sx = np.sign(x)
    core = (ax < 0.25).astype(np.float64)
    basis = np.zeros((len(v), 3, SHAPE_DIMS))
    basis[:, 2, 0] = 0.04 * (z + 0.92)  # stature
    basis[:, 0, 1] = 0.10 * np.clip(x, -0.2, 0.2)  # shoulder width
    basis[:, 1, 2] = 0.12 * y * core  # girth
    basis[:, 0, 3] = 0.05 * sx * np.maximum(ax - SHOULDER_X, 0.0)  # arm length
    basis[:, 2, 4] = -0.06 * np.maximum(HIP_Z - z, 0.0)  # leg length
    head = np.linalg.norm(v - HEAD_CENTER, axis=1) < 0.15
    basis[head, :, 5] = 0.10 * (v[head] - HEAD_CENTER)  # head size
    basis[:, 1, 6] = -0.03 * np.exp(-(((z - 0.1) / 0.15) ** 2)) * core * (y < 0)  # belly
    basis[:, 0, 7] = 0.15 * x * np.exp(-(((z + 0.1) / 0.2) ** 2)) * core  # hips
    basis[:, 1, 8] = -0.02 * np.clip((z - 0.5) / 0.35, 0.0, 1.0)  # head forward
    basis[:, 2, 9] = 0.03 * np.exp(-(((ax - 0.3) / 0.2) ** 2)) * (z > 0.3)  # shoulder height
    return basis


@dataclass
class BodyModel:
    """Densified mannequin with ``N`` Gaussian anchors on its surface.

    ``mesh`` is the densified surface; anchors are a farthest-point subset of its
    vertices so that the point count is exactly the configured value.
    """

    mesh: TriMesh
    anchor_index: np.ndarray
    shape_basis: np.ndarray  # V x 3 x B over mesh vertices
    normals: np.ndarray = field(init=False)
    rotations: np.ndarray = field(init=False)
    parts: np.ndarray = field(init=False)

    def __post_init__(self):
        n, _ = vertex_normals(self.mesh)
        self.normals = n[self.anchor_index]
        self.rotations = normal_frames(self.normals)
        self.parts = body_parts(self.anchors)

    @property
    def n_points(self) -> int:
        return len(self.anchor_index)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def anchors(self) -> np.ndarray:
        return self.mesh.vertices[self.anchor_index]

    @property
    def regions(self) -> np.ndarray:
        return self.mesh.region[self.anchor_index]

    def anchor_basis(self) -> np.ndarray:
        return self.shape_basis[self.anchor_index]

    def posed(self, beta: np.ndarray) -> np.ndarray:
        """Anchor positions for shape coefficients ``beta``."""
        return self.anchors + self.anchor_basis() @ np.asarray(beta, dtype=np.float64)

    def posed_mesh(self, beta: np.ndarray) -> TriMesh:
        v = self.mesh.vertices + self.shape_basis @ np.asarray(beta, dtype=np.float64)
        return TriMesh(v, self.mesh.faces, self.mesh.region)


def region_quotas(mesh: TriMesh, n_points: int, density: dict[int, float]) -> dict[int, int]:
    """Split ``n_points`` across regions in proportion to surface area times density."""
    areas = mesh.face_areas()
    face_region = mesh.region[mesh.faces[:, 0]]
    weight = {r: float(areas[face_region == r].sum()) * density[r] for r in density}
    total = sum(weight.values())
    quotas = {r: int(round(n_points * w / total)) for r, w in weight.items()}
    # fix rounding so the quotas add up exactly
    largest = max(quotas, key=lambda r: weight[r])
    quotas[largest] += n_points - sum(quotas.values())
    return quotas


DEFAULT_DENSITY = {BODY: 1.0, HEAD: 4.0, HAND: 4.0}


def build_body_model(n_points: int = 2400, seed: int = 0, density: dict[int, float] | None = None) -> BodyModel:
    """Densified mannequin with exactly ``n_points`` anchors.

    Each region receives a share of the anchors proportional to its area times
    ``density`` (head and hands are denser since their splats are smaller). The
    mesh is densified until every region has at least twice its share of
    vertices, then each region is farthest-point subsampled.
    """
    density = density or DEFAULT_DENSITY
    base = mannequin_mesh()
    quotas = region_quotas(base, n_points, density)
    edge = float(base.edge_lengths().max())
    mesh = base
    while any(np.sum(mesh.region == r) < 2 * q for r, q in quotas.items()):
        edge *= 0.85
        mesh = densify_mesh(base, edge, math.inf)
    picks = []
    for r in sorted(quotas):
        members = np.flatnonzero(mesh.region == r)
        if quotas[r] == 0:
            continue
        _, local = farthest_point_subsample(mesh.vertices[members], quotas[r], seed)
        picks.append(members[local])
    return BodyModel(mesh, np.concatenate(picks), _shape_basis(mesh.vertices))
