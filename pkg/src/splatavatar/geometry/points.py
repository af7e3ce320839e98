"""Point-set plumbing: exact kNN graphs, farthest-point sampling, tangent frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KnnGraph:
    indices: np.ndarray  # N x k, int64

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


def knn_indices(
    query: np.ndarray,
    reference: np.ndarray | None = None,
    k: int = 8,
    include_self: bool = True,
    chunk: int = 1024,
) -> KnnGraph:
    """Exact Euclidean k nearest neighbours of ``query`` points in ``reference``.

    Rows are ordered by ascending distance with ties broken by ascending index.
    Passing ``reference=None`` means the query set is its own reference; only then
    does ``include_self=False`` drop each point's own index.
    """
    query = np.asarray(query, dtype=np.float64)
    self_ref = reference is None or reference is query
    reference = query if reference is None else np.asarray(reference, dtype=np.float64)
    n_ref = len(reference)
    limit = n_ref - (0 if include_self or not self_ref else 1)
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range [1, {limit}]")

    out = np.empty((len(query), k), dtype=np.int64)
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        d2 = ((q[:, None, :] - reference[None, :, :]) ** 2).sum(-1)
        if self_ref and not include_self:
            rows = np.arange(len(q))
            d2[rows, start + rows] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start : start + chunk] = order[:, :k]
    return KnnGraph(out)


def farthest_point_subsample(points: np.ndarray, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Greedy farthest-point sampling with a seeded first pick.

    Returns the selected ``n x 3`` points and their indices into ``points``.
    Ties in the max-min distance go to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    total = len(points)
    if not 1 <= n <= total:
        raise ValueError(f"n={n} out of range [1, {total}]")
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(total)
    min_d2 = ((points - points[chosen[0]]) ** 2).sum(1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        min_d2 = np.minimum(min_d2, ((points - points[nxt]) ** 2).sum(1))
    return points[chosen], chosen


def normal_frames(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column is the given unit normal.

    The first column is global +x projected onto the tangent plane, or +y when
    the normal is within ``|n.x| > 0.99`` of the x axis.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    length = np.linalg.norm(n, axis=1)
    if np.any(length == 0):
        raise ValueError("zero normal")
    if np.any(np.abs(length - 1.0) > 1e-4):
        raise ValueError("normals must be unit length")
    n = n / length[:, None]
    ref = np.where(np.abs(n[:, :1]) > 0.99, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = ref - (ref * n).sum(1, keepdims=True) * n
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def normal_frame(normal) -> np.ndarray:
    return normal_frames(np.asarray(normal, dtype=np.float64)[None])[0]
