"""Point cloud containers, kNN queries, patch extraction and reassembly."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

# above this many target points kNN goes through a kd-tree
EXHAUSTIVE_LIMIT = 1024
DEFAULT_PATCH_K = 256
COVERAGE_FACTOR = 3


class GeometryError(ValueError):
    pass


def as_cloud(points) -> np.ndarray:
    """Validate and return an (n, 3) float64 array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected (n, 3) points, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise GeometryError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class BoundingSphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class Patch:
    """A kNN neighbourhood stored in its normalized frame.

    ``points`` are ``(p - center) / scale`` for the member positions ``p``.
    """

    points: np.ndarray
    ref_index: int
    center: np.ndarray
    scale: float
    member_indices: np.ndarray

    def denormalize(self, points: np.ndarray | None = None) -> np.ndarray:
        pts = self.points if points is None else points
        return pts * self.scale + self.center

    def normalize(self, world_points: np.ndarray) -> np.ndarray:
        return (np.asarray(world_points, dtype=np.float64) - self.center) / self.scale

    def with_points(self, points: np.ndarray) -> Patch:
        return replace(self, points=np.asarray(points, dtype=np.float64))


def bounding_sphere(cloud) -> BoundingSphere:
    pts = as_cloud(cloud)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    return BoundingSphere(center=center, radius=radius)


def _sq_dists(queries: np.ndarray, target: np.ndarray) -> np.ndarray:
    # elementwise differences, not the expanded-norm trick, so every backend
    # that reranks with this function sees identical values
    out = np.empty((queries.shape[0], target.shape[0]))
    step = max(1, 2_000_000 // max(1, target.shape[0]))
    for lo in range(0, queries.shape[0], step):
        diff = queries[lo : lo + step, None, :] - target[None, :, :]
        out[lo : lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _rank(d2: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    # sort by (distance, index); lexsort uses the last key as primary
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


class KnnIndex:
    """Reusable kNN structure over a fixed target cloud.

    Small targets are scanned exhaustively; larger ones use a kd-tree for
    candidate generation, then exact distances are reranked so both paths
    return identical indices, including tie order.
    """

    def __init__(self, target):
        self.target = as_cloud(target)
        self.n = self.target.shape[0]
        self._tree = cKDTree(self.target) if self.n > EXHAUSTIVE_LIMIT else None

    def query(self, queries, k: int) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if k < 1 or k > self.n:
            raise GeometryError(f"k={k} must lie in [1, {self.n}]")
        if self._tree is None:
            return knn_exhaustive(q, self.target, k)
        out = np.empty((q.shape[0], k), dtype=np.int64)
        kth, _ = self._tree.query(q, k=k)
        kth = np.asarray(kth).reshape(q.shape[0], k)[:, -1]
        # the ball holds every point tied with (or closer than) the k-th one
        radii = kth * (1.0 + 1e-9) + 1e-12
        balls = self._tree.query_ball_point(q, radii)
        for i, cand in enumerate(balls):
            cand = np.asarray(cand, dtype=np.int64)
            d2 = _sq_dists(q[i : i + 1], self.target[cand])[0]
            out[i] = _rank(d2, cand, k)
        return out


def knn_exhaustive(queries, target, k: int) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(target, dtype=np.float64)
    if k < 1 or k > t.shape[0]:
        raise GeometryError(f"k={k} must lie in [1, {t.shape[0]}]")
    d2 = _sq_dists(q, t)
    # stable sort keeps ascending index order among equal distances
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_indices(queries, target, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest target points for each query.

    Rows are sorted by ascending distance, ties by ascending index.
    """
    return KnnIndex(target).query(queries, k)


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"m={m} must lie in [1, {n}]")
    if not 0 <= seed_index < n:
        raise GeometryError(f"seed_index {seed_index} out of range")
    picked = np.empty(m, dtype=np.int64)
    picked[0] = seed_index
    mind = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    for i in range(1, m):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picked


def extract_patch(cloud, ref_index: int, k: int, index: KnnIndex | None = None) -> Patch:
    pts = as_cloud(cloud)
    index = index if index is not None else KnnIndex(pts)
    members = index.query(pts[ref_index], k)[0]
    center = pts[ref_index].copy()
    local = pts[members] - center
    scale = float(np.sqrt((local**2).sum(axis=1)).max())
    if scale == 0.0:
        scale = 1.0
    return Patch(
        points=local / scale,
        ref_index=int(ref_index),
        center=center,
        scale=scale,
        member_indices=members,
    )


def num_seeds(n_points: int, k: int, coverage_factor: int = COVERAGE_FACTOR) -> int:
    return min(n_points, max(1, math.ceil(n_points * coverage_factor / k)))


def covering_seeds(cloud, k: int, index: KnnIndex | None = None):
    """FPS seeds whose k-patches cover every point, plus the patches.

    If the FPS seeds leave points uncovered, the lowest uncovered index is
    added as another seed until coverage is complete.
    """
    pts = as_cloud(cloud)
    index = index if index is not None else KnnIndex(pts)
    seeds = list(farthest_point_sample(pts, num_seeds(len(pts), k), 0))
    patches = [extract_patch(pts, s, k, index) for s in seeds]
    covered = np.zeros(len(pts), dtype=bool)
    for p in patches:
        covered[p.member_indices] = True
    while not covered.all():
        s = int(np.flatnonzero(~covered)[0])
        seeds.append(s)
        patches.append(extract_patch(pts, s, k, index))
        covered[patches[-1].member_indices] = True
        if not covered[s]:
            raise GeometryError(f"point {s} cannot be covered (more than k={k} duplicates)")
    return np.asarray(seeds, dtype=np.int64), patches


def patch_owners(cloud, seeds, patches):
    """Per point: (owning patch position, slot within that patch's members).

    The owner is, among patches containing the point, the one whose seed is
    closest to the point's original position; ties go to the earlier seed.
    """
    pts = as_cloud(cloud)
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) != len(patches):
        raise GeometryError("one patch per seed is required")
    n = len(pts)
    member = np.zeros((n, len(seeds)), dtype=bool)
    slot_of = np.full((n, len(seeds)), -1, dtype=np.int64)
    for j, p in enumerate(patches):
        member[p.member_indices, j] = True
        slot_of[p.member_indices, j] = np.arange(len(p.member_indices))
    uncovered = np.flatnonzero(~member.any(axis=1))
    if uncovered.size:
        raise GeometryError(f"point {int(uncovered[0])} is not covered by any patch")
    d2 = np.where(member, _sq_dists(pts, pts[seeds]), np.inf)
    owner = np.argmin(d2, axis=1)
    return owner, slot_of[np.arange(n), owner]


def stitch_cloud(cloud, seeds, filtered_patches) -> np.ndarray:
    """Reassemble filtered patches into a cloud with the input's order and count."""
    owner, slot = patch_owners(cloud, seeds, filtered_patches)
    out = np.empty((len(owner), 3))
    for j, p in enumerate(filtered_patches):
        rows = np.flatnonzero(owner == j)
        if rows.size:
            out[rows] = p.denormalize(p.points[slot[rows]])
    return out
