"""Spatial kernels shared by the generator, discriminator and losses.

Everything here is deterministic: distance ties are always broken by the
lower point index, so each query can be checked exactly against a brute
force oracle. All functions are pure; inputs are never mutated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# below this size a uniform grid buys nothing
_BRUTE_FORCE_LIMIT = 64
_QUERY_CHUNK = 512


@dataclass(frozen=True)
class Frame:
    """A single timestamped point cloud (one frame of a 4D video).

    points has shape (N, 3) in normalized model units. time_value is only
    assigned once the frame takes part in a fusion.
    """

    points: np.ndarray
    time_index: int
    time_value: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"frame points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("frame must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("frame contains non-finite coordinates")
        if self.time_index < 0:
            raise ValueError("time_index must be >= 0")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class FusedCloud:
    """n frames fused into one (x, y, z, t) point set.

    t takes exactly n uniformly spaced levels in [0, 1] with the newest
    frame at t = 1; provenance maps each point back to its source frame.
    """

    points: np.ndarray      # (n*L, 4)
    frame_count: int
    per_frame_count: int
    provenance: np.ndarray  # (n*L,) int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        prov = np.asarray(self.provenance, dtype=np.intp)
        n, L = self.frame_count, self.per_frame_count
        if pts.shape != (n * L, 4):
            raise ValueError(f"fused points must be ({n * L}, 4), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("fused cloud contains non-finite values")
        if prov.shape != (n * L,) or prov.min() < 0 or prov.max() >= n:
            raise ValueError("provenance indices out of range")
        pts = pts.copy()
        prov = prov.copy()
        pts.flags.writeable = False
        prov.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "provenance", prov)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class NeighborList:
    """Result of a spatial query.

    center_indices holds the query (or, for fps_subset, the selected)
    indices; neighbors holds one index array per center, empty for
    fps_subset results.
    """

    center_indices: np.ndarray
    neighbors: list
    query_kind: str  # 'knn' | 'ball' | 'fps_subset'

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten to parallel (center, neighbor) index arrays."""
        if not self.neighbors:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
        counts = [len(nb) for nb in self.neighbors]
        centers = np.repeat(np.asarray(self.center_indices, dtype=np.intp), counts)
        flat = (np.concatenate(self.neighbors) if sum(counts) else
                np.empty(0, dtype=np.intp))
        return centers, flat.astype(np.intp)


@dataclass(frozen=True)
class NormalizeTransform:
    """Invertible (centroid, scale) pair produced by normalize()."""

    centroid: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.centroid


@dataclass(frozen=True)
class UniformGrid:
    """Immutable uniform-hash spatial index with cell size = query radius."""

    cell: float
    table: dict = field(repr=False)

    @classmethod
    def build(cls, xyz: np.ndarray, cell: float) -> "UniformGrid":
        keys = np.floor(np.asarray(xyz, dtype=np.float64) / cell).astype(np.int64)
        table: dict = {}
        for i, key in enumerate(map(tuple, keys)):
            table.setdefault(key, []).append(i)
        table = {k: np.asarray(v, dtype=np.intp) for k, v in table.items()}
        return cls(cell=cell, table=table)

    def candidates(self, point: np.ndarray) -> np.ndarray:
        """Indices in the 27 cells around the one containing point."""
        cx, cy, cz = (int(math.floor(c / self.cell)) for c in point[:3])
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    hit = self.table.get((cx + dx, cy + dy, cz + dz))
                    if hit is not None:
                        found.append(hit)
        if not found:
            return np.empty(0, dtype=np.intp)
        out = np.concatenate(found)
        out.sort()
        return out


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, FusedCloud):
        return cloud.points
    if isinstance(cloud, Frame):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _metric_view(points: np.ndarray, metric_dims: str) -> np.ndarray:
    if metric_dims == "xyz":
        return points[:, :3]
    if metric_dims in ("xyzt", "all"):
        return points
    raise ValueError(f"metric_dims must be 'xyz' or 'xyzt', got {metric_dims!r}")


def normalize(frames: list) -> tuple[list, NormalizeTransform]:
    """Center the union of all frames and scale it into the unit ball.

    Returns the transformed frames plus the invertible transform. If every
    point coincides the scale is left at 1 and a warning is emitted.
    """
    if not frames:
        raise ValueError("need at least one frame")
    allpts = np.concatenate([f.points for f in frames], axis=0)
    centroid = allpts.mean(axis=0)
    radii = np.linalg.norm(allpts - centroid, axis=1)
    scale = float(radii.max())
    if scale <= 0.0:
        warnings.warn("degenerate input: all points identical, scale left at 1")
        scale = 1.0
    tf = NormalizeTransform(centroid=centroid, scale=scale)
    out = [Frame(tf.apply(f.points), f.time_index, f.time_value) for f in frames]
    return out, tf


def fuse(frames: list) -> FusedCloud:
    """Fuse the last n frames into one (x, y, z, t) cloud.

    Frame 0 is the oldest; it gets t = 0 and the newest frame gets t = 1
    (a single frame gets t = 1). All frames must hold the same number of
    points: resample upstream first if they do not.
    """
    n = len(frames)
    if n < 1:
        raise ValueError("need at least one frame")
    counts = {len(f) for f in frames}
    if len(counts) != 1:
        raise ValueError(f"per-frame point counts differ: {sorted(counts)}; "
                         "resample upstream first")
    L = counts.pop()
    blocks = []
    prov = []
    for i, f in enumerate(frames):
        t = 1.0 if n == 1 else i / (n - 1)
        block = np.concatenate(
            [f.points, np.full((L, 1), t, dtype=np.float64)], axis=1)
        blocks.append(block)
        prov.append(np.full(L, i, dtype=np.intp))
    return FusedCloud(points=np.concatenate(blocks, axis=0),
                      frame_count=n, per_frame_count=L,
                      provenance=np.concatenate(prov))


def split(fused: FusedCloud) -> list:
    """Recover the per-frame coordinate arrays (inverse of fuse on xyz)."""
    return [fused.xyz[fused.provenance == i]
            for i in range(fused.frame_count)]


def knn(cloud, k: int, query_indices=None, metric_dims: str = "xyzt") -> NeighborList:
    """k nearest *other* points per query under squared Euclidean distance.

    Ties break toward the lower point index. metric_dims selects whether t
    (and any further feature columns) participate in the distance. If fewer
    than k candidates exist, all of them are returned.
    """
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    if k < 1:
        raise ValueError("k must be >= 1")
    coords = _metric_view(pts, metric_dims)
    n = coords.shape[0]
    queries = (np.arange(n, dtype=np.intp) if query_indices is None
               else np.asarray(query_indices, dtype=np.intp))
    k_eff = min(k, n - 1)
    neighbors: list = []
    for lo in range(0, len(queries), _QUERY_CHUNK):
        chunk = queries[lo:lo + _QUERY_CHUNK]
        diff = coords[chunk][:, None, :] - coords[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(len(chunk)), chunk] = np.inf
        # stable sort on distance == lexicographic (distance, index)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        neighbors.extend(order[i].astype(np.intp) for i in range(len(chunk)))
    return NeighborList(center_indices=queries, neighbors=neighbors,
                        query_kind="knn")


def ball_query(cloud, radius: float, max_neighbors: int,
               query_indices=None, grid: UniformGrid | None = None) -> NeighborList:
    """All points strictly within radius of each query (self excluded).

    Results are truncated to max_neighbors by ascending distance, ties by
    lower index; empty neighborhoods are allowed. Distances use xyz only.
    A prebuilt UniformGrid over the same cloud may be passed in.
    """
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    xyz = pts[:, :3]
    n = xyz.shape[0]
    queries = (np.arange(n, dtype=np.intp) if query_indices is None
               else np.asarray(query_indices, dtype=np.intp))
    r2 = radius * radius
    if grid is None and n >= _BRUTE_FORCE_LIMIT:
        grid = UniformGrid.build(xyz, cell=radius)
    neighbors: list = []
    for q in queries:
        cand = grid.candidates(xyz[q]) if grid is not None \
            else np.arange(n, dtype=np.intp)
        cand = cand[cand != q]
        if cand.size == 0:
            neighbors.append(np.empty(0, dtype=np.intp))
            continue
        diff = xyz[cand] - xyz[q]
        d2 = np.einsum("ij,ij->i", diff, diff)
        inside = d2 < r2
        cand, d2 = cand[inside], d2[inside]
        order = np.argsort(d2, kind="stable")[:max_neighbors]
        neighbors.append(cand[order])
    return NeighborList(center_indices=queries, neighbors=neighbors,
                        query_kind="ball")


def fps(cloud, fraction: float, candidate_indices=None,
        seed_rule: str = "lowest", rng: np.random.Generator | None = None) -> NeighborList:
    """Greedy farthest point sampling of ceil(fraction * |candidates|) points.

    seed_rule picks the starting point: 'lowest' (candidate with the lowest
    index, the deterministic default), 'lexmin' (lexicographically smallest
    (x, y, z); label-free, so relabeled clouds select the same geometric
    subset), or 'random' (seeded, for training-time variety). Each step adds
    the candidate farthest from the chosen set, ties toward the lower index.
    Distances use xyz only.
    """
    pts = _as_points(cloud)
    xyz = pts[:, :3]
    cand = (np.arange(xyz.shape[0], dtype=np.intp) if candidate_indices is None
            else np.asarray(candidate_indices, dtype=np.intp))
    if cand.size == 0:
        raise ValueError("candidate set is empty")
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    cand = np.sort(cand)
    m = math.ceil(fraction * cand.size)
    if seed_rule == "lowest":
        seed_pos = 0
    elif seed_rule == "lexmin":
        order = np.lexsort((xyz[cand, 2], xyz[cand, 1], xyz[cand, 0]))
        seed_pos = int(order[0])
    elif seed_rule == "random":
        if rng is None:
            raise ValueError("seed_rule='random' requires an rng")
        seed_pos = int(rng.integers(cand.size))
    else:
        raise ValueError(f"unknown seed_rule {seed_rule!r}")
    coords = xyz[cand]
    chosen = [seed_pos]
    min_d2 = np.einsum("ij,ij->i", coords - coords[seed_pos], coords - coords[seed_pos])
    for _ in range(m - 1):
        min_d2[chosen] = -np.inf
        nxt = int(np.argmax(min_d2))  # argmax takes the first max: lowest index
        chosen.append(nxt)
        diff = coords - coords[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    selected = cand[np.asarray(chosen, dtype=np.intp)]
    return NeighborList(center_indices=selected, neighbors=[],
                        query_kind="fps_subset")
