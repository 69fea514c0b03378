"""Point-cloud bookkeeping: radius graphs, connectivity, sampling and the latent grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay, QhullError

GROWTH = 1.2


@dataclass
class PointCloud:
    """Positions ``[Q, d]`` with per-point object labels and an axis-aligned box.

    Bounds containment is not enforced here: rollouts legitimately produce
    points slightly outside the box. :meth:`inside` reports it.
    """

    positions: np.ndarray
    bounds: np.ndarray
    object_id: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] not in (2, 3):
            raise ValueError(f"positions must be [Q, 2] or [Q, 3], got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud needs at least one point")
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, -1)
        if self.bounds.shape[1] != self.dim:
            raise ValueError(f"bounds {self.bounds.shape} do not match dimension {self.dim}")
        if self.object_id is None:
            self.object_id = np.zeros(len(self), dtype=np.int64)
        else:
            self.object_id = np.asarray(self.object_id, dtype=np.int64)
            if self.object_id.shape != (len(self),):
                raise ValueError("object_id must have one entry per point")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[0]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[1]

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def inside(self) -> bool:
        return bool(np.all(self.positions >= self.lo) and np.all(self.positions <= self.hi))

    def take(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[index], self.bounds, self.object_id[index])


def radius_pairs(queries: np.ndarray, sources: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All ``(q, s)`` with ``||queries[q] - sources[s]|| <= r``.

    Exact, via a uniform hash grid with cell size ``r``. Output is sorted by
    query index, then source index.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    queries = np.asarray(queries, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    empty = np.zeros(0, dtype=np.int64)
    if len(queries) == 0 or len(sources) == 0:
        return empty, empty.copy()
    d = queries.shape[1]
    origin = np.minimum(queries.min(axis=0), sources.min(axis=0))
    q_cell = np.floor((queries - origin) / r).astype(np.int64)
    s_cell = np.floor((sources - origin) / r).astype(np.int64)
    # one padding cell on each side so neighbor offsets never wrap
    extent = np.maximum(q_cell.max(axis=0), s_cell.max(axis=0)) + 3
    strides = np.ones(d, dtype=np.int64)
    for ax in range(d - 2, -1, -1):
        strides[ax] = strides[ax + 1] * extent[ax + 1]
    s_key = (s_cell + 1) @ strides
    order = np.argsort(s_key, kind="stable")
    s_sorted = s_key[order]

    q_parts, s_parts = [], []
    for offset in itertools.product((-1, 0, 1), repeat=d):
        key = (q_cell + 1 + np.asarray(offset)) @ strides
        lo = np.searchsorted(s_sorted, key, side="left")
        hi = np.searchsorted(s_sorted, key, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        qi = np.repeat(np.arange(len(queries)), counts)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        si = order[starts + np.arange(total)]
        q_parts.append(qi)
        s_parts.append(si)
    if not q_parts:
        return empty, empty.copy()
    qi = np.concatenate(q_parts)
    si = np.concatenate(s_parts)
    diff = queries[qi] - sources[si]
    keep = np.sqrt(np.einsum("ij,ij->i", diff, diff)) <= r
    qi, si = qi[keep], si[keep]
    srt = np.lexsort((si, qi))
    return qi[srt], si[srt]


@dataclass
class RadiusGraph:
    """Directed edges ``(receiver, sender)`` with ``||x_r - x_s|| <= radius``."""

    radius: float
    receivers: np.ndarray
    senders: np.ndarray
    num_nodes: int
    object_id: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.receivers.shape[0])

    @cached_property
    def component_counts(self) -> dict[int, int]:
        return connected_components(self, self.object_id)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.receivers.tolist(), self.senders.tolist()))


def build_radius_graph(cloud: PointCloud, r: float) -> RadiusGraph:
    """Exact radius graph without self-edges."""
    recv, send = radius_pairs(cloud.positions, cloud.positions, r)
    keep = recv != send
    return RadiusGraph(float(r), recv[keep], send[keep], len(cloud), cloud.object_id)


class UnionFind:
    """Disjoint sets over ``0..n-1`` with vectorized hooking and path compression."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, x: np.ndarray | None = None) -> np.ndarray:
        p = self.parent
        while True:
            grand = p[p]
            if np.array_equal(grand, p):
                break
            p = grand
        self.parent = p
        return p if x is None else p[x]

    def union(self, a: np.ndarray, b: np.ndarray) -> None:
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        while a.size:
            ra, rb = self.find(a), self.find(b)
            differ = ra != rb
            if not differ.any():
                break
            ra, rb = ra[differ], rb[differ]
            a, b = a[differ], b[differ]
            # hook the larger root under the smaller one; never creates a cycle
            np.minimum.at(self.parent, np.maximum(ra, rb), np.minimum(ra, rb))


def connected_components(graph: RadiusGraph, object_id: np.ndarray | None = None) -> dict[int, int]:
    """Number of connected components per object, using only same-object edges."""
    object_id = graph.object_id if object_id is None else np.asarray(object_id, dtype=np.int64)
    uf = UnionFind(graph.num_nodes)
    same = object_id[graph.receivers] == object_id[graph.senders]
    uf.union(graph.receivers[same], graph.senders[same])
    roots = uf.find()
    counts: dict[int, int] = {}
    for obj in np.unique(object_id):
        counts[int(obj)] = int(np.unique(roots[object_id == obj]).size)
    return counts


def _single_component(cloud: PointCloud, r: float) -> tuple[bool, RadiusGraph]:
    graph = build_radius_graph(cloud, r)
    return all(c == 1 for c in connected_components(graph).values()), graph


def _unique_rows(points: np.ndarray) -> np.ndarray:
    q = points[np.lexsort(points.T[::-1])]
    return q[np.r_[True, np.any(q[1:] != q[:-1], axis=1)]]


def bottleneck_distance(points: np.ndarray) -> float:
    """Longest edge of the Euclidean minimum spanning tree.

    This is the smallest ball radius that connects the points. The tree is
    taken over Delaunay edges (which contain it); degenerate inputs fall back
    to the dense distance matrix.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    uniq = _unique_rows(points)
    n = len(uniq)
    if n < 2:
        return 0.0
    edges = None
    if n > points.shape[1] + 1:
        try:
            simp = Delaunay(uniq).simplices
            pairs = np.concatenate([simp[:, [a, b]] for a, b in itertools.combinations(range(simp.shape[1]), 2)])
            key = np.unique(np.minimum(pairs[:, 0], pairs[:, 1]).astype(np.int64) * n
                            + np.maximum(pairs[:, 0], pairs[:, 1]))
            edges = np.stack([key // n, key % n], axis=1)
        except QhullError:
            edges = None
    if edges is None:
        i, j = np.triu_indices(n, k=1)
        edges = np.stack([i, j], axis=1)
    w = np.linalg.norm(uniq[edges[:, 0]] - uniq[edges[:, 1]], axis=1)
    # every point in uniq is distinct, so all weights are > 0 and csgraph keeps them
    graph = csr_matrix((w, (edges[:, 0], edges[:, 1])), shape=(n, n))
    tree = minimum_spanning_tree(graph)
    if tree.nnz < n - 1:
        raise RuntimeError("spanning tree is incomplete")
    return float(tree.data.max())


def find_connected_radius(cloud: PointCloud, r0: float, growth: float = GROWTH,
                          return_graph: bool = False):
    """Smallest ``r0 * growth**k`` (k >= 0) that leaves every object as one component.

    The result is capped at the bounds diagonal. The needed index follows from
    the per-object spanning-tree bottleneck; it is then confirmed on the radius
    graph (and nudged by one for floating-point ties).
    """
    if r0 <= 0:
        raise ValueError(f"r0 must be positive, got {r0}")
    cap = max(cloud.diagonal, r0)

    def radius(k: int) -> float:
        return min(r0 * growth ** k, cap)

    need = max(bottleneck_distance(cloud.positions[cloud.object_id == obj])
               for obj in np.unique(cloud.object_id))
    k = 0 if need <= r0 else int(np.ceil(np.log(need / r0) / np.log(growth)))
    k = max(k, 0)
    ok, graph = _single_component(cloud, radius(k))
    while not ok:
        if radius(k) >= cap:
            raise RuntimeError("cloud is not connected even at the bounds diagonal")
        k += 1
        ok, graph = _single_component(cloud, radius(k))
    # below the bottleneck a smaller radius cannot connect; only ties need a check
    while k > 0 and radius(k - 1) >= need * (1 - 1e-12):
        ok_prev, g_prev = _single_component(cloud, radius(k - 1))
        if not ok_prev:
            break
        k, graph = k - 1, g_prev
    return (radius(k), graph) if return_graph else radius(k)


def subsample_indices(cloud: PointCloud, fraction: float, rng) -> np.ndarray:
    """Sorted indices of a uniform without-replacement draw, >= 1 point per object."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(rng)
    picked = []
    for obj in np.unique(cloud.object_id):
        members = np.flatnonzero(cloud.object_id == obj)
        n = max(1, int(round(fraction * members.size)))
        picked.append(rng.choice(members, size=n, replace=False) if n < members.size else members)
    return np.sort(np.concatenate(picked))


def subsample(cloud: PointCloud, fraction: float, seed) -> PointCloud:
    return cloud.take(subsample_indices(cloud, fraction, seed))


def boundary_features(cloud: PointCloud, r: float) -> np.ndarray:
    """Distances to the lo and hi walls per axis, in units of ``r``, clipped to [-1, 1]."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    to_lo = (cloud.positions - cloud.lo) / r
    to_hi = (cloud.hi - cloud.positions) / r
    return np.clip(np.concatenate([to_lo, to_hi], axis=1), -1.0, 1.0)


@dataclass
class LatentGrid:
    """Uniform grid over the bounds, ``resolution`` nodes per axis, row-major order."""

    bounds: np.ndarray
    resolution: int = 32

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, -1)
        if self.resolution < 2:
            raise ValueError("latent grid needs at least 2 nodes per axis")

    @property
    def dim(self) -> int:
        return self.bounds.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.dim

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)

    @cached_property
    def positions(self) -> np.ndarray:
        axes = [np.linspace(self.bounds[0, k], self.bounds[1, k], self.resolution) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def __len__(self) -> int:
        return self.resolution ** self.dim


def grid_pairs(grid: LatentGrid, points: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All ``(node, point)`` with ``||grid_node - point|| <= r``, sorted by node then point.

    Exact: candidate nodes are the lattice window around each point, so no
    hashing is needed.
    """
    points = np.asarray(points, dtype=np.float64)
    lo, h, n = grid.bounds[0], grid.spacing, grid.resolution
    d = grid.dim
    reach = np.ceil(r / h).astype(np.int64)
    base = np.floor((points - lo) / h).astype(np.int64) - reach
    span = [np.arange(2 * reach[k] + 2) for k in range(d)]
    offs = np.stack([m.reshape(-1) for m in np.meshgrid(*span, indexing="ij")], axis=1)
    cand = base[:, None, :] + offs[None, :, :]
    valid = np.all((cand >= 0) & (cand < n), axis=2)
    pi, oi = np.nonzero(valid)
    idx = cand[pi, oi]
    diff = lo + idx * h - points[pi]
    keep = np.sqrt(np.einsum("ij,ij->i", diff, diff)) <= r
    pi, idx = pi[keep], idx[keep]
    node = np.zeros(len(pi), dtype=np.int64)
    for k in range(d):
        node = node * n + idx[:, k]
    order = np.lexsort((pi, node))
    return node[order], pi[order]

