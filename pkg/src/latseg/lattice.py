"""Sparse permutohedral lattice construction.

The permutohedral lattice tiles the sum-zero hyperplane of R^(d+1) with
congruent simplices. Lattice points are integer vectors whose coordinates sum
to zero and are all congruent modulo d+1; the shared residue (the "remainder"
class, 0..d) colors the vertices so that every simplex has exactly one vertex
of each color.

A d-dimensional feature vector is first *elevated* into the hyperplane by a
linear map (scaled per dimension, then rotated by the standard recurrence).
*locate* finds the enclosing simplex of an elevated point by greedy rounding
to the nearest remainder-0 point, repairing the hyperplane constraint on the
coordinates with the largest rounding error, and ranking the residual
differentials; the same differentials give the barycentric weights of the
point with respect to the d+1 simplex vertices.

build_lattice runs this for a whole cloud, deduplicates the touched vertices
into dense indices 0..V-1 (first-touch order, points scanned in ascending
index, vertices in remainder order), stores the per-point embeddings, and
resolves the one-ring adjacency of every vertex through an open-addressing
hash table keyed on the first d coordinates (the last is implied by the
sum-zero constraint).

Everything here is deterministic: identical inputs produce identical dense
indices, embeddings and adjacency, bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidInput, UnsupportedError

# Dense-index sentinel for "no vertex here" (absent one-ring neighbor,
# out-point simplex corner that no input point touched).
MISSING = -1

# Elevated coordinates beyond this cannot be rounded to int64 lattice keys
# without risking overflow in the repair step.
_MAX_COORD = 2.0**52

_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class LatticeConfig:
    """Lattice dimensionality and per-dimension positive scale.

    scale may be given as a scalar (isotropic) or a length-dim vector. Larger
    scale means smaller lattice cells, i.e. a finer lattice.
    """

    dim: int
    scale: np.ndarray

    def __post_init__(self):
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise InvalidInput(f"lattice dim must be a positive int, got {self.dim!r}")
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.ndim == 0:
            scale = np.full(self.dim, float(scale))
        if scale.shape != (self.dim,):
            raise InvalidInput(
                f"scale must be scalar or length-{self.dim}, got shape {scale.shape}"
            )
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise InvalidInput("scale entries must be finite and > 0")
        scale = scale.copy()
        scale.setflags(write=False)
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "scale", scale)

    def scaled_by(self, factor: float) -> "LatticeConfig":
        return LatticeConfig(self.dim, self.scale * factor)


@dataclass(frozen=True)
class SimplexEmbedding:
    """One point's enclosing simplex: vertex keys plus barycentric weights.

    vertex_keys has shape (d+1, d+1); row r is the remainder-r vertex.
    bary has shape (d+1,), row-aligned with vertex_keys, sums to 1, and is
    non-negative up to roundoff.
    """

    vertex_keys: np.ndarray
    bary: np.ndarray


def key_remainder(key: np.ndarray) -> int:
    """Remainder class of a lattice key (all coordinates share it)."""
    d1 = len(key)
    return int(key[0] % d1)


def _canonical_scale(config: LatticeConfig) -> np.ndarray:
    # Per-dimension elevation factor (d+1)/sqrt((i+1)(i+2)), folded together
    # with the user scale so elevation is a single multiply + recurrence.
    i = np.arange(config.dim, dtype=np.float64)
    return config.scale * (config.dim + 1) / np.sqrt((i + 1.0) * (i + 2.0))


def elevate_many(features: np.ndarray, config: LatticeConfig) -> np.ndarray:
    """Elevate (n, d) feature rows into the sum-zero hyperplane, (n, d+1)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != config.dim:
        raise InvalidInput(
            f"expected features of shape (n, {config.dim}), got {feats.shape}"
        )
    if not np.all(np.isfinite(feats)):
        raise InvalidInput("features must be finite")
    cf = feats * _canonical_scale(config)
    n, d = feats.shape
    out = np.empty((n, d + 1), dtype=np.float64)
    running = np.zeros(n, dtype=np.float64)
    for i in range(d, 0, -1):
        out[:, i] = running - i * cf[:, i - 1]
        running = running + cf[:, i - 1]
    out[:, 0] = running
    return out


def elevate(feature: np.ndarray, config: LatticeConfig) -> np.ndarray:
    """Elevate one feature vector; returns a (d+1,) sum-zero vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise InvalidInput(f"expected a 1-d feature vector, got shape {feature.shape}")
    return elevate_many(feature[None, :], config)[0]


def _canonical_simplex(d: int) -> np.ndarray:
    # canon[r, j]: coordinate delta from the remainder-0 corner to the
    # remainder-r corner, indexed by differential rank j.
    d1 = d + 1
    canon = np.empty((d1, d1), dtype=np.int64)
    for r in range(d1):
        canon[r, : d1 - r] = r
        canon[r, d1 - r :] = r - d1
    return canon


def _locate_many(elevated: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Simplex vertices and barycentric weights for (n, d+1) elevated points.

    Returns (keys, bary): keys is (n, d+1, d+1) int64 with keys[i, r] the
    remainder-r vertex of point i's simplex; bary is (n, d+1) row-aligned.
    """
    n, d1 = elevated.shape
    d = d1 - 1
    if np.max(np.abs(elevated), initial=0.0) > _MAX_COORD:
        raise InvalidInput("elevated coordinates too large for integer lattice keys")

    # Greedy per-coordinate rounding to the nearest multiple of d+1. Ties go
    # down, which still yields an enclosing simplex.
    v = elevated / d1
    down = np.floor(v) * d1
    up = down + d1
    rem0 = np.where((up - elevated) < (elevated - down), up, down).astype(np.int64)

    # Rank coordinates by descending differential; ties broken by lower index.
    diff = elevated - rem0
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty((n, d1), dtype=np.int64)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(d1), (n, d1)), axis=1)

    # Rounding may have left the hyperplane; shift the worst-ranked
    # coordinates by d+1 to repair the sum while keeping ranks a permutation.
    excess = rem0.sum(axis=1) // d1
    rank += excess[:, None]
    low = rank < 0
    high = rank > d
    rank += d1 * low - d1 * high
    rem0 += d1 * (low.astype(np.int64) - high.astype(np.int64))

    # Barycentric weights from the repaired differentials.
    frac = (elevated - rem0) / d1
    b = np.zeros((n, d1 + 1), dtype=np.float64)
    idx = d - rank  # permutation of 0..d per row
    np.put_along_axis(b[:, :d1], idx, frac, axis=1)
    sub = np.zeros_like(b)
    np.put_along_axis(sub[:, 1:], idx, frac, axis=1)
    b -= sub
    b[:, 0] += 1.0 + b[:, d1]
    bary = np.ascontiguousarray(b[:, :d1])

    canon = _canonical_simplex(d)
    keys = rem0[:, None, :] + np.transpose(canon[:, rank], (1, 0, 2))
    return keys, bary


def locate(elevated: np.ndarray) -> SimplexEmbedding:
    """Enclosing simplex of one elevated point (assumed on the hyperplane)."""
    p = np.asarray(elevated, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise InvalidInput(f"expected an elevated point of shape (d+1,), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInput("elevated point must be finite")
    keys, bary = _locate_many(p[None, :])
    return SimplexEmbedding(vertex_keys=keys[0], bary=bary[0])


@dataclass(frozen=True)
class NeighborOffsets:
    """One-ring key offsets for a lattice of the given dimensionality.

    offsets is (K, d+1) int64 with K = 2^(d+1) - 1. Row 0 is the zero offset;
    the rest are grouped by remainder class r = 1..d and, within a class,
    ordered by the bitmask of the positions carrying the value r-(d+1)
    (coordinate 0 is the most significant bit).
    """

    dim: int
    extent: int
    offsets: np.ndarray


def neighbor_offsets(dim: int, extent: int = 1) -> NeighborOffsets:
    """Enumerate the one-ring offsets for dimension `dim`.

    Only extent 1 (the immediate one-ring) is supported.
    """
    if dim < 1:
        raise InvalidInput(f"dim must be >= 1, got {dim}")
    if extent != 1:
        raise UnsupportedError(f"only extent=1 neighborhoods are supported, got {extent}")
    d1 = dim + 1
    rows = [np.zeros(d1, dtype=np.int64)]
    for r in range(1, d1):
        combos = sorted(
            itertools.combinations(range(d1), r),
            key=lambda s: sum(1 << (dim - i) for i in s),
        )
        for s in combos:
            row = np.full(d1, r, dtype=np.int64)
            row[list(s)] = r - d1
            rows.append(row)
    offsets = np.stack(rows)
    offsets.setflags(write=False)
    return NeighborOffsets(dim=dim, extent=1, offsets=offsets)


def _hash_rows(material: np.ndarray) -> np.ndarray:
    """64-bit multiplicative hash of int64 key material rows."""
    with np.errstate(over="ignore"):
        h = np.zeros(material.shape[0], dtype=np.uint64)
        for j in range(material.shape[1]):
            h = (h ^ material[:, j].astype(np.uint64)) * _HASH_MULT
            h ^= h >> np.uint64(31)
    return h


class _VertexTable:
    """Open-addressing (linear probing) map from key material to dense index.

    Capacity is 2 * point_budget * (d+1) rounded up to a power of two, which
    bounds the load factor at 1/2. The table is append-only: rows are
    inserted once at construction and never removed. Slots store dense
    indices; key material itself lives in the caller's vertex_keys array.
    """

    def __init__(self, material: np.ndarray, point_budget: int):
        count, _ = material.shape
        cap = 16
        while cap < 2 * point_budget * (material.shape[1] + 1):
            cap <<= 1
        while cap < 2 * count:  # safety under odd call patterns
            cap <<= 1
        self._material = material
        self._mask = np.int64(cap - 1)
        self._shift = np.uint64(64 - (cap.bit_length() - 1))
        self._slots = np.full(cap, MISSING, dtype=np.int64)
        self._insert(material)

    def _home(self, material: np.ndarray) -> np.ndarray:
        return (_hash_rows(material) >> self._shift).astype(np.int64)

    def _insert(self, material: np.ndarray) -> None:
        count = material.shape[0]
        cur = self._home(material)
        alive = np.arange(count, dtype=np.int64)
        while alive.size:
            s = cur[alive]
            free = self._slots[s] == MISSING
            cand = alive[free]
            if cand.size:
                # Among contenders for one free slot, the lowest dense index
                # wins this round; losers probe forward next round.
                uniq, first = np.unique(s[free], return_index=True)
                self._slots[uniq] = cand[first]
            placed = self._slots[cur[alive]] == alive
            alive = alive[~placed]
            cur[alive] = (cur[alive] + 1) & self._mask

    def lookup(self, material: np.ndarray) -> np.ndarray:
        """Dense indices for key-material rows; MISSING where unoccupied."""
        q = material.shape[0]
        out = np.full(q, MISSING, dtype=np.int64)
        cur = self._home(material)
        alive = np.arange(q, dtype=np.int64)
        while alive.size:
            stored = self._slots[cur[alive]]
            empty = stored == MISSING
            hit = np.zeros(alive.size, dtype=bool)
            occupied = ~empty
            if occupied.any():
                rows = self._material[stored[occupied]]
                hit[occupied] = (rows == material[alive[occupied]]).all(axis=1)
            out[alive[hit]] = stored[hit]
            alive = alive[~(hit | empty)]
            cur[alive] = (cur[alive] + 1) & self._mask
        return out


class SparseLattice:
    """A lattice restricted to the vertices touched by one point cloud.

    Attributes (all read-only):
      config           the LatticeConfig used to build it
      num_points       n, rows of the source cloud
      num_vertices     V, distinct touched vertices
      point_vertices   (n, d+1) int64 dense vertex index per point, column r
                       holding the remainder-r corner of the point's simplex
      point_bary       (n, d+1) float64 barycentric weights, column-aligned
      vertex_keys      (V, d+1) int64 lattice key of each dense index
      adjacency        (V, K) int64 dense index of each one-ring neighbor,
                       MISSING where unoccupied; column 0 is the identity
      offsets          the NeighborOffsets the adjacency columns follow
    """

    def __init__(self, config, point_vertices, point_bary, vertex_keys, table, offsets):
        self.config = config
        self.num_points = point_vertices.shape[0]
        self.num_vertices = vertex_keys.shape[0]
        self.point_vertices = point_vertices
        self.point_bary = point_bary
        self.vertex_keys = vertex_keys
        self.offsets = offsets
        self._table = table

        d = config.dim
        k = offsets.offsets.shape[0]
        adjacency = np.empty((self.num_vertices, k), dtype=np.int64)
        material = vertex_keys[:, :d]
        for col, off in enumerate(offsets.offsets):
            adjacency[:, col] = table.lookup(material + off[:d])
        self.adjacency = adjacency

        for arr in (self.point_vertices, self.point_bary, self.vertex_keys, self.adjacency):
            arr.setflags(write=False)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Dense indices of full lattice keys ((q, d+1) or (d+1,))."""
        keys = np.asarray(keys, dtype=np.int64)
        single = keys.ndim == 1
        if single:
            keys = keys[None, :]
        if keys.shape[1] != self.config.dim + 1:
            raise InvalidInput(
                f"expected keys of width {self.config.dim + 1}, got {keys.shape[1]}"
            )
        res = self._table.lookup(keys[:, : self.config.dim])
        return res[0] if single else res

    def embed(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Embed another cloud against this lattice's vertex set.

        Returns (indices, bary) of shapes (m, d+1): dense vertex indices
        (MISSING where the simplex corner is unoccupied) and barycentric
        weights. Feeding back the source cloud reproduces point_vertices /
        point_bary exactly.
        """
        elev = elevate_many(features, self.config)
        keys, bary = _locate_many(elev)
        m, d1, _ = keys.shape
        flat = keys.reshape(m * d1, d1)[:, : self.config.dim]
        idx = self._table.lookup(flat).reshape(m, d1)
        return idx, bary

    # Occupancy diagnostics used by the stats CLI.
    def occupancy_ratio(self) -> float:
        return self.num_vertices / (self.num_points * (self.config.dim + 1))

    def adjacency_fill(self) -> float:
        return float(np.mean(self.adjacency != MISSING))


def build_lattice(features: np.ndarray, config: LatticeConfig) -> SparseLattice:
    """Build the sparse lattice touched by a cloud of (n, d) feature rows."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise InvalidInput(f"expected a 2-d feature array, got shape {feats.shape}")
    if feats.shape[0] == 0:
        raise EmptyInput("cannot build a lattice from an empty cloud")

    elev = elevate_many(feats, config)
    keys, bary = _locate_many(elev)
    n, d1, _ = keys.shape
    d = config.dim

    # Deduplicate touched vertices. Dense indices follow first-touch order
    # with points scanned ascending and simplex corners in remainder order,
    # independent of how the rows get grouped below.
    flat_keys = keys.reshape(n * d1, d1)
    material = flat_keys[:, :d]
    total = material.shape[0]
    order = np.lexsort(material.T[::-1])
    sorted_mat = material[order]
    new_group = np.empty(total, dtype=bool)
    new_group[0] = True
    new_group[1:] = (sorted_mat[1:] != sorted_mat[:-1]).any(axis=1)
    group_sorted = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    first_flat = np.minimum.reduceat(order, starts)
    num_vertices = starts.size

    dense_of_group = np.empty(num_vertices, dtype=np.int64)
    dense_of_group[np.argsort(first_flat, kind="stable")] = np.arange(num_vertices)
    flat_dense = np.empty(total, dtype=np.int64)
    flat_dense[order] = dense_of_group[group_sorted]

    vertex_keys = np.empty((num_vertices, d1), dtype=np.int64)
    vertex_keys[flat_dense] = flat_keys

    table = _VertexTable(vertex_keys[:, :d], point_budget=n)
    return SparseLattice(
        config=config,
        point_vertices=flat_dense.reshape(n, d1),
        point_bary=bary,
        vertex_keys=vertex_keys,
        table=table,
        offsets=neighbor_offsets(d, 1),
    )
