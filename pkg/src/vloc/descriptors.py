"""Descriptor matching: exact search, ratio-test matching and a randomized kd-forest.

Descriptors are rows of a float32 matrix, non-negative and unit-L2-normalised.
Match distances are squared L2.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ModelFormatError, TruncatedFileError, VersionMismatchError

DESCRIPTOR_DIM = 128
INDEX_MAGIC = b"VLANN1\x00"
INDEX_VERSION = 1


class MatchPair(NamedTuple):
    query_index: int
    target_index: int
    distance: float
    ratio: float


def normalize_descriptors(values) -> np.ndarray:
    """Clamp negatives to zero and L2-normalise each row (float32)."""
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    if v.ndim == 1:
        v = v[None, :]
    n = np.linalg.norm(v, axis=1, keepdims=True)
    out = np.divide(v, n, out=np.zeros_like(v), where=n > 0)
    return out.astype(np.float32)


def sq_distances(query: np.ndarray, database: np.ndarray) -> np.ndarray:
    """Squared L2 distance from one query to every row of ``database``.

    Shared by the exact and approximate search so that both produce
    bit-identical distances.
    """
    d = database - query
    return np.einsum("ij,ij->i", d, d)


def _topk(dist: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    k = min(k, len(dist))
    if len(dist) > 4 * k:
        part = np.argpartition(dist, k - 1)[:k]
        kth = dist[part].max()
        part = np.flatnonzero(dist <= kth)
        dist, ids = dist[part], ids[part]
    order = np.lexsort((ids, dist))[:k]
    return ids[order], dist[order]


def brute_force_knn(query, database, k: int = 1) -> list[MatchPair]:
    """Exact k nearest neighbours, ascending by (distance, index)."""
    database = np.asarray(database, dtype=np.float32)
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if len(database) == 0:
        raise ValueError("database is empty")
    k = max(1, int(k))
    dist = sq_distances(q, database)
    ids, d = _topk(dist, np.arange(len(database)), k)
    return [MatchPair(0, int(i), float(x), 0.0) for i, x in zip(ids, d)]


def _pairwise_sq(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", A, A)[:, None]
    bb = np.einsum("ij,ij->i", B, B)[None, :]
    return np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)


def ratio_match_arrays(A, B, ratio_threshold: float = 0.7):
    """Array form of :func:`ratio_test_match`.

    Returns ``(query_idx, target_idx, sq_distance, ratio)`` arrays sorted by
    ascending distance. The ratio is taken between plain L2 distances of the
    best and second-best neighbour.
    """
    A = np.asarray(A, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    if len(A) == 0 or len(B) == 0:
        e = np.zeros(0)
        return e.astype(np.int64), e.astype(np.int64), e, e
    D = _pairwise_sq(A.astype(np.float64), B.astype(np.float64))
    qi = np.arange(len(A))
    if len(B) == 1:
        best = np.zeros(len(A), dtype=np.int64)
        d1 = D[:, 0]
        ratio = np.zeros(len(A))
        keep = np.ones(len(A), bool)
    else:
        two = np.argpartition(D, 1, axis=1)[:, :2]
        dd = D[qi[:, None], two]
        swap = (dd[:, 1] < dd[:, 0]) | ((dd[:, 1] == dd[:, 0]) & (two[:, 1] < two[:, 0]))
        best = np.where(swap, two[:, 1], two[:, 0])
        d1 = np.where(swap, dd[:, 1], dd[:, 0])
        d2 = np.where(swap, dd[:, 0], dd[:, 1])
        ratio = np.sqrt(np.divide(d1, d2, out=np.zeros_like(d1), where=d2 > 0))
        ratio[(d2 == 0)] = 1.0
        keep = ratio < ratio_threshold
    qi, best, ratio = qi[keep], best[keep], ratio[keep]
    # reported distance computed directly so it agrees with brute_force_knn
    diff = A[qi] - B[best]
    d1 = np.einsum("ij,ij->i", diff, diff).astype(np.float64)
    order = np.lexsort((best, qi, d1))
    return qi[order], best[order].astype(np.int64), d1[order], ratio[order]


def ratio_test_match(set_a, set_b, ratio_threshold: float = 0.7) -> list[MatchPair]:
    """Best B-neighbour of every A-descriptor, kept when best/second-best < threshold."""
    if not 0 < ratio_threshold < 1:
        raise ValueError("ratio_threshold must be in (0, 1)")
    qi, ti, d, r = ratio_match_arrays(set_a, set_b, ratio_threshold)
    return [MatchPair(int(a), int(b), float(x), float(y)) for a, b, x, y in zip(qi, ti, d, r)]


# ---------------------------------------------------------------------------
# randomized kd-forest


@dataclass
class _Tree:
    split_dim: np.ndarray   # int32, -1 for leaves
    split_val: np.ndarray   # float32
    left: np.ndarray        # int32 child index, or leaf start into order
    right: np.ndarray       # int32 child index, or leaf end into order
    order: np.ndarray       # int32 row permutation; leaves are contiguous slices

    def __post_init__(self):
        # python lists make the per-node search loop several times faster
        self._dims = self.split_dim.tolist()
        self._vals = self.split_val.tolist()
        self._left = self.left.tolist()
        self._right = self.right.tolist()

    @property
    def leaf_count(self) -> int:
        return int(np.count_nonzero(self.split_dim < 0))


class AnnIndex:
    """Forest of randomized kd-trees over the rows of ``data``.

    The index holds a reference to ``data`` and an id table; it never copies
    descriptors.
    """

    def __init__(self, data: np.ndarray, ids: np.ndarray, trees: list[_Tree], tree_count: int,
                 leaf_size: int, checks: int, seed: int):
        self.data = data
        self.ids = ids
        self.trees = trees
        self.tree_count = tree_count
        self.leaf_size = leaf_size
        self.checks = checks
        self.seed = seed

    def __len__(self):
        return len(self.ids)

    @property
    def leaf_count(self) -> int:
        return sum(t.leaf_count for t in self.trees)

    def query(self, query, k: int = 1, checks: int | None = None) -> list[MatchPair]:
        return ann_knn(self, query, k, self.checks if checks is None else checks)

    def to_bytes(self) -> bytes:
        return serialize_index(self)


_TOP_DIMS = 5
_SAMPLE = 100


def build_index(database, tree_count: int = 4, leaf_size: int = 16, checks: int = 64,
                seed: int = 0, ids=None) -> AnnIndex:
    data = np.asarray(database, dtype=np.float32)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("database must be a non-empty 2-D array")
    ids = np.arange(len(data), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != len(data):
        raise ValueError("ids must match database rows")
    rng = np.random.default_rng(seed)
    trees = [_build_tree(data, int(leaf_size), rng) for _ in range(int(tree_count))]
    return AnnIndex(data, ids, trees, int(tree_count), int(leaf_size), int(checks), int(seed))


def _build_tree(data: np.ndarray, leaf_size: int, rng: np.random.Generator) -> _Tree:
    n = len(data)
    order = np.arange(n, dtype=np.int32)
    dims, vals, left, right = [], [], [], []

    def new_node():
        dims.append(-1)
        vals.append(0.0)
        left.append(0)
        right.append(0)
        return len(dims) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        if hi - lo <= leaf_size:
            left[node], right[node] = lo, hi
            continue
        sample = idx if len(idx) <= _SAMPLE else rng.choice(idx, _SAMPLE, replace=False)
        sub = data[sample].astype(np.float64)
        var = sub.var(axis=0)
        top = np.argsort(-var, kind="stable")[:_TOP_DIMS]
        dim = int(top[rng.integers(len(top))])
        val = np.float32(sub[:, dim].mean())
        col = data[idx, dim]
        mask = col < val
        nl = int(mask.sum())
        if nl == 0 or nl == len(idx):
            # mean of the sample does not separate this node: split by rank
            dim = int(np.argmax(np.ptp(data[idx], axis=0)))
            col = data[idx, dim]
            if col.min() == col.max():
                left[node], right[node] = lo, hi
                continue
            srt = np.argsort(col, kind="stable")
            nl = len(idx) // 2
            val = col[srt[nl]]
            mask = np.zeros(len(idx), bool)
            mask[srt[:nl]] = True
        order[lo:hi] = np.concatenate([idx[mask], idx[~mask]])
        dims[node], vals[node] = dim, float(val)
        ln, rn = new_node(), new_node()
        left[node], right[node] = ln, rn
        stack.append((rn, lo + nl, hi))
        stack.append((ln, lo, lo + nl))
    return _Tree(np.array(dims, np.int32), np.array(vals, np.float32),
                 np.array(left, np.int32), np.array(right, np.int32), order)


def _candidates(index: AnnIndex, q: list[float], checks: int) -> np.ndarray:
    """Rows reached by a best-bin-first walk over all trees, ``checks`` leaves at most."""
    heap: list = []
    found: list[np.ndarray] = []
    visited = 0
    checks = max(1, checks)
    push = heapq.heappush

    def descend(tree_i: int, node: int, bound: float) -> None:
        nonlocal visited
        tr = index.trees[tree_i]
        dims, vals, lf, rt = tr._dims, tr._vals, tr._left, tr._right
        d = dims[node]
        while d >= 0:
            diff = q[d] - vals[node]
            if diff < 0:
                near, far = lf[node], rt[node]
            else:
                near, far = rt[node], lf[node]
            push(heap, (bound + diff * diff, tree_i, far))
            node = near
            d = dims[node]
        found.append(tr.order[lf[node]:rt[node]])
        visited += 1

    for ti in range(len(index.trees)):
        if visited >= checks:
            break
        descend(ti, 0, 0.0)
    while heap and visited < checks:
        bound, ti, node = heapq.heappop(heap)
        descend(ti, node, bound)
    if len(found) == 1:
        return found[0]
    return np.unique(np.concatenate(found))


def ann_knn(index: AnnIndex, query, k: int = 1, checks: int = 64) -> list[MatchPair]:
    """Approximate k nearest neighbours; ``target_index`` is the row's id."""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    rows = _candidates(index, q.tolist(), int(checks))
    dist = sq_distances(q, index.data[rows])
    r, d = _topk(dist, rows.astype(np.int64), max(1, int(k)))
    ids = index.ids[r]
    return [MatchPair(0, int(i), float(x), 0.0) for i, x in zip(ids, d)]


def ann_knn_rows(index: AnnIndex, query, k: int, checks: int) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`ann_knn` but returns ``(rows, sq_distances)`` arrays."""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    rows = _candidates(index, q.tolist(), int(checks))
    dist = sq_distances(q, index.data[rows])
    return _topk(dist, rows.astype(np.int64), max(1, int(k)))


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<HIIIIqI")


def serialize_index(index: AnnIndex) -> bytes:
    parts = [INDEX_MAGIC, _HEADER.pack(INDEX_VERSION, index.tree_count, index.leaf_size, index.checks,
                                       index.data.shape[1], index.seed, len(index.ids)),
             index.ids.astype("<i8").tobytes()]
    for tr in index.trees:
        parts.append(struct.pack("<I", len(tr.split_dim)))
        parts += [tr.split_dim.astype("<i4").tobytes(), tr.split_val.astype("<f4").tobytes(),
                  tr.left.astype("<i4").tobytes(), tr.right.astype("<i4").tobytes(),
                  tr.order.astype("<i4").tobytes()]
    return b"".join(parts)


def deserialize_index(blob: bytes, data: np.ndarray) -> AnnIndex:
    """Rebuild an index from :func:`serialize_index` output and the descriptor matrix it covers."""
    mv = memoryview(blob)
    if bytes(mv[:len(INDEX_MAGIC)]) != INDEX_MAGIC:
        raise VersionMismatchError("bad index magic")
    off = len(INDEX_MAGIC)
    if len(mv) < off + _HEADER.size:
        raise TruncatedFileError("index header truncated")
    version, tree_count, leaf_size, checks, dim, seed, n = _HEADER.unpack_from(mv, off)
    if version != INDEX_VERSION:
        raise VersionMismatchError(f"index version {version} unsupported")
    off += _HEADER.size

    def take(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(mv):
            raise TruncatedFileError("index payload truncated")
        arr = np.frombuffer(mv, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return arr

    ids = take("<i8", n).astype(np.int64)
    trees = []
    for _ in range(tree_count):
        (m,) = struct.unpack_from("<I", mv, off) if off + 4 <= len(mv) else (None,)
        if m is None:
            raise TruncatedFileError("index tree header truncated")
        off += 4
        trees.append(_Tree(take("<i4", m).astype(np.int32), take("<f4", m).astype(np.float32),
                           take("<i4", m).astype(np.int32), take("<i4", m).astype(np.int32),
                           take("<i4", n).astype(np.int32)))
    if off != len(mv):
        raise ModelFormatError("trailing bytes after index")
    data = np.asarray(data, dtype=np.float32)
    if data.shape != (n, dim):
        raise ModelFormatError(f"descriptor matrix {data.shape} does not match index ({n}, {dim})")
    return AnnIndex(data, ids, trees, tree_count, leaf_size, checks, seed)


# ---------------------------------------------------------------------------
# synthetic descriptors


def random_descriptors(n: int, rng: np.random.Generator, dim: int = DESCRIPTOR_DIM,
                       sparsity: float = 0.5) -> np.ndarray:
    """SIFT-like random descriptors: half-normal components, a fraction zeroed, unit norm."""
    v = np.abs(rng.normal(size=(n, dim)))
    v[rng.random((n, dim)) < sparsity] = 0.0
    empty = ~v.any(axis=1)
    v[empty, 0] = 1.0
    return normalize_descriptors(v)


def perturb_descriptors(desc: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add per-component Gaussian noise of std ``sigma`` and re-normalise."""
    desc = np.asarray(desc, dtype=np.float32)
    if sigma <= 0:
        return desc.copy()
    return normalize_descriptors(desc + rng.normal(0.0, sigma, desc.shape))
