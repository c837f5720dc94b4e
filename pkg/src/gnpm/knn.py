"""Exact neighbourhood kernels on point/feature sets.

All distances are squared Euclidean, computed element by element in float64
so that every (query, target) pair gets the same bits no matter how the work
is blocked. The fast paths use a Gram-matrix estimate only to shortlist
candidates; the returned distances are always the exact elementwise ones and
ordering is by ``(dist2, index)``.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import branches

# relative slack on the Gram estimate used to shortlist candidates
_GRAM_SLACK = 64 * np.finfo(np.float64).eps


@dataclass
class NeighborGraph:
    k: int
    idx: np.ndarray  # [N, k] int64
    dist2: np.ndarray  # [N, k] float64, ascending per row

    def __len__(self) -> int:
        return self.idx.shape[0]


def _as_points(points, name="points") -> np.ndarray:
    pts = np.asarray(points)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise ValueError(f"{name}: expected [N, D] array, got shape {pts.shape}")
    return np.ascontiguousarray(pts, dtype=np.float64)


def _exact_dist2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``sum_d (a[..., d] - b[..., d])**2`` in an order fixed per pair.

    Low dimensions accumulate column by column; wider features reduce each
    contiguous difference row, which numpy does identically for every row.
    """
    if a.shape[-1] > 8:
        diff = np.ascontiguousarray(a - b)
        diff *= diff
        return diff.sum(axis=-1)
    diff = a[..., 0] - b[..., 0]
    out = diff * diff
    for d in range(1, a.shape[-1]):
        diff = a[..., d] - b[..., d]
        out += diff * diff
    return out


def _check_k(k: int, n: int, exclude_self: bool) -> None:
    limit = n - 1 if exclude_self else n
    if k < 1 or k > limit:
        raise ValueError(f"k={k} invalid for {n} points (need 1 <= k <= {limit})")


def _select_exact(cand: np.ndarray, exact: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cand, exact), axis=-1)[:, :k]
    return np.take_along_axis(cand, order, 1), np.take_along_axis(exact, order, 1)


def _topk_block(
    q: np.ndarray,
    t: np.ndarray,
    t_sq: np.ndarray,
    k: int,
    row_offset: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k of rows ``q`` against all of ``t``.

    ``row_offset`` gives the global index of ``q[0]`` inside ``t`` when self
    matches must be excluded; ``None`` keeps them.
    """
    b, n = q.shape[0], t.shape[0]
    q_sq = np.einsum("ij,ij->i", q, q)
    approx = q_sq[:, None] + t_sq[None, :] - 2.0 * (q @ t.T)
    rows = np.arange(b)
    if row_offset is not None:
        approx[rows, rows + row_offset] = np.inf
    slack = _GRAM_SLACK * (q.shape[1] + 2) * (q_sq + t_sq.max())
    limit = n - 1 if row_offset is not None else n
    c = min(k + 4, limit)
    cand = np.argpartition(approx, c - 1, axis=1)[:, :c] if c < n else np.broadcast_to(np.arange(n), (b, n)).copy()
    vals = np.take_along_axis(approx, cand, 1)
    if c < limit:
        # every row whose shortlist might miss a true top-k member takes the slow path
        kth = np.partition(vals, k - 1, axis=1)[:, k - 1]
        unsure = np.flatnonzero(vals.max(axis=1) <= kth + 2.0 * slack)
    else:
        unsure = np.empty(0, dtype=np.int64)
    exact = _exact_dist2(q[:, None, :], t[cand])
    if row_offset is not None:
        exact[cand == (rows + row_offset)[:, None]] = np.inf
    idx, dist = _select_exact(cand, exact, k)
    for r in unsure:
        full = _exact_dist2(q[r][None, :], t)
        if row_offset is not None:
            full[r + row_offset] = np.inf
        order = np.lexsort((np.arange(n), full))[:k]
        idx[r], dist[r] = order, full[order]
    return idx, dist


def knn_brute(points, k: int, exclude_self: bool = True) -> NeighborGraph:
    """Materialise the full N x N distance matrix and sort every row.

    This is the reference (and the naive baseline of the benchmark).
    """
    pts = _as_points(points)
    n = pts.shape[0]
    _check_k(k, n, exclude_self)
    d = _exact_dist2(pts[:, None, :], pts[None, :, :])
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    cols = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((cols, d), axis=-1)[:, :k]
    return NeighborGraph(k, order.astype(np.int64), np.take_along_axis(d, order, 1))


def knn_blocked(points, k: int, block: int | None = None, exclude_self: bool = True) -> NeighborGraph:
    """Row-blocked exact k-NN; auxiliary memory O(block * N)."""
    pts = _as_points(points)
    n = pts.shape[0]
    _check_k(k, n, exclude_self)
    block = n if block is None else int(block)
    if not 1 <= block <= n:
        raise ValueError(f"block={block} must be in [1, {n}]")
    t_sq = np.einsum("ij,ij->i", pts, pts)
    idx = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        i, d = _topk_block(pts[start:stop], pts, t_sq, k, start if exclude_self else None)
        idx[start:stop] = i
        dist2[start:stop] = d
    branches.note("knn", idx)
    return NeighborGraph(k, idx, dist2)


def nn_query(queries, targets, block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Nearest target for every query (distinct sets, self allowed)."""
    q = _as_points(queries, "queries")
    t = _as_points(targets, "targets")
    if t.shape[0] == 0:
        raise ValueError("nn_query: empty target set")
    if q.shape[1] != t.shape[1]:
        raise ValueError(f"nn_query: dimension mismatch {q.shape} vs {t.shape}")
    m = q.shape[0]
    idx = np.empty(m, dtype=np.int64)
    dist2 = np.empty(m, dtype=np.float64)
    t_sq = np.einsum("ij,ij->i", t, t)
    for start in range(0, m, block):
        stop = min(start + block, m)
        i, d = _topk_block(q[start:stop], t, t_sq, 1, None)
        idx[start:stop] = i[:, 0]
        dist2[start:stop] = d[:, 0]
    branches.note("nn", idx)
    return idx, dist2


def nn_symmetric(queries, targets) -> tuple[np.ndarray, np.ndarray]:
    """Forward nearest match plus a reverse-distance score.

    For each query ``x`` the match ``x'`` is its nearest target; the score adds
    the distance from ``x'`` back to the nearest query point. Returns
    ``(idx of x', score)``.
    """
    fwd_idx, fwd_d = nn_query(queries, targets)
    _, rev_d = nn_query(targets, queries)
    return fwd_idx, fwd_d + rev_d[fwd_idx]


# -- benchmark ----------------------------------------------------------------

BENCH_COLUMNS = ["method", "N", "D", "k", "block", "wall_ms", "peak_aux_bytes"]


def _measure(fn, *args, repeats: int = 1, **kwargs) -> tuple[float, int]:
    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    fn(*args, **kwargs)
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3, int(peak)


def bench_knn(n: int = 4096, d: int = 3, k: int = 10, block: int = 256, seed: int = 0, repeats: int = 3) -> list[dict]:
    """Time and peak auxiliary memory of the naive and blocked kernels."""
    pts = np.random.default_rng(seed).standard_normal((n, d))
    rows = []
    for method, fn, kw in (
        ("naive", knn_brute, {}),
        ("blocked", knn_blocked, {"block": block}),
    ):
        wall, peak = _measure(fn, pts, k, repeats=repeats, **kw)
        rows.append(
            {"method": method, "N": n, "D": d, "k": k, "block": kw.get("block", n), "wall_ms": round(wall, 3), "peak_aux_bytes": peak}
        )
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
