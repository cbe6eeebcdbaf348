"""Two-stage near-duplicate removal: k-means partitioning, then exact
all-pairs cosine search inside each cluster joined by union-find."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .features import extract_features


class DedupConfigError(ValueError):
    pass


def sq_distances(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances, shape (n, K)."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        diff = X[s : s + chunk, None, :] - C[None, :, :]
        out[s : s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties resolve to the lower centroid index."""
    if len(centroids) < 1:
        raise DedupConfigError("need at least one centroid")
    return np.argmin(sq_distances(features, centroids), axis=1)


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = sq_distances(X, X[centers[:1]])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center; take unused rows in order
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, sq_distances(X, X[nxt : nxt + 1])[:, 0])
    return X[centers].copy()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective: list[float]  # after each assignment step


def kmeans(X: np.ndarray, K: int, iters: int = 20, seed: int = 0) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Empty clusters are reseeded to the point farthest from its centroid.
    The recorded objective is non-increasing; a violation raises.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if K < 1 or K > n:
        raise DedupConfigError(f"K={K} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, K, rng)
    history: list[float] = []
    labels = None
    for _ in range(max(1, iters)):
        D = sq_distances(X, C)
        labels = np.argmin(D, axis=1)
        obj = float(D[np.arange(n), labels].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        counts = np.bincount(labels, minlength=K)
        newC = np.zeros_like(C)
        np.add.at(newC, labels, X)
        nonempty = counts > 0
        newC[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            resid = D[np.arange(n), labels].copy()
            for k in np.flatnonzero(~nonempty):
                far = int(np.argmax(resid))
                newC[k] = X[far]
                resid[far] = -1.0
        if np.array_equal(newC, C):
            break
        C = newC
    D = sq_distances(X, C)
    labels = np.argmin(D, axis=1)
    obj = float(D[np.arange(n), labels].sum())
    if obj > history[-1] * (1 + 1e-12) + 1e-12:
        raise RuntimeError(f"k-means objective increased: {history[-1]} -> {obj}")
    history.append(obj)
    return KMeansResult(C, labels, history)


class UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            self.parent[hi] = lo

    def groups(self) -> list[list[int]]:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return [sorted(g) for g in out.values()]


def similar_pairs(ids: np.ndarray, vectors: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """Index pairs (i < j) with cosine >= theta, or byte-identical vectors."""
    sims = vectors @ vectors.T
    ii, jj = np.nonzero(np.triu(sims >= theta, k=1))
    pairs = set(zip(ii.tolist(), jj.tolist()))
    # exact duplicates must match even when rounding puts their cosine below 1
    seen: dict[bytes, int] = {}
    for i, v in enumerate(vectors):
        key = np.ascontiguousarray(v).tobytes()
        if key in seen:
            pairs.add((seen[key], i))
        else:
            seen[key] = i
    return sorted(pairs)


def intra_cluster_dedup(ids, vectors: np.ndarray, theta: float) -> list[list[int]]:
    """Duplicate groups (size >= 2, sorted ids) among one cluster's members."""
    if not 0 < theta <= 1:
        raise DedupConfigError(f"theta={theta} must lie in (0, 1]")
    ids = np.asarray(ids)
    uf = UnionFind(ids.tolist())
    for i, j in similar_pairs(ids, np.asarray(vectors), theta):
        uf.union(int(ids[i]), int(ids[j]))
    return sorted((g for g in uf.groups() if len(g) > 1), key=lambda g: g[0])


@dataclass
class DedupIndex:
    centroids: np.ndarray
    assignment: dict[int, int]
    groups: list[list[int]]
    removed: set[int] = field(default_factory=set)
    kept_representative: dict[int, int] = field(default_factory=dict)  # group index -> id

    @classmethod
    def from_groups(cls, centroids, assignment, groups) -> "DedupIndex":
        groups = sorted((sorted(g) for g in groups), key=lambda g: g[0])
        reps = {gi: g[0] for gi, g in enumerate(groups)}
        removed = {i for g in groups for i in g[1:]}
        return cls(centroids, assignment, groups, removed, reps)


def dedup_features(ids, vectors: np.ndarray, K: int, theta: float, subset_fraction: float = 1.0, seed: int = 0, iters: int = 20) -> DedupIndex:
    """Two-stage dedup on precomputed unit vectors."""
    ids = np.asarray(ids)
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(ids)
    if n == 0:
        raise DedupConfigError("corpus is empty")
    if not 0 < subset_fraction <= 1:
        raise DedupConfigError("subset_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    m = max(K, int(round(subset_fraction * n)))
    if m > n:
        raise DedupConfigError(f"K={K} exceeds corpus size {n}")
    subset = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    km = kmeans(vectors[subset], K, iters, seed)
    labels = assign(vectors, km.centroids)
    groups: list[list[int]] = []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        if members.size > 1:
            groups += intra_cluster_dedup(ids[members], vectors[members], theta)
    assignment = {int(i): int(c) for i, c in zip(ids, labels)}
    return DedupIndex.from_groups(km.centroids, assignment, groups)


def all_pairs_dedup(ids, vectors: np.ndarray, theta: float) -> DedupIndex:
    """Single-cluster reference: exact search over every pair."""
    ids = np.asarray(ids)
    groups = intra_cluster_dedup(ids, vectors, theta)
    return DedupIndex.from_groups(np.asarray(vectors).mean(axis=0, keepdims=True), {int(i): 0 for i in ids}, groups)


def dedup_report(index: DedupIndex, n: int, K: int) -> dict:
    sizes = Counter(len(g) for g in index.groups)
    occupancy = np.bincount(list(index.assignment.values()), minlength=K)
    return {
        "n_records": n,
        "n_removed": len(index.removed),
        "removal_fraction": len(index.removed) / n if n else 0.0,
        "n_groups": len(index.groups),
        "groups": index.groups,
        "histogram": {str(k): v for k, v in sorted(sizes.items())},
        "cluster_occupancy": {
            "min": int(occupancy.min()),
            "max": int(occupancy.max()),
            "mean": float(occupancy.mean()),
            "empty": int((occupancy == 0).sum()),
        },
    }


def dedup_run(records, K: int = 32, theta: float = 0.95, subset_fraction: float = 1.0, seed: int = 0, extractor="builtin-downsample"):
    """extract -> subsample -> kmeans -> assign -> per-cluster dedup."""
    if not records:
        raise DedupConfigError("corpus is empty")
    ids = np.array([r.id for r in records])
    feats = [extract_features(r, extractor) for r in records]
    vectors = np.stack([f.vector for f in feats])
    index = dedup_features(ids, vectors, K, theta, subset_fraction, seed)
    report = dedup_report(index, len(records), K)
    report["degenerate_ids"] = [int(i) for i, f in zip(ids, feats) if f.degenerate]
    return index, report


def pair_recall(found: DedupIndex, reference_pairs) -> float:
    """Fraction of reference pairs that ended up in one duplicate group."""
    group_of = {i: gi for gi, g in enumerate(found.groups) for i in g}
    pairs = list(reference_pairs)
    if not pairs:
        return 1.0
    hit = sum(1 for a, b in pairs if a in group_of and group_of.get(a) == group_of.get(b))
    return hit / len(pairs)
