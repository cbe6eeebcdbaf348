"""Two-stage dedup vs brute force on planted-duplicate corpora."""

import argparse
import itertools
import json
import time

from moeflow.datapipe import all_pairs_dedup, dedup_features, pair_recall
from moeflow.experiments import planted_corpus

ap = argparse.ArgumentParser()
ap.add_argument("--groups", type=int, default=500)
ap.add_argument("--per-group", type=int, default=3)
ap.add_argument("--singles", type=int, default=500)
ap.add_argument("--dim", type=int, default=64)
ap.add_argument("--theta", type=float, default=0.95)
ap.add_argument("--K", type=int, nargs="+", default=[1, 16, 64])
ap.add_argument("--seeds", type=int, default=3)
args = ap.parse_args()

rows = []
for seed in range(args.seeds):
    ids, V, _ = planted_corpus(args.groups, args.per_group, args.dim, args.theta, seed, args.singles)
    ref = all_pairs_dedup(ids, V, args.theta)
    pairs = [p for g in ref.groups for p in itertools.combinations(sorted(g), 2)]
    for K in args.K:
        t0 = time.perf_counter()
        idx = dedup_features(ids, V, K, args.theta, seed=seed)
        rows.append({"seed": seed, "K": K, "recall": pair_recall(idx, pairs), "seconds": round(time.perf_counter() - t0, 3)})
print(json.dumps(rows, indent=2))
