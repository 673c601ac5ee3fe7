"""
Covariate Importance

Ranks test-condition attributes by their influence on measured download speed.
A random forest of CART regression trees is grown from scratch with numpy, and
each feature is scored by the increase in out-of-bag MSE when its column is
permuted.
"""

import json
import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .ingest import OS_CLASS_PRECEDENCE, TestRecord

logger = logging.getLogger(__name__)

FOREST_FORMAT = "ispm-forest"
FOREST_VERSION = 2

FEATURES = ["tier_mbps", "rwnd_bytes", "min_rtt_ms", "mss_bytes", "os_class", "isp", "local_hour"]

# os_class codes follow OS_CLASS_PRECEDENCE; isp codes follow sorted ISP names.
OS_CODEBOOK = {c.value: i for i, c in enumerate(OS_CLASS_PRECEDENCE)}


class SchemaMismatchError(ValueError):
    """Raised when a feature matrix does not match the forest's columns."""


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    codebook: dict[str, dict[str, int]] = field(default_factory=dict)
    dropped_rows: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError("feature_names must name every column")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ValueError("feature matrix contains missing values")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, target: str, features: Sequence[str]) -> "FeatureMatrix":
        return cls(frame[list(features)].to_numpy(dtype=float), frame[target].to_numpy(dtype=float), list(features))


def build_feature_matrix(
    records: Sequence[TestRecord],
    profiles: Sequence,
    country: str | None = None,
    features: Sequence[str] = FEATURES,
) -> FeatureMatrix:
    """
    One row per test with its household's speed-tier; target is download_mbps.

    Tests whose household has no tier estimate are dropped and counted.

    Args:
        records: Validated records
        profiles: HouseholdProfiles (keyed by IP, and by year when profiled per year)
        country: Keep only this country
        features: Column subset, in order

    Returns:
        FeatureMatrix with the os_class / isp codebook
    """
    tiers: dict[tuple[str, int | None], float] = {}
    for profile in profiles:
        if profile.tier_mbps is not None:
            tiers[(profile.client_ip, profile.year)] = profile.tier_mbps

    selected = [r for r in records if country is None or r.country == country]
    isp_codes = {isp: i for i, isp in enumerate(sorted({r.isp for r in selected}))}

    rows = []
    dropped = 0
    for record in selected:
        tier = tiers.get((record.client_ip, record.year), tiers.get((record.client_ip, None)))
        if tier is None:
            dropped += 1
            continue
        rows.append({
            "tier_mbps": tier,
            "rwnd_bytes": record.rwnd_bytes,
            "min_rtt_ms": record.min_rtt_ms,
            "mss_bytes": record.mss_bytes,
            "client_limited_frac": record.client_limited_frac,
            "os_class": OS_CODEBOOK[record.os_class.value],
            "isp": isp_codes[record.isp],
            "local_hour": record.local_hour,
            "download_mbps": record.download_mbps,
        })
    if dropped:
        logger.warning("dropped %d of %d tests without a speed-tier", dropped, len(selected))

    frame = pd.DataFrame(rows, columns=list(features) + ["download_mbps"])
    matrix = FeatureMatrix.from_frame(frame, "download_mbps", features)
    matrix.codebook = {"os_class": dict(OS_CODEBOOK), "isp": isp_codes}
    matrix.dropped_rows = dropped
    return matrix


# =============================================================================
# Regression trees
# =============================================================================

@dataclass
class Tree:
    """Flat CART tree; leaves have feature == -1."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            current = node[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return self.value[node]

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        return cls(
            feature=np.asarray(data["feature"], dtype=int),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=int),
            right=np.asarray(data["right"], dtype=int),
            value=np.asarray(data["value"], dtype=float),
        )


def _best_split(
    X: np.ndarray, y: np.ndarray, features: np.ndarray, min_leaf: int
) -> tuple[float, int, float] | None:
    """Lowest total child SSE over candidate features; None if no valid split."""
    n = y.size
    if n < 2 * min_leaf:
        return None
    total = y.sum()
    total_sq = np.dot(y, y)
    best: tuple[float, int, float] | None = None
    left_counts = np.arange(min_leaf, n - min_leaf + 1)
    for f in features:
        order = np.argsort(X[:, f], kind="mergesort")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        valid = xs[left_counts - 1] < xs[left_counts]
        if not valid.any():
            continue
        k = left_counts[valid]
        left_sse = csq[k - 1] - csum[k - 1] ** 2 / k
        right_sum = total - csum[k - 1]
        right_sse = (total_sq - csq[k - 1]) - right_sum ** 2 / (n - k)
        sse = left_sse + right_sse
        i = int(np.argmin(sse))
        if best is None or sse[i] < best[0]:
            low, high = xs[k[i] - 1], xs[k[i]]
            threshold = (low + high) / 2.0
            if not low <= threshold < high:
                threshold = low
            best = (float(sse[i]), int(f), float(threshold))
    return best


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    max_depth: int = 12,
    min_leaf: int = 5,
    features_per_split: int | None = None,
) -> Tree:
    """Grow one regression tree; splits minimize the weighted child variance."""
    p = X.shape[1]
    mtry = min(p, features_per_split or p)
    feature, threshold, left, right, value = [], [], [], [], []

    def _new_node(rows: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        return len(feature) - 1

    stack = [(_new_node(np.arange(y.size)), np.arange(y.size), 0)]
    while stack:
        node, rows, depth = stack.pop()
        ys = y[rows]
        if depth >= max_depth or rows.size < 2 * min_leaf or np.all(ys == ys[0]):
            continue
        candidates = np.sort(rng.choice(p, size=mtry, replace=False))
        split = _best_split(X[rows], ys, candidates, min_leaf)
        parent_sse = float(np.sum((ys - ys.mean()) ** 2))
        if split is None or split[0] >= parent_sse - 1e-12 * max(1.0, parent_sse):
            continue
        _, f, t = split
        mask = X[rows, f] <= t
        left_rows, right_rows = rows[mask], rows[~mask]
        feature[node], threshold[node] = f, t
        left[node] = _new_node(left_rows)
        right[node] = _new_node(right_rows)
        stack.append((right[node], right_rows, depth + 1))
        stack.append((left[node], left_rows, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        value=np.asarray(value, dtype=float),
    )


# =============================================================================
# Forest
# =============================================================================

@dataclass
class Forest:
    trees: list[Tree]
    in_bag: np.ndarray
    feature_names: list[str]
    params: dict[str, Any]
    codebook: dict[str, dict[str, int]] = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Mean of the trees' predictions."""
        X = np.asarray(X, dtype=float)
        return np.mean([tree.predict(X) for tree in self.trees], axis=0)

    def evaluation_rows(self, tree_index: int) -> np.ndarray:
        """Out-of-bag rows of one tree; every row when trained without bootstrap."""
        if not self.params.get("bootstrap", True):
            return np.arange(self.in_bag.shape[1])
        return np.nonzero(~self.in_bag[tree_index])[0]

    def oob_predict(self, X: np.ndarray) -> np.ndarray:
        """Per-row mean over trees that did not see the row; NaN if every tree did."""
        total = np.zeros(X.shape[0])
        counts = np.zeros(X.shape[0])
        for i, tree in enumerate(self.trees):
            rows = np.nonzero(~self.in_bag[i])[0]
            if rows.size:
                total[rows] += tree.predict(X[rows])
                counts[rows] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, total / counts, np.nan)

    def oob_r2(self, m: FeatureMatrix) -> float | None:
        predicted = self.oob_predict(m.X)
        covered = np.isfinite(predicted)
        if covered.sum() < 2:
            return None
        y = m.y[covered]
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot == 0.0:
            return None
        return 1.0 - float(np.sum((y - predicted[covered]) ** 2)) / ss_tot

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps({
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "feature_names": self.feature_names,
            "codebook": self.codebook,
            "params": self.params,
            "rows": int(self.in_bag.shape[1]),
            "in_bag": [np.nonzero(bag)[0].tolist() for bag in self.in_bag],
            "trees": [tree.to_dict() for tree in self.trees],
        }, indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        data = json.loads(text)
        if data.get("format") != FOREST_FORMAT or data.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest dump {data.get('format')!r} v{data.get('version')}")
        trees = [Tree.from_dict(t) for t in data["trees"]]
        in_bag = np.zeros((len(trees), data["rows"]), dtype=bool)
        for i, rows in enumerate(data["in_bag"]):
            in_bag[i, rows] = True
        return cls(
            trees=trees,
            in_bag=in_bag,
            feature_names=data["feature_names"],
            params=data["params"],
            codebook=data["codebook"],
        )


def fit_forest(
    m: FeatureMatrix,
    trees: int = 200,
    max_depth: int = 12,
    min_leaf: int = 5,
    features_per_split: int | None = None,
    seed: int = 0,
    bootstrap: bool = True,
) -> Forest:
    """
    Fit a random forest regressor.

    Each tree draws its own generator from a SeedSequence spawned off `seed`,
    so the forest is identical whatever order trees are grown in.

    Args:
        m: Training data (>= 2 rows, >= 1 feature)
        trees: Number of trees
        max_depth: Maximum tree depth
        min_leaf: Minimum rows per leaf
        features_per_split: Candidate features per split (default ceil(sqrt(p)))
        seed: Random seed
        bootstrap: Train each tree on a bootstrap sample

    Returns:
        Fitted Forest
    """
    n, p = m.X.shape
    if n < 2 or p < 1:
        raise ValueError(f"need at least 2 rows and 1 feature, got {n}x{p}")
    mtry = features_per_split or max(1, math.ceil(math.sqrt(p)))
    if float(np.var(m.y)) == 0.0:
        logger.warning("target has zero variance; every tree is a single leaf")

    fitted = []
    in_bag = np.zeros((trees, n), dtype=bool)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(trees)):
        rng = np.random.default_rng(child)
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        in_bag[i, rows] = True
        fitted.append(grow_tree(m.X[rows], m.y[rows], rng, max_depth, min_leaf, mtry))

    params = {
        "trees": trees,
        "max_depth": max_depth,
        "min_leaf": min_leaf,
        "features_per_split": mtry,
        "seed": seed,
        "bootstrap": bootstrap,
    }
    logger.debug("fitted forest %s on %d rows", params, n)
    return Forest(fitted, in_bag, list(m.feature_names), params, dict(m.codebook))


# =============================================================================
# Importance
# =============================================================================

@dataclass
class ImportanceEntry:
    feature: str
    score: float
    rank: int
    share: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImportanceReport:
    entries: list[ImportanceEntry]
    metadata: dict[str, Any] = field(default_factory=dict)

    def ranked(self) -> list[ImportanceEntry]:
        return sorted(self.entries, key=lambda e: e.rank)

    def rank_of(self, feature: str) -> int:
        return next(e.rank for e in self.entries if e.feature == feature)

    def score_of(self, feature: str) -> float:
        return next(e.score for e in self.entries if e.feature == feature)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.ranked()], "metadata": self.metadata}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.to_dict() for e in self.ranked()], columns=["feature", "score", "rank", "share"])


def permutation_importance(
    forest: Forest,
    m: FeatureMatrix,
    repeats: int = 5,
    seed: int = 0,
) -> ImportanceReport:
    """
    Mean increase in each tree's out-of-bag MSE when one column is permuted.

    Scores are averaged over trees and repeats and floored at 0. Ranks start at
    1 (most important); equal scores keep column order.

    Raises:
        SchemaMismatchError: if `m` has different columns from the training data
    """
    if list(m.feature_names) != list(forest.feature_names):
        raise SchemaMismatchError(f"forest columns {forest.feature_names} != matrix columns {m.feature_names}")
    if forest.in_bag.shape[1] != m.n_rows:
        raise SchemaMismatchError(f"forest was trained on {forest.in_bag.shape[1]} rows, matrix has {m.n_rows}")

    rng = np.random.default_rng(seed)
    p = len(m.feature_names)
    increases = np.zeros(p)
    evaluations = 0
    for _ in range(repeats):
        for i, tree in enumerate(forest.trees):
            rows = forest.evaluation_rows(i)
            if rows.size < 2:
                continue
            X = m.X[rows]
            y = m.y[rows]
            base = float(np.mean((tree.predict(X) - y) ** 2))
            for j in range(p):
                shuffled = X.copy()
                shuffled[:, j] = X[rng.permutation(rows.size), j]
                increases[j] += float(np.mean((tree.predict(shuffled) - y) ** 2)) - base
            evaluations += 1

    scores = np.maximum(increases / evaluations, 0.0) if evaluations else np.zeros(p)
    order = sorted(range(p), key=lambda j: -scores[j])
    ranks = {j: r + 1 for r, j in enumerate(order)}
    total = float(scores.sum())
    entries = [
        ImportanceEntry(
            feature=name,
            score=float(scores[j]),
            rank=ranks[j],
            share=float(scores[j]) / total if total > 0 else 0.0,
        )
        for j, name in enumerate(m.feature_names)
    ]
    metadata = dict(forest.params)
    metadata.update({"repeats": repeats, "importance_seed": seed, "rows": m.n_rows,
                     "dropped_rows": m.dropped_rows, "oob_r2": forest.oob_r2(m)})
    return ImportanceReport(entries=entries, metadata=metadata)
