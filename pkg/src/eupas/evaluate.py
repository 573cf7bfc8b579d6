"""Downstream evaluation: ridge regression probes and K-means clustering.

Regression tasks are scored with MAE / RMSE / R^2 over pooled K-fold
held-out predictions; clustering is scored against ground-truth labels with
NMI and ARI. All metrics are implemented directly from their definitions so
tests can cross-check them against brute-force oracles.
"""

from __future__ import annotations

import dataclasses

import numpy as np

KMEANS_MAX_ITER = 300
KMEANS_SHIFT_TOL = 1e-6


@dataclasses.dataclass
class EvalReport:
    """Metric rows per task, plus the config digest they were computed under."""

    rows: list[dict]
    config_digest: str = ""

    def to_csv(self) -> str:
        lines = ["task,MAE,RMSE,R2,NMI,ARI"]
        for row in self.rows:
            cells = [row["task"]]
            for key in ("MAE", "RMSE", "R2", "NMI", "ARI"):
                cells.append("" if row.get(key) is None else repr(row[key]))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _check_lengths(y: np.ndarray, y_hat: np.ndarray):
    if len(y) != len(y_hat):
        raise ValueError(f"length mismatch: {len(y)} vs {len(y_hat)}")
    if len(y) == 0:
        raise ValueError("need at least one observation")


def mae(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    _check_lengths(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    _check_lengths(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def r2(y, y_hat) -> float:
    """Coefficient of determination; defined as 0 when the targets are constant."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    _check_lengths(y, y_hat)
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        return 0.0
    return float(1.0 - np.sum((y - y_hat) ** 2) / denom)


def ridge_fit(x: np.ndarray, y: np.ndarray, regularization: float = 1.0):
    """Closed-form ridge on standardized features with an unpenalized intercept.

    Features are z-scored (zero-variance columns are centered only) so the
    regularization strength is meaningful regardless of the embedding scale;
    the returned (coef, intercept) act on the raw feature space.
    """
    x_mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    y_mean = y.mean()
    xs = (x - x_mean) / scale
    gram = xs.T @ xs + regularization * np.eye(x.shape[1])
    coef_std = np.linalg.solve(gram, xs.T @ (y - y_mean))
    coef = coef_std / scale
    intercept = y_mean - x_mean @ coef
    return coef, intercept


def regression_probe(
    embeddings: np.ndarray,
    targets: np.ndarray,
    folds: int = 5,
    seed: int = 0,
    regularization: float = 1.0,
) -> tuple[float, float, float]:
    """Cross-validated ridge probe; returns (MAE, RMSE, R^2) over pooled held-out
    predictions."""
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= {n}, got {folds}")
    order = np.random.default_rng(seed).permutation(n)
    predictions = np.empty(n)
    for chunk in np.array_split(order, folds):
        train_idx = np.setdiff1d(order, chunk)
        coef, intercept = ridge_fit(x[train_idx], y[train_idx], regularization)
        predictions[chunk] = x[chunk] @ coef + intercept
    return mae(y, predictions), rmse(y, predictions), r2(y, predictions)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0:
            centers[c] = x[rng.integers(n)]
        else:
            centers[c] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    k = centers.shape[0]
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dists = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)  # ties resolve to the first centroid
        new_centers = centers.copy()
        per_point = dists[np.arange(len(labels)), labels].copy()
        for c in range(k):
            members = x[labels == c]
            if len(members) > 0:
                new_centers[c] = members.mean(axis=0)
            else:
                # revive an empty cluster at the point farthest from its centroid
                far = int(np.argmax(per_point))
                new_centers[c] = x[far]
                per_point[far] = -1.0
        shift = np.max(np.linalg.norm(new_centers - centers, axis=1))
        centers = new_centers
        if shift < KMEANS_SHIFT_TOL:
            break
    dists = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(len(labels)), labels].sum())
    return labels, inertia


def kmeans_cluster(
    embeddings: np.ndarray, k: int, seed: int = 0, restarts: int = 10
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; the best inertia over
    ``restarts`` wins, ties going to the earlier restart."""
    x = np.asarray(embeddings, dtype=float)
    if k > x.shape[0]:
        raise ValueError(f"k={k} exceeds the number of points {x.shape[0]}")
    best_labels, best_inertia = None, np.inf
    for restart in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        centers = _kmeans_pp_init(x, k, rng)
        labels, inertia = _lloyd(x, centers)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def _contingency(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    _, a = np.unique(labels_a, return_inverse=True)
    _, b = np.unique(labels_b, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def nmi(labels: np.ndarray, truth: np.ndarray) -> float:
    """Normalized mutual information, 2 I(U;V) / (H(U) + H(V))."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    if len(labels) != len(truth):
        raise ValueError("label vectors differ in length")
    table = _contingency(labels, truth)
    n = table.sum()
    pu = table.sum(axis=1) / n
    pv = table.sum(axis=0) / n
    hu = -np.sum(pu[pu > 0] * np.log(pu[pu > 0]))
    hv = -np.sum(pv[pv > 0] * np.log(pv[pv > 0]))
    if hu + hv == 0:
        # both partitions are single clusters, which are identical partitions
        return 1.0
    pij = table / n
    outer = np.outer(pu, pv)
    mask = pij > 0
    info = np.sum(pij[mask] * np.log(pij[mask] / outer[mask]))
    return float(min(2.0 * max(info, 0.0) / (hu + hv), 1.0))


def ari(labels: np.ndarray, truth: np.ndarray) -> float:
    """Adjusted Rand index from pair counts over the contingency table."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    if len(labels) != len(truth):
        raise ValueError("label vectors differ in length")
    table = _contingency(labels, truth)
    n = table.sum()

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(table.astype(float)).sum()
    sum_a = comb2(table.sum(axis=1).astype(float)).sum()
    sum_b = comb2(table.sum(axis=0).astype(float)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        # both partitions all-singletons or both one cluster: identical
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def evaluate_embeddings(
    embeddings: np.ndarray,
    regression_targets: dict[str, np.ndarray],
    cluster_truth: np.ndarray | None,
    n_clusters: int = 12,
    folds: int = 5,
    seed: int = 0,
    config_digest: str = "",
) -> EvalReport:
    """Score the embeddings on every configured downstream task."""
    rows = []
    for task in ("checkin",):
        if task in regression_targets:
            m, r, r_2 = regression_probe(embeddings, regression_targets[task], folds, seed)
            rows.append({"task": task, "MAE": m, "RMSE": r, "R2": r_2})
    if cluster_truth is not None:
        labels = kmeans_cluster(embeddings, n_clusters, seed=seed)
        rows.append(
            {"task": "landuse", "NMI": nmi(labels, cluster_truth), "ARI": ari(labels, cluster_truth)}
        )
    for task in sorted(regression_targets):
        if task == "checkin":
            continue
        m, r, r_2 = regression_probe(embeddings, regression_targets[task], folds, seed)
        rows.append({"task": task, "MAE": m, "RMSE": r, "R2": r_2})
    return EvalReport(rows=rows, config_digest=config_digest)
