"""Region data ingestion and relation-graph construction.

Input formats (all UTF-8, LF line endings):
  trips.csv   one trip aggregate per line: ``origin,destination,count``
              (header line allowed and ignored)
  poi.csv     N rows of f comma-separated non-negative integer POI counts
  geo.txt     line i holds the space-separated neighbor ids of region i
              (an empty line means no neighbors)

The synthetic generator additionally writes ``labels.csv`` (one ground-truth
cluster id per line) and ``targets.csv`` (header ``checkin,crime``).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from scipy import sparse

RELATIONS = ("origin", "destination", "poi", "geo")

ROW_SUM_TOL = 1e-9


class ParseError(ValueError):
    """Malformed input line; the message names the offending line number."""


@dataclasses.dataclass(frozen=True)
class MobilityRecord:
    """One aggregated trip flow between two regions."""

    origin: int
    destination: int
    count: int


@dataclasses.dataclass(frozen=True)
class POITable:
    """Per-region POI counts, one column per category."""

    counts: np.ndarray  # (N, f) non-negative ints

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[1] < 1:
            raise ValueError(f"POI table must be N x f with f >= 1, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("POI table contains negative counts")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n_regions(self) -> int:
        return self.counts.shape[0]

    @property
    def n_categories(self) -> int:
        return self.counts.shape[1]


@dataclasses.dataclass(frozen=True)
class GeoNeighbors:
    """Symmetric geographic neighbor lists, no self-membership."""

    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        sets = [frozenset(n) for n in self.neighbors]
        for i, members in enumerate(sets):
            if i in members:
                raise ValueError(f"region {i} lists itself as a geographic neighbor")
            for j in members:
                if j < 0 or j >= len(sets):
                    raise ValueError(f"region {i} lists out-of-range neighbor {j}")
                if i not in sets[j]:
                    raise ValueError(f"neighbor lists are asymmetric for pair ({i}, {j})")
        object.__setattr__(
            self, "neighbors", tuple(tuple(sorted(set(n))) for n in self.neighbors)
        )

    @property
    def n_regions(self) -> int:
        return len(self.neighbors)


@dataclasses.dataclass(frozen=True)
class RegionGraph:
    """Immutable bundle of the four relation subgraphs over N regions.

    ``adjacency[k]`` is a sparse non-negative matrix with self-loops;
    ``degrees[k]`` its weighted row sums; ``similarity[k]`` a dense
    row-stochastic matrix. ``p_origin[i, j]`` is the probability of a trip
    from i ending at j; ``p_destination[j, i]`` the probability of a trip
    into j having started at i. ``trip_counts`` keeps the raw aggregated
    flows for likelihood-based losses.
    """

    n_regions: int
    relations: tuple[str, ...]
    adjacency: dict[str, sparse.csr_array]
    degrees: dict[str, np.ndarray]
    similarity: dict[str, np.ndarray]
    p_origin: np.ndarray
    p_destination: np.ndarray
    trip_counts: sparse.csr_array
    top_k: int

    def __post_init__(self):
        for name, s in self.similarity.items():
            rows = s.sum(axis=1)
            if not np.allclose(rows, 1.0, atol=ROW_SUM_TOL):
                raise ValueError(f"similarity rows for relation {name!r} are not stochastic")
        for m in (self.p_origin, self.p_destination, *self.similarity.values()):
            m.flags.writeable = False

    def geo_neighbor_sets(self) -> list[set[int]]:
        """Off-diagonal support of the geographic adjacency."""
        a = self.adjacency["geo"].toarray()
        return [
            {int(j) for j in np.flatnonzero(a[i]) if j != i} for i in range(self.n_regions)
        ]


def load_trips(path: str | Path, n_regions: int) -> list[MobilityRecord]:
    """Parse ``origin,destination,count`` lines and validate ids against N."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if lineno == 1 and not parts[0].lstrip("-").isdigit():
                continue  # optional header
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                o, t, c = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer field in {line!r}") from None
            if not (0 <= o < n_regions and 0 <= t < n_regions):
                raise ValueError(
                    f"line {lineno}: region id out of range 0..{n_regions - 1}: {line!r}"
                )
            if c < 0:
                raise ValueError(f"line {lineno}: negative trip count {c}")
            records.append(MobilityRecord(o, t, c))
    return records


def load_poi(path: str | Path) -> POITable:
    counts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [int(p) for p in line.split(",")]
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer POI count in {line!r}") from None
            counts.append(row)
    if not counts or any(len(r) != len(counts[0]) for r in counts):
        raise ParseError("POI rows are empty or ragged")
    return POITable(np.array(counts, dtype=np.int64))


def load_geo(path: str | Path, n_regions: int) -> GeoNeighbors:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) != n_regions:
        raise ParseError(f"expected {n_regions} neighbor lines, got {len(lines)}")
    neighbors = []
    for lineno, line in enumerate(lines, start=1):
        try:
            ids = tuple(int(p) for p in line.split())
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer neighbor id in {line!r}") from None
        neighbors.append(ids)
    return GeoNeighbors(tuple(neighbors))


def trip_count_matrix(records: list[MobilityRecord], n_regions: int) -> np.ndarray:
    counts = np.zeros((n_regions, n_regions), dtype=np.int64)
    for r in records:
        counts[r.origin, r.destination] += r.count
    return counts


def build_mobility_distributions(
    records: list[MobilityRecord], n_regions: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic origin/destination trip distributions.

    ``p_o[i, j]`` conditions on the origin i, ``p_t[j, i]`` on the
    destination j. Rows with no observed trips fall back to uniform.
    """
    if n_regions < 2:
        raise ValueError("need at least 2 regions")
    counts = trip_count_matrix(records, n_regions).astype(np.float64)
    p_o = _normalize_rows_uniform_fallback(counts)
    p_t = _normalize_rows_uniform_fallback(counts.T)
    return p_o, p_t


def _normalize_rows_uniform_fallback(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    out = np.where(sums > 0, m / np.where(sums > 0, sums, 1.0), 1.0 / m.shape[1])
    return out


def build_poi_similarity(poi: POITable) -> np.ndarray:
    """TF-IDF cosine similarity between the regions' POI profiles.

    Terms are categories and documents are regions: tf is the within-region
    category share, idf is ln(N / df). The diagonal is zeroed and each row
    renormalized to sum 1; rows without any usable signal (all-zero POI
    vector, or orthogonal to everyone) become uniform over the other regions.
    """
    counts = poi.counts.astype(np.float64)
    n = counts.shape[0]
    if n < 2:
        raise ValueError("need at least 2 regions")
    totals = counts.sum(axis=1, keepdims=True)
    tf = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    df = (counts > 0).sum(axis=0).astype(np.float64)
    idf = np.where(df > 0, np.log(np.where(df > 0, n / np.where(df > 0, df, 1.0), 1.0)), 0.0)
    weighted = tf * idf
    norms = np.linalg.norm(weighted, axis=1)
    denom = np.outer(norms, norms)
    cos = np.divide(weighted @ weighted.T, denom, out=np.zeros((n, n)), where=denom > 0)
    np.fill_diagonal(cos, 0.0)
    cos = np.clip(cos, 0.0, None)
    sums = cos.sum(axis=1)
    out = np.empty_like(cos)
    for i in range(n):
        if sums[i] > 0:
            out[i] = cos[i] / sums[i]
        else:
            out[i] = 1.0 / (n - 1)
            out[i, i] = 0.0
    return out


def sparsify_top_k(weights: np.ndarray, top_k: int) -> np.ndarray:
    """Keep the top_k off-diagonal entries per row (ties to lower id), unit diagonal.

    Row support never exceeds top_k + 1 (the kept entries plus the self-loop).
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    n = weights.shape[0]
    out = np.zeros_like(weights, dtype=np.float64)
    for i in range(n):
        row = weights[i].astype(np.float64).copy()
        row[i] = 0.0
        candidates = np.flatnonzero(row > 0)
        if candidates.size > top_k:
            # stable sort on (-value, id): equal values resolve to the lower id
            order = np.lexsort((candidates, -row[candidates]))
            candidates = candidates[order[:top_k]]
        out[i, candidates] = row[candidates]
        out[i, i] = 1.0
    return out


def build_relation_graphs(
    records: list[MobilityRecord],
    poi: POITable,
    geo: GeoNeighbors,
    top_k: int = 10,
) -> RegionGraph:
    """Assemble the four relation subgraphs and their similarity matrices.

    Mobility and POI adjacencies keep only the top_k strongest partners per
    row (plus a self-loop); the POI adjacency is symmetrized with
    max(A, A^T) because cosine similarity is symmetric while top-k selection
    is not. The geographic adjacency is the full binary neighbor matrix.
    """
    n = poi.n_regions
    if geo.n_regions != n:
        raise ValueError(f"POI table has {n} regions but geo lists {geo.n_regions}")
    for r in records:
        if r.origin >= n or r.destination >= n:
            raise ValueError(f"trip record {r} references a region id >= {n}")

    p_o, p_t = build_mobility_distributions(records, n)
    s_poi = build_poi_similarity(poi)

    a_origin = sparsify_top_k(p_o, top_k)
    a_destination = sparsify_top_k(p_t, top_k)
    a_poi_dir = sparsify_top_k(s_poi, top_k)
    a_poi = np.maximum(a_poi_dir, a_poi_dir.T)

    a_geo = np.zeros((n, n), dtype=np.float64)
    for i, nbrs in enumerate(geo.neighbors):
        a_geo[i, list(nbrs)] = 1.0
    np.fill_diagonal(a_geo, 1.0)
    s_geo = a_geo / a_geo.sum(axis=1, keepdims=True)

    adjacency = {
        "origin": sparse.csr_array(a_origin),
        "destination": sparse.csr_array(a_destination),
        "poi": sparse.csr_array(a_poi),
        "geo": sparse.csr_array(a_geo),
    }
    degrees = {k: np.asarray(a.sum(axis=1)).ravel() for k, a in adjacency.items()}
    similarity = {
        "origin": p_o.copy(),
        "destination": p_t.copy(),
        "poi": s_poi,
        "geo": s_geo,
    }
    return RegionGraph(
        n_regions=n,
        relations=RELATIONS,
        adjacency=adjacency,
        degrees=degrees,
        similarity=similarity,
        p_origin=p_o,
        p_destination=p_t,
        trip_counts=sparse.csr_array(trip_count_matrix(records, n).astype(np.float64)),
        top_k=top_k,
    )


def generate_synthetic_city(
    n_regions: int,
    n_poi_categories: int,
    n_clusters: int,
    seed: int,
    trips_within: float = 20.0,
    trips_across: float = 2.0,
    pois_per_region: int = 60,
):
    """Deterministic toy city with planted cluster structure.

    Regions are assigned to contiguous cluster blocks. Same-cluster pairs
    exchange ~10x more trips than cross-cluster pairs, each cluster has its
    own dominant POI category, geographic neighbors form a grid, and the
    check-in / crime targets are linear in the cluster id plus seeded noise.

    Returns ``(records, poi, geo, labels, targets)`` where ``targets`` maps
    task name to an (N,) float array.
    """
    if n_clusters > n_regions:
        raise ValueError("n_clusters cannot exceed n_regions")
    if n_poi_categories < 2:
        raise ValueError("need at least 2 POI categories")
    rng = np.random.default_rng(seed)
    labels = np.array([i * n_clusters // n_regions for i in range(n_regions)], dtype=np.int64)

    same = labels[:, None] == labels[None, :]
    lam = np.where(same, trips_within, trips_across)
    counts = rng.poisson(lam)
    records = [
        MobilityRecord(int(i), int(j), int(counts[i, j]))
        for i in range(n_regions)
        for j in range(n_regions)
        if counts[i, j] > 0
    ]

    profiles = np.ones((n_clusters, n_poi_categories))
    for c in range(n_clusters):
        profiles[c, c % n_poi_categories] += 9.0
    profiles /= profiles.sum(axis=1, keepdims=True)
    poi_counts = np.stack(
        [rng.multinomial(pois_per_region, profiles[labels[i]]) for i in range(n_regions)]
    )
    poi = POITable(poi_counts)

    cols = int(np.ceil(np.sqrt(n_regions)))
    neighbors = []
    for i in range(n_regions):
        r, c = divmod(i, cols)
        nbrs = []
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            j = rr * cols + cc
            if 0 <= rr and 0 <= cc < cols and j < n_regions and j != i:
                nbrs.append(j)
        neighbors.append(tuple(sorted(nbrs)))
    geo = GeoNeighbors(tuple(neighbors))

    targets = {
        "checkin": 200.0 + 120.0 * labels + rng.normal(0.0, 10.0, size=n_regions),
        "crime": 40.0 + 25.0 * labels + rng.normal(0.0, 4.0, size=n_regions),
    }
    return records, poi, geo, labels, targets


def write_city(
    out_dir: str | Path,
    records: list[MobilityRecord],
    poi: POITable,
    geo: GeoNeighbors,
    labels: np.ndarray,
    targets: dict[str, np.ndarray],
) -> list[Path]:
    """Write the five data files for a city; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    trips = out / "trips.csv"
    trips.write_text(
        "".join(f"{r.origin},{r.destination},{r.count}\n" for r in records), encoding="utf-8"
    )
    paths.append(trips)

    poi_path = out / "poi.csv"
    poi_path.write_text(
        "".join(",".join(str(int(v)) for v in row) + "\n" for row in poi.counts),
        encoding="utf-8",
    )
    paths.append(poi_path)

    geo_path = out / "geo.txt"
    geo_path.write_text(
        "".join(" ".join(str(j) for j in nbrs) + "\n" for nbrs in geo.neighbors),
        encoding="utf-8",
    )
    paths.append(geo_path)

    labels_path = out / "labels.csv"
    labels_path.write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")
    paths.append(labels_path)

    targets_path = out / "targets.csv"
    names = sorted(targets)
    lines = [",".join(names)]
    for i in range(len(labels)):
        lines.append(",".join(f"{targets[name][i]:.6f}" for name in names))
    targets_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(targets_path)
    return paths


def load_city(data_dir: str | Path):
    """Load a city directory written by :func:`write_city`.

    Returns ``(records, poi, geo, labels, targets)``; labels / targets are
    None when their files are absent.
    """
    data = Path(data_dir)
    poi = load_poi(data / "poi.csv")
    n = poi.n_regions
    records = load_trips(data / "trips.csv", n)
    geo = load_geo(data / "geo.txt", n)
    labels = None
    labels_path = data / "labels.csv"
    if labels_path.exists():
        labels = np.array(
            [int(s) for s in labels_path.read_text(encoding="utf-8").split()], dtype=np.int64
        )
    targets = None
    targets_path = data / "targets.csv"
    if targets_path.exists():
        lines = targets_path.read_text(encoding="utf-8").splitlines()
        names = lines[0].split(",")
        rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
        targets = {name: rows[:, i].copy() for i, name in enumerate(names)}
    return records, poi, geo, labels, targets
