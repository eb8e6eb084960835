"""
Descriptor database, exact nearest neighbour search, Recall@N and PCA reduction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler, normalize

from qdavpr.config import EvalProtocol, ProtocolMode
from qdavpr.data.manifest import ManifestRow
from qdavpr.error import DimensionError, IndexBoundError, InputShapeError, ProtocolError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
UNIT_NORM_TOLERANCE = 1e-4

GeoTag = tuple[float | None, float | None]

####################################################################################################
### Index
####################################################################################################


@dataclass(frozen=True)
class DescriptorIndex:
    """
    Immutable ``count x dim`` matrix of unit descriptors with parallel metadata rows.

    ``rows`` may be omitted for pairwise evaluation, which needs no metadata.
    """

    matrix: NDArray[np.float32]
    rows: list[ManifestRow] | None = None

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise InputShapeError(f"Expected a count x dim matrix, got `{self.matrix.shape}`!")
        if self.rows is not None and len(self.rows) != self.count:
            raise InputShapeError(
                f"`{len(self.rows)}` metadata rows for `{self.count}` descriptors!"
            )
        norms = np.linalg.norm(self.matrix, axis=1)
        if self.count and np.abs(norms - 1.0).max() > UNIT_NORM_TOLERANCE:
            raise InputShapeError("Database descriptors must be unit norm!")

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def knn(index: DescriptorIndex, query: ArrayLike, k: int) -> NDArray[np.int64]:
    """
    Indices of the ``k`` database rows with the highest dot product, best first.

    Ties are broken by ascending index. A single ``dim`` query gives a ``k`` vector, a
    ``Q x dim`` batch a ``Q x k`` matrix.
    """
    query = np.asarray(query, dtype=np.float32)
    if query.shape[-1] != index.dim:
        raise DimensionError(
            f"Query dim `{query.shape[-1]}` differs from the database dim `{index.dim}`!"
        )
    if not 1 <= k <= index.count:
        raise IndexBoundError(f"k `{k}` is not in `1..{index.count}`!")

    sims = query @ index.matrix.T
    return np.argsort(-sims, axis=-1, kind="stable")[..., :k]


####################################################################################################
### Ground truth
####################################################################################################


def haversine_m(
    lat1: ArrayLike, lon1: ArrayLike, lat2: ArrayLike, lon2: ArrayLike
) -> NDArray[np.float64]:
    """Great circle distance in meters on a sphere of radius 6371 km."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def positives_geo(
    query_tag: GeoTag, db_tags: Sequence[GeoTag], threshold_m: float = 25.0
) -> NDArray[np.bool_]:
    if query_tag[0] is None or query_tag[1] is None:
        raise ProtocolError("The query has no geo tag!")
    if any(lat is None or lon is None for lat, lon in db_tags):
        raise ProtocolError("Geo evaluation needs a geo tag for every database row!")

    coords = np.asarray(db_tags, dtype=np.float64).reshape(-1, 2)
    distance = haversine_m(query_tag[0], query_tag[1], coords[:, 0], coords[:, 1])
    return distance <= threshold_m


def positives_frame(
    query_frame: int, db_frames: ArrayLike, tolerance: int = 10
) -> NDArray[np.bool_]:
    """Closed window ``|db_frame - query_frame| <= tolerance``."""
    return np.abs(np.asarray(db_frames, dtype=np.int64) - int(query_frame)) <= tolerance


def _positive_masks(
    index: DescriptorIndex,
    n_queries: int,
    query_rows: list[ManifestRow] | None,
    protocol: EvalProtocol,
) -> list[NDArray[np.bool_]]:
    if protocol.mode is ProtocolMode.PAIRWISE:
        if n_queries > index.count:
            raise ProtocolError(
                f"Pairwise evaluation needs a counterpart for each of the `{n_queries}` queries, "
                f"the database holds `{index.count}`!"
            )
        return [np.arange(index.count) == i for i in range(n_queries)]

    if index.rows is None or query_rows is None:
        raise ProtocolError(f"`{protocol.mode.value}` evaluation needs metadata rows!")
    if len(query_rows) != n_queries:
        raise ProtocolError(f"`{len(query_rows)}` metadata rows for `{n_queries}` queries!")

    if protocol.mode is ProtocolMode.GEO:
        db_tags = [(row.lat, row.lon) for row in index.rows]
        return [
            positives_geo((row.lat, row.lon), db_tags, protocol.geo_threshold_m)
            for row in query_rows
        ]

    if any(row.frame_id is None for row in [*index.rows, *query_rows]):
        raise ProtocolError("Frame evaluation needs a frame id for every row!")
    db_frames = [row.frame_id for row in index.rows]
    return [
        positives_frame(row.frame_id, db_frames, protocol.frame_tolerance)  # type: ignore[arg-type]
        for row in query_rows
    ]


####################################################################################################
### Recall
####################################################################################################


@dataclass(frozen=True)
class RecallReport:
    recalls: dict[int, float]
    n_queries: int
    zero_positive: int  # queries without any positive in the database
    mode: ProtocolMode
    first_hits: list[int] = field(default_factory=list, repr=False)  # 0 based, -1 for a miss

    def table(self) -> str:
        lines = [
            f"protocol: {self.mode.value}",
            f"queries: {self.n_queries} (without positives: {self.zero_positive})",
            "",
            f"{'rank':>6} | {'recall':>7}",
            f"{'-' * 6}-+-{'-' * 7}",
        ]
        lines += [f"{f'R@{n}':>6} | {value:7.2f}" for n, value in self.recalls.items()]
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        return "".join(f"recall@{n}={value}\n" for n, value in self.recalls.items())


def recall_at_n(
    index: DescriptorIndex,
    queries: ArrayLike,
    query_rows: list[ManifestRow] | None,
    protocol: EvalProtocol | None = None,
) -> RecallReport:
    """
    Percentage of queries with at least one positive among the top ``N`` retrievals.

    Queries without any positive in the database count as misses and are reported in
    ``zero_positive``.
    """
    protocol = protocol or EvalProtocol()
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    n_queries = queries.shape[0]
    positives = _positive_masks(index, n_queries, query_rows, protocol)

    depth = min(max(protocol.recall_ranks), index.count)
    rankings = knn(index, queries, depth)

    first_hits: list[int] = []
    zero_positive = 0
    for ranking, mask in zip(rankings, positives):
        if not mask.any():
            zero_positive += 1
        hits = np.flatnonzero(mask[ranking])
        first_hits.append(int(hits[0]) if hits.size else -1)

    hits_array = np.asarray(first_hits)
    recalls = {
        n: 100.0 * float(np.mean((hits_array >= 0) & (hits_array < n))) if n_queries else 0.0
        for n in protocol.recall_ranks
    }
    if zero_positive:
        logger.warning(
            "%d of %d queries have no positive in the database", zero_positive, n_queries
        )

    return RecallReport(
        recalls=recalls,
        n_queries=n_queries,
        zero_positive=zero_positive,
        mode=protocol.mode,
        first_hits=first_hits,
    )


####################################################################################################
### PCA
####################################################################################################


@dataclass(frozen=True)
class PCAModel:
    """A fitted ``PCA`` whose directions are signed so their largest magnitude entry is positive."""

    pca: PCA

    @property
    def k(self) -> int:
        return int(self.pca.n_components_)

    @property
    def whiten(self) -> bool:
        return bool(self.pca.whiten)

    @property
    def mean(self) -> NDArray[np.float64]:
        return self.pca.mean_

    @property
    def projection(self) -> NDArray[np.float64]:
        """``dim x k``, orthonormal columns."""
        return self.pca.components_.T

    @property
    def variances(self) -> NDArray[np.float64]:
        return self.pca.explained_variance_


def fit_pca(descriptors: ArrayLike, k: int, whiten: bool = False) -> PCAModel:
    """Principal directions of the mean centered descriptors."""
    data = np.asarray(descriptors, dtype=np.float64)
    count, dim = data.shape
    if not 1 <= k <= min(count, dim):
        raise DimensionError(f"PCA to `{k}` dims needs at most `{min(count, dim)}` (count, dim)!")

    pca = PCA(n_components=k, whiten=whiten, svd_solver="full").fit(data)
    components = pca.components_
    pivots = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    signs[signs == 0] = 1.0
    pca.components_ = components * signs[:, None]
    return PCAModel(pca=pca)


def apply_pca(model: PCAModel, descriptors: ArrayLike) -> NDArray[np.float32]:
    """Project to ``k`` dims and L2 normalize again."""
    data = np.asarray(descriptors, dtype=np.float64)
    if data.shape[-1] != model.mean.shape[0]:
        raise DimensionError(
            f"PCA model expects dim `{model.mean.shape[0]}`, got `{data.shape[-1]}`!"
        )
    reduced = normalize(model.pca.transform(np.atleast_2d(data))).astype(np.float32)
    return reduced[0] if data.ndim == 1 else reduced


####################################################################################################
### Domain probe
####################################################################################################


def domain_probe_accuracy(
    features: ArrayLike,
    domain_labels: ArrayLike,
    seed: int = 0,
    *,
    max_iter: int = 200,
    C: float = 1.0,
) -> float:
    """
    Held-out accuracy of a linear domain classifier on ``features``.

    A standardized multinomial logistic regression is fitted on a random half of the samples
    and scored on the other half. Lower accuracy means less domain information.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(domain_labels)
    if x.shape[0] < 2 or len(np.unique(y)) < 2:
        raise ProtocolError("The domain probe needs at least two samples of two domains!")

    order = np.random.default_rng(seed).permutation(x.shape[0])
    half = x.shape[0] // 2
    train, test = order[:half], order[half:]
    if len(np.unique(y[train])) < 2:
        raise ProtocolError("The training half of the domain probe holds a single domain!")

    probe = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter))
    probe.fit(x[train], y[train])
    return float(probe.score(x[test], y[test]))
