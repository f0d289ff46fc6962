import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.cluster import kmeans_plusplus

from ..config.moce_config import MODEL_PARAMETERS
from ..models.embedding import EmbeddingSet, SequenceEmbedding
from ..models.kmeans import ClusterAssignment, ElbowReport, KMeansModel
from ..utils.exceptions import ContractError, DataFormatError, NumericError, SetupError, ShapeError

logger = logging.getLogger(__name__)

KMEANS_HEADER = "MOCE-KMEANS v1"

Points = Union[EmbeddingSet, np.ndarray]


def _as_matrix(embeddings: Points) -> np.ndarray:
    if isinstance(embeddings, EmbeddingSet):
        return embeddings.matrix()
    matrix = np.asarray(embeddings, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.ndim != 2:
        raise ShapeError(f"Expected a points matrix, got shape {matrix.shape}")
    return matrix


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # Column per centroid; direct differences keep exact ties exact.
    distances = np.empty((points.shape[0], centroids.shape[0]))
    for c in range(centroids.shape[0]):
        diff = points - centroids[c]
        distances[:, c] = np.einsum("ij,ij->i", diff, diff)
    return distances


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lowest cluster index.
    return np.argmin(_squared_distances(points, centroids), axis=1)


def _repair_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Seed every empty cluster with the point farthest from its own centroid."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        diff = points - centroids[labels]
        distances = np.einsum("ij,ij->i", diff, diff)
        distances[counts[labels] <= 1] = -1.0
        donor = int(np.argmax(distances))
        if distances[donor] < 0:
            raise SetupError(f"Cannot repair empty cluster {empty}: no cluster has a spare member")
        logger.warning(f"Cluster {empty} emptied; reseeding it with point {donor}")
        counts[labels[donor]] -= 1
        labels[donor] = empty
        counts[empty] = 1
        centroids[empty] = points[donor]
    return labels


def _means(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    centroids = np.zeros((k, points.shape[1]))
    for c in range(k):
        centroids[c] = points[labels == c].mean(axis=0)
    return centroids


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _distinct_count(points: np.ndarray) -> int:
    return int(np.unique(points, axis=0).shape[0])


def _lloyd(points: np.ndarray, k: int, seed: int, max_iters: int, tol: float) -> Tuple[KMeansModel, ClusterAssignment]:
    centroids, _ = kmeans_plusplus(points, n_clusters=k, random_state=seed)
    centroids = np.array(centroids, dtype=np.float64)
    slack = MODEL_PARAMETERS["clustering"]["monotonic_tolerance"]

    labels: Optional[np.ndarray] = None
    history = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        new_labels = _repair_empty(points, centroids, _assign(points, centroids), k)
        centroids = _means(points, new_labels, k)
        current = _sse(points, centroids, new_labels)
        if history and current > history[-1] + slack * (1.0 + abs(history[-1])):
            raise NumericError(f"SSE increased from {history[-1]} to {current} at iteration {iterations}")
        history.append(current)
        converged = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        if converged or (tol > 0 and len(history) > 1 and history[-2] - history[-1] <= tol):
            break

    model = KMeansModel(
        centroids=centroids,
        seed=seed,
        final_sse=history[-1],
        iterations_run=iterations,
        sse_history=history,
    )
    return model, ClusterAssignment.from_labels(labels, k)


def kmeans_fit(
    embeddings: Points,
    k: int,
    seed: int = 0,
    max_iters: Optional[int] = None,
    tol: Optional[float] = None,
    n_init: Optional[int] = None,
) -> Tuple[KMeansModel, ClusterAssignment]:
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-SSE of ``n_init`` restarts."""
    config = MODEL_PARAMETERS["clustering"]
    max_iters = config["max_iters"] if max_iters is None else max_iters
    tol = config["tol"] if tol is None else tol
    n_init = config["n_init"] if n_init is None else n_init

    points = _as_matrix(embeddings)
    if k <= 0:
        raise ContractError(f"Cluster count must be positive, got {k}")
    if k > points.shape[0]:
        raise ContractError(f"Cluster count {k} exceeds the number of points {points.shape[0]}")
    if not np.all(np.isfinite(points)):
        raise NumericError("Cannot cluster non-finite points")
    distinct = _distinct_count(points)
    if distinct < k:
        raise SetupError(f"Cannot form {k} non-empty clusters from {distinct} distinct points")

    restart_seeds = np.random.SeedSequence(seed).generate_state(max(n_init, 1))
    best: Optional[Tuple[KMeansModel, ClusterAssignment]] = None
    for restart_seed in restart_seeds:
        model, assignment = _lloyd(points, k, int(restart_seed), max_iters, tol)
        if best is None or model.final_sse < best[0].final_sse:
            best = (model, assignment)
    model, assignment = best
    if _distinct_count(model.centroids) < k:
        raise SetupError(f"k-means converged with coinciding centroids for k={k}; the data cannot support {k} clusters")
    model.seed = seed
    return model, assignment


def kmeans_predict(model: KMeansModel, e: Union[SequenceEmbedding, np.ndarray]) -> int:
    vector = e.vector if isinstance(e, SequenceEmbedding) else np.asarray(e, dtype=np.float64)
    if vector.shape != (model.dimension,):
        raise ShapeError(f"Embedding of shape {vector.shape} does not match model dimension {model.dimension}")
    return int(_assign(vector[None, :], model.centroids)[0])


def predict_labels(model: KMeansModel, embeddings: Points) -> np.ndarray:
    points = _as_matrix(embeddings)
    if points.shape[1] != model.dimension:
        raise ShapeError(f"Points of dimension {points.shape[1]} do not match model dimension {model.dimension}")
    return _assign(points, model.centroids)


def sse(model: KMeansModel, embeddings: Points, assignment: ClusterAssignment) -> float:
    """Within-cluster sum of squared distances to the assigned centroids."""
    points = _as_matrix(embeddings)
    labels = np.asarray(assignment.labels, dtype=np.int64)
    if labels.shape != (points.shape[0],):
        raise ShapeError(f"{labels.size} labels for {points.shape[0]} points")
    if points.shape[1] != model.dimension:
        raise ShapeError(f"Points of dimension {points.shape[1]} do not match model dimension {model.dimension}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.k):
        raise ShapeError(f"Labels must lie in [0, {model.k})")
    return _sse(points, model.centroids, labels)


def elbow_select(
    embeddings: Points,
    k_max: Optional[int] = None,
    seed: int = 0,
    n_init: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> ElbowReport:
    """Fit k = 1..k_max and pick the k with the largest second difference of SSE."""
    config = MODEL_PARAMETERS["clustering"]
    k_max = config["k_max"] if k_max is None else k_max
    n_jobs = config["n_jobs"] if n_jobs is None else n_jobs
    points = _as_matrix(embeddings)
    if k_max < 3:
        raise ContractError(f"Elbow selection needs k_max >= 3, got {k_max}")
    if points.shape[0] < k_max:
        raise ContractError(f"Elbow selection needs at least {k_max} points, got {points.shape[0]}")

    ks = list(range(1, k_max + 1))
    fits = Parallel(n_jobs=n_jobs)(delayed(kmeans_fit)(points, k, seed=seed, n_init=n_init) for k in ks)
    curve = [model.final_sse for model, _ in fits]

    curvature = {k: curve[k - 2] - 2.0 * curve[k - 1] + curve[k] for k in range(2, k_max)}
    if max(curvature.values()) <= 0:
        logger.warning(f"SSE curve has no positive curvature for k=2..{k_max - 1}; falling back to k=2")
    selected = 2
    for k in range(3, k_max):
        if curvature[k] > curvature[selected]:
            selected = k

    slack = config["monotonic_tolerance"]
    monotonic = all(b <= a + slack * (1.0 + abs(a)) for a, b in zip(curve, curve[1:]))
    if not monotonic:
        logger.warning(f"SSE curve is not non-increasing in k: {curve}")
    logger.info(f"Elbow selection over k=1..{k_max} chose k={selected}")
    return ElbowReport(ks=ks, sse_curve=curve, curvature=curvature, selected_k=selected, monotonic=monotonic)


def save_kmeans(model: KMeansModel, path: Union[str, Path]) -> None:
    lines = [f"{KMEANS_HEADER} {model.k} {model.dimension} {model.seed}"]
    for row in model.centroids:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_kmeans(path: Union[str, Path]) -> KMeansModel:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty clustering model file")
    header = lines[0].split()
    if len(header) != 5 or " ".join(header[:2]) != KMEANS_HEADER:
        raise DataFormatError(f"{path}: expected header '{KMEANS_HEADER} <k> <dim> <seed>', got '{lines[0]}'")
    try:
        k, dimension, seed = int(header[2]), int(header[3]), int(header[4])
    except ValueError:
        raise DataFormatError(f"{path}: non-integer field in header '{lines[0]}'")
    if len(lines) - 1 != k:
        raise DataFormatError(f"{path}: header declares {k} centroids, found {len(lines) - 1}")
    centroids = np.zeros((k, dimension))
    for row, line in enumerate(lines[1:]):
        values = line.split()
        if len(values) != dimension:
            raise DataFormatError(f"{path}: centroid {row} has {len(values)} values, expected {dimension}")
        try:
            centroids[row] = [float(v) for v in values]
        except ValueError:
            raise DataFormatError(f"{path}: centroid {row} contains a non-numeric value")
    if not np.all(np.isfinite(centroids)):
        raise NumericError(f"{path}: non-finite centroid values")
    return KMeansModel(centroids=centroids, seed=seed)


class ClusteringService:
    """Fits or selects the sequence-level clustering model ahead of training."""

    def __init__(self, seed: int = 0):
        self.config = MODEL_PARAMETERS["clustering"]
        self.seed = seed

    def fit(self, embeddings: Points, k: int) -> Tuple[KMeansModel, ClusterAssignment]:
        try:
            model, assignment = kmeans_fit(embeddings, k, seed=self.seed)
        except ContractError as e:
            logger.error(f"Failed to fit {k} clusters: {str(e)}")
            raise SetupError(str(e)) from e
        logger.info(
            f"Fitted k={k} in {model.iterations_run} iterations, SSE={model.final_sse:.6f}, "
            f"cluster sizes={assignment.counts.tolist()}"
        )
        return model, assignment

    def select(self, embeddings: Points, k_max: int) -> Tuple[ElbowReport, KMeansModel, ClusterAssignment]:
        try:
            report = elbow_select(embeddings, k_max=k_max, seed=self.seed)
        except ContractError as e:
            logger.error(f"Elbow selection failed: {str(e)}")
            raise SetupError(str(e)) from e
        model, assignment = self.fit(embeddings, report.selected_k)
        return report, model, assignment

    def single_group(self, embeddings: Points) -> Tuple[KMeansModel, ClusterAssignment]:
        """One cluster: every sequence routes to group 0 (clustering ablated)."""
        return self.fit(embeddings, 1)
