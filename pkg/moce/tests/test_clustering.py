import itertools
import logging

import numpy as np
import pytest

from moce.models.kmeans import ClusterAssignment, KMeansModel
from moce.services import clustering_service
from moce.services.clustering_service import (
    ClusteringService,
    elbow_select,
    kmeans_fit,
    kmeans_predict,
    load_kmeans,
    predict_labels,
    save_kmeans,
    sse,
)
from moce.services.dataset_service import planted_blobs
from moce.utils.exceptions import ContractError, DataFormatError, SetupError


def brute_force_sse(points, labels, k):
    total = 0.0
    for c in range(k):
        members = points[labels == c]
        if len(members):
            center = members.mean(axis=0)
            for p in members:
                for a, b in zip(p, center):
                    total += (a - b) ** 2
    return total


def test_two_points_two_clusters_have_zero_sse():
    model, assignment = kmeans_fit(np.array([[0.0], [10.0]]), 2, seed=0)
    assert model.final_sse == 0.0
    assert sorted(model.centroids[:, 0].tolist()) == [0.0, 10.0]
    assert sorted(assignment.counts.tolist()) == [1, 1]


def test_identical_points_single_cluster():
    points = np.ones((5, 3))
    model, _ = kmeans_fit(points, 1, seed=0)
    assert model.final_sse == 0.0
    np.testing.assert_array_equal(model.centroids, [[1.0, 1.0, 1.0]])


def test_fit_matches_exhaustive_partition_search():
    points = np.array([[0.0], [0.3], [0.7], [5.0], [5.4], [6.1]])
    best = min(
        brute_force_sse(points, np.array(labels), 2)
        for labels in itertools.product((0, 1), repeat=len(points))
        if 0 < sum(labels) < len(points)
    )
    model, _ = kmeans_fit(points, 2, seed=11)
    assert model.final_sse == pytest.approx(best, abs=1e-12)


def test_sse_matches_double_loop(rng):
    points = rng.normal(size=(20, 3))
    model, assignment = kmeans_fit(points, 3, seed=2)
    oracle = 0.0
    for i, label in enumerate(assignment.labels):
        for j in range(points.shape[1]):
            oracle += (points[i, j] - model.centroids[label, j]) ** 2
    assert sse(model, points, assignment) == pytest.approx(oracle, rel=1e-12)
    assert model.final_sse == pytest.approx(brute_force_sse(points, assignment.labels, 3), rel=1e-12)


def test_sse_history_never_increases(rng):
    model, _ = kmeans_fit(rng.normal(size=(40, 2)), 4, seed=5)
    history = model.sse_history
    assert all(b <= a + 1e-9 * (1 + abs(a)) for a, b in zip(history, history[1:]))


def test_fit_is_deterministic_for_a_seed(rng):
    points = rng.normal(size=(30, 4))
    first, _ = kmeans_fit(points, 3, seed=9)
    second, _ = kmeans_fit(points, 3, seed=9)
    np.testing.assert_array_equal(first.centroids, second.centroids)


def test_predict_ties_go_to_lowest_cluster():
    model = KMeansModel(centroids=np.array([[0.0], [2.0]]))
    assert kmeans_predict(model, np.array([1.0])) == 0
    assert kmeans_predict(model, np.array([1.5])) == 1


def test_predict_reproduces_training_labels():
    points, _ = planted_blobs(3, 10, seed=4)
    model, assignment = kmeans_fit(points, 3, seed=1)
    np.testing.assert_array_equal(predict_labels(model, points), assignment.labels)


def test_more_clusters_than_points_is_rejected():
    with pytest.raises(ContractError):
        kmeans_fit(np.zeros((2, 2)), 3)
    with pytest.raises(ContractError):
        kmeans_fit(np.zeros((2, 2)), 0)


def test_service_wraps_setup_failures():
    with pytest.raises(SetupError):
        ClusteringService(seed=0).fit(np.zeros((2, 2)), 3)


def test_fewer_distinct_points_than_clusters_is_a_setup_error():
    points = np.array([[0.0, 0.0]] * 3 + [[1.0, 1.0]] * 3)
    with pytest.raises(SetupError, match="2 distinct points"):
        kmeans_fit(points, 3, seed=0)
    with pytest.raises(SetupError):
        ClusteringService(seed=0).fit(points, 3)
    model, assignment = kmeans_fit(points, 2, seed=0)
    np.testing.assert_array_equal(predict_labels(model, points), assignment.labels)
    assert sorted(assignment.counts.tolist()) == [3, 3]


def test_elbow_falls_back_to_two_without_positive_curvature(monkeypatch, caplog):
    def straight_line_fit(points, k, seed=0, n_init=None):
        return KMeansModel(centroids=np.zeros((k, 2)), final_sse=10.0 - k), None

    monkeypatch.setattr(clustering_service, "kmeans_fit", straight_line_fit)
    with caplog.at_level(logging.WARNING, logger=clustering_service.__name__):
        report = elbow_select(np.zeros((6, 2)), k_max=5, n_jobs=1)
    assert report.selected_k == 2
    assert all(value == 0.0 for value in report.curvature.values())
    assert "no positive curvature" in caplog.text


def test_single_group_routes_everything_to_zero(rng):
    model, assignment = ClusteringService(seed=0).single_group(rng.normal(size=(7, 3)))
    assert model.k == 1
    assert assignment.labels.tolist() == [0] * 7


def test_elbow_needs_k_max_of_three():
    with pytest.raises(ContractError):
        elbow_select(np.zeros((10, 2)), k_max=2)


@pytest.mark.parametrize("n_centers", [3, 4])
def test_elbow_finds_planted_cluster_count(n_centers):
    points, _ = planted_blobs(n_centers, 30, seed=n_centers)
    report = elbow_select(points, k_max=8, seed=0)
    assert report.selected_k == n_centers
    assert report.ks == list(range(1, 9))
    assert report.monotonic
    assert set(report.curvature) == set(range(2, 8))


def test_elbow_report_csv(tmp_path):
    points, _ = planted_blobs(3, 10, seed=1)
    report = elbow_select(points, k_max=5, seed=0)
    path = tmp_path / "elbow.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,sse,curvature"
    assert len(lines) == 6
    # Curvature is undefined at both ends of the curve.
    assert lines[1].endswith(",")
    assert lines[-1].endswith(",")


def test_kmeans_file_round_trip(tmp_path, rng):
    model, _ = kmeans_fit(rng.normal(size=(12, 3)), 2, seed=3)
    path = tmp_path / "clustering.txt"
    save_kmeans(model, path)
    loaded = load_kmeans(path)
    np.testing.assert_array_equal(loaded.centroids, model.centroids)
    assert loaded.seed == 3


def test_kmeans_file_with_missing_centroid(tmp_path):
    path = tmp_path / "clustering.txt"
    path.write_text("MOCE-KMEANS v1 2 2 0\n0.0 1.0\n")
    with pytest.raises(DataFormatError):
        load_kmeans(path)


def test_assignment_counts():
    assignment = ClusterAssignment.from_labels(np.array([0, 2, 2]), 4)
    assert assignment.counts.tolist() == [1, 0, 2, 0]


def test_fit_matches_exhaustive_search_on_random_instances():
    hits = 0
    for seed in range(10):
        points = np.random.default_rng(seed).uniform(0.0, 1.0, size=(6, 2))
        best = min(
            brute_force_sse(points, np.array(labels), 2)
            for labels in itertools.product((0, 1), repeat=6)
            if 0 < sum(labels) < 6
        )
        model, _ = kmeans_fit(points, 2, seed=seed)
        hits += model.final_sse <= best + 1e-12
    assert hits >= 8


@pytest.mark.slow
@pytest.mark.parametrize("n_centers", [3, 4])
def test_elbow_recovery_across_seeds(n_centers):
    hits = 0
    for seed in range(10):
        points, _ = planted_blobs(n_centers, 200 // n_centers, seed=seed)
        hits += elbow_select(points, k_max=8, seed=seed).selected_k == n_centers
    assert hits >= 9
