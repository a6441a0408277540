import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swaro.clustering import ClusterModel, assign_pseudo_labels, kmeans_fit


def brute_force_labels(z, c):
    out = []
    for row in z:
        best, best_d = 0, None
        for j, cj in enumerate(c):
            d = sum((a - b) ** 2 for a, b in zip(row, cj))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def test_k1_is_column_mean():
    z = np.random.default_rng(0).standard_normal((40, 3))
    m = kmeans_fit(z, 1, seed=0)
    assert np.allclose(m.centroids[0], z.mean(axis=0), atol=1e-12)


def test_two_blob_recovery():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((100, 2)) + [-10, 0]
    b = rng.standard_normal((100, 2)) + [10, 0]
    m = kmeans_fit(np.vstack([a, b]), 2, seed=0)
    means = [a.mean(axis=0), b.mean(axis=0)]
    for mu in means:
        assert min(np.linalg.norm(c - mu) for c in m.centroids) < 0.5


def test_identical_points_single_repair():
    z = np.tile([[1.0, 2.0]], (10, 1))
    m = kmeans_fit(z, 2, seed=0)
    assert m.repairs == 1
    assert np.allclose(m.centroids, [1.0, 2.0])
    assert m.inertia == 0.0


def test_n_less_than_k_rejected():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((2, 2)), 3)


def test_inertia_matches_assignments():
    z = np.random.default_rng(2).standard_normal((60, 4))
    m = kmeans_fit(z, 5, seed=3)
    lab = assign_pseudo_labels(m, z).labels
    recomputed = float(np.sum((z - m.centroids[lab]) ** 2))
    assert m.inertia == pytest.approx(recomputed, rel=1e-12)


def test_history_is_monotone():
    z = np.random.default_rng(3).standard_normal((200, 3))
    m = kmeans_fit(z, 8, max_iters=100, tol=0, seed=1)
    h = np.array(m.history + (m.inertia,))
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_label_at_centroid():
    c = np.arange(15.0).reshape(5, 3)
    m = ClusterModel(c, 0.0, 0)
    assert assign_pseudo_labels(m, c[3]).labels.tolist() == [3]


def test_tie_breaks_to_lowest():
    c = np.array([[0.0, 5.0], [-1.0, 0.0], [0.0, 7.0], [9.0, 9.0], [1.0, 0.0]])
    m = ClusterModel(c, 0.0, 0)
    assert assign_pseudo_labels(m, [0.0, 0.0]).labels.tolist() == [1]


def test_assignment_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((150, 6))
    m = kmeans_fit(z, 10, seed=0)
    assert np.array_equal(assign_pseudo_labels(m, z).labels, brute_force_labels(z, m.centroids))


def test_width_mismatch():
    m = ClusterModel(np.zeros((2, 3)), 0.0, 0)
    with pytest.raises(ValueError):
        assign_pseudo_labels(m, np.zeros((4, 2)))


def test_refit_assignment_is_idempotent():
    z = np.random.default_rng(5).standard_normal((80, 2))
    m = kmeans_fit(z, 4, seed=2)
    first = assign_pseudo_labels(m, z).labels
    again = assign_pseudo_labels(m, z).labels
    assert np.array_equal(first, again)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_row_order_invariance(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((40, 3))
    perm = rng.permutation(40)
    a = kmeans_fit(z, 4, seed=7)
    b = kmeans_fit(z[perm], 4, seed=7)
    assert abs(a.inertia - b.inertia) <= 1e-9
