import math

import numpy as np
import pytest

from pcu4d import geometry
from pcu4d.geometry import Frame, FusedCloud, ball_query, fps, fuse, knn, normalize, split

import oracles


def random_cloud(rng, n, dims=3):
    return rng.uniform(-1, 1, size=(n, dims))


class TestNormalize:
    def test_single_point_degenerate(self):
        with pytest.warns(UserWarning, match="degenerate"):
            out, tf = normalize([Frame(np.array([[5.0, 5.0, 5.0]]), 0)])
        np.testing.assert_allclose(out[0].points, [[0, 0, 0]])
        np.testing.assert_allclose(tf.centroid, [5, 5, 5])
        assert tf.scale == 1.0

    def test_two_points_hand_computed(self):
        out, tf = normalize([Frame(np.array([[0.0, 0, 0], [2.0, 0, 0]]), 0)])
        np.testing.assert_allclose(out[0].points, [[-1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(tf.centroid, [1, 0, 0])
        assert tf.scale == pytest.approx(1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        frames = [Frame(random_cloud(rng, 17) * 3 + 5, i) for i in range(3)]
        out, tf = normalize(frames)
        for orig, norm in zip(frames, out):
            np.testing.assert_allclose(tf.invert(norm.points), orig.points,
                                       atol=1e-6)

    def test_unit_ball_tight(self):
        rng = np.random.default_rng(1)
        frames = [Frame(random_cloud(rng, 50) * 10, 0)]
        out, _ = normalize(frames)
        norms = np.linalg.norm(out[0].points, axis=1)
        assert norms.max() <= 1.0 + 1e-12
        assert norms.max() >= 1.0 - 1e-6


class TestFuse:
    def test_single_frame_t_is_one(self):
        f = Frame(np.zeros((4, 3)), 0)
        fused = fuse([f])
        assert len(fused) == 4
        np.testing.assert_array_equal(fused.points[:, 3], np.ones(4))

    def test_three_frames_t_levels(self):
        frames = [Frame(np.full((2, 3), float(i)), i) for i in range(3)]
        fused = fuse(frames)
        assert len(fused) == 6
        assert sorted(set(fused.points[:, 3])) == [0.0, 0.5, 1.0]

    def test_provenance_recovers_frame(self):
        rng = np.random.default_rng(2)
        frames = [Frame(random_cloud(rng, 5), i) for i in range(4)]
        fused = fuse(frames)
        np.testing.assert_array_equal(fused.xyz[fused.provenance == 2],
                                      frames[2].points)

    def test_split_is_inverse(self):
        rng = np.random.default_rng(3)
        frames = [Frame(random_cloud(rng, 6), i) for i in range(3)]
        parts = split(fuse(frames))
        for f, p in zip(frames, parts):
            np.testing.assert_array_equal(f.points, p)

    def test_mismatched_counts_rejected(self):
        with pytest.raises(ValueError, match="resample"):
            fuse([Frame(np.zeros((2, 3)), 0), Frame(np.zeros((3, 3)), 1)])


class TestKnn:
    def test_simple(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        nl = knn(pts, k=1, query_indices=[0])
        assert list(nl.neighbors[0]) == [1]

    def test_k_at_least_n_returns_all_others(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        nl = knn(pts, k=10)
        assert all(len(nb) == 2 for nb in nl.neighbors)

    def test_tie_break_lower_index(self):
        pts = np.array([[0.0, 0, 0], [0.0, 1, 0], [9.0, 9, 9], [1.0, 0, 0]])
        nl = knn(pts, k=1, query_indices=[0])
        assert list(nl.neighbors[0]) == [1]

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            knn(np.zeros((0, 3)), k=1)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 120))
        pts = random_cloud(rng, n, dims=4)
        k = int(rng.integers(1, 12))
        nl = knn(pts, k=k, metric_dims="xyzt")
        ref = oracles.knn_bruteforce(pts, k, metric_dims="xyzt")
        for got, want in zip(nl.neighbors, ref):
            assert list(got) == want

    def test_xyz_metric_ignores_t(self):
        pts = np.array([[0, 0, 0, 0.0], [0.1, 0, 0, 5.0], [0, 0.2, 0, 0.0]])
        nl = knn(pts, k=1, query_indices=[0], metric_dims="xyz")
        assert list(nl.neighbors[0]) == [1]
        nl4 = knn(pts, k=1, query_indices=[0], metric_dims="xyzt")
        assert list(nl4.neighbors[0]) == [2]


class TestBallQuery:
    def test_radius_filters(self):
        pts = np.array([[0.0, 0, 0], [0.4, 0, 0], [0.6, 0, 0]])
        nl = ball_query(pts, radius=0.5, max_neighbors=8, query_indices=[0])
        assert list(nl.neighbors[0]) == [1]

    def test_isolated_point_empty(self):
        pts = np.array([[0.0, 0, 0], [9.0, 0, 0]])
        nl = ball_query(pts, radius=0.5, max_neighbors=8, query_indices=[0])
        assert len(nl.neighbors[0]) == 0

    def test_truncation_keeps_nearest(self):
        pts = np.vstack([[0.0, 0, 0]] + [[0.1 * (i + 1), 0, 0] for i in range(5)])
        nl = ball_query(pts, radius=1.0, max_neighbors=3, query_indices=[0])
        assert list(nl.neighbors[0]) == [1, 2, 3]

    def test_strictly_within(self):
        pts = np.array([[0.0, 0, 0], [0.5, 0, 0]])
        nl = ball_query(pts, radius=0.5, max_neighbors=4, query_indices=[0])
        assert len(nl.neighbors[0]) == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce_both_paths(self, seed):
        rng = np.random.default_rng(100 + seed)
        # straddle the brute-force/grid threshold
        n = int(rng.integers(4, 200))
        pts = random_cloud(rng, n)
        radius = float(rng.uniform(0.05, 0.8))
        cap = int(rng.integers(1, 16))
        nl = ball_query(pts, radius=radius, max_neighbors=cap)
        ref = oracles.ball_bruteforce(pts, radius, cap)
        for got, want in zip(nl.neighbors, ref):
            assert list(got) == want


class TestFps:
    def test_square_corners(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
        nl = fps(pts, fraction=0.5)
        assert list(nl.center_indices) == [0, 3]
        # greedy matches the brute-force max-min optimum here
        best = oracles.fps_bruteforce(pts, 0.5)
        d_greedy = np.sum((pts[0] - pts[3]) ** 2)
        d_best = np.sum((pts[best[0]] - pts[best[1]]) ** 2)
        assert d_greedy == d_best

    def test_fraction_one_identity(self):
        pts = np.random.default_rng(4).uniform(size=(7, 3))
        nl = fps(pts, fraction=1.0)
        assert sorted(nl.center_indices) == list(range(7))

    def test_single_selection_is_seed(self):
        pts = np.random.default_rng(5).uniform(size=(9, 3))
        nl = fps(pts, fraction=0.01)
        assert list(nl.center_indices) == [0]

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bruteforce_greedy(self, seed):
        rng = np.random.default_rng(200 + seed)
        n = int(rng.integers(2, 40))
        pts = random_cloud(rng, n)
        frac = float(rng.uniform(0.1, 1.0))
        nl = fps(pts, fraction=frac)
        assert list(nl.center_indices) == oracles.fps_bruteforce(pts, frac)

    def test_permutation_stability(self):
        # relabeling that keeps the seed's label lowest yields the same
        # geometric subset once indices are mapped back
        rng = np.random.default_rng(7)
        pts = random_cloud(rng, 15)
        sel = fps(pts, fraction=0.4).center_indices
        perm = np.concatenate([[0], 1 + rng.permutation(14)])
        sel_p = fps(pts[perm], fraction=0.4).center_indices
        assert sorted(perm[sel_p]) == sorted(sel)

    def test_random_seed_rule(self):
        pts = np.random.default_rng(8).uniform(size=(10, 3))
        with pytest.raises(ValueError, match="rng"):
            fps(pts, fraction=0.5, seed_rule="random")
        rng = np.random.default_rng(9)
        nl = fps(pts, fraction=0.5, seed_rule="random", rng=rng)
        assert len(nl.center_indices) == 5


class TestInvariantsAndTypes:
    def test_frame_rejects_bad_input(self):
        with pytest.raises(ValueError):
            Frame(np.zeros((0, 3)), 0)
        with pytest.raises(ValueError):
            Frame(np.array([[np.nan, 0, 0]]), 0)
        with pytest.raises(ValueError):
            Frame(np.zeros((1, 3)), -1)

    def test_fused_invariants(self):
        frames = [Frame(np.ones((2, 3)) * i, i) for i in range(3)]
        fused = fuse(frames)
        assert fused.frame_count * fused.per_frame_count == len(fused)
        levels = np.unique(fused.points[:, 3])
        np.testing.assert_allclose(levels, [0.0, 0.5, 1.0])
        assert fused.points[fused.provenance == 2][0, 3] == 1.0  # newest at t=1

    def test_edges_helper(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        nl = knn(pts, k=2)
        centers, nbrs = nl.edges()
        assert len(centers) == len(nbrs) == 6
        assert centers[0] == 0

    def test_inputs_not_mutated(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        before = pts.copy()
        knn(pts, k=1)
        ball_query(pts, radius=1.0, max_neighbors=2)
        fps(pts, fraction=1.0)
        np.testing.assert_array_equal(pts, before)
