import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_unit
from trdyn.dynamics import DynamicsParams, to_equivalent
from trdyn.errors import ConfigError, DataError
from trdyn.geometry import rodrigues
from trdyn.scenes import benchmark_spec, generate_scene, motion_params
from trdyn.segmentation import (cluster_residuals, kabsch, kmeans, label_colors, motion_features,
                                read_labels_csv, seg_metrics, select_k, silhouette, write_labels_csv)


def params(v, w):
    v = np.atleast_2d(np.asarray(v, dtype=float))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return DynamicsParams(v, np.zeros_like(v), w, np.zeros_like(w))


class TestFeatures:
    def test_static(self):
        assert np.array_equal(motion_features(params([0, 0, 0], [0, 0, 0])), np.zeros((1, 8)))

    def test_norm_arithmetic(self):
        assert np.array_equal(motion_features(params([3, 4, 0], [0, 0, 0]))[0], [5, 3, 4, 0, 0, 0, 0, 0])

    def test_rotation(self):
        f = motion_features(params([0, 0, 0], [0, 0, 2]))[0]
        assert f[4] == 2 and np.array_equal(f[5:], [0, 0, 1])

    def test_tiny_rotation_has_zero_axis(self):
        assert np.array_equal(motion_features(params([0, 0, 0], [1e-10, 0, 0]))[0, 5:], [0, 0, 0])

    def test_standardize(self, rng):
        f = motion_features(params(rng.normal(size=(50, 3)), rng.normal(size=(50, 3))), standardize=True)
        assert np.allclose(f.mean(axis=0), 0, atol=1e-12) and np.allclose(f.std(axis=0), 1)

    def test_non_finite(self):
        with pytest.raises(DataError):
            motion_features(params([np.nan, 0, 0], [0, 0, 0]))

    def test_same_part_shares_features(self):
        ds = generate_scene(benchmark_spec("multipart", 90))
        t = float(ds.times[ds.split - 1])
        for lab, m in ds.part_motions.items():
            eq = to_equivalent(motion_params(m, t))
            n = int(np.sum(ds.labels == lab))
            f = motion_features(params(np.tile(eq.v_bar_c, (n, 1)), np.tile(eq.w_p, (n, 1))))
            assert np.ptp(f, axis=0).max() == 0.0


class TestKmeans:
    def test_single_cluster(self, rng):
        X = rng.normal(size=(20, 8))
        r = kmeans(X, 1)
        assert not r.labels.any() and np.allclose(r.centroids[0], X.mean(axis=0))
        assert r.inertia == pytest.approx(np.sum((X - X.mean(axis=0)) ** 2))

    def test_separable(self, rng):
        X = np.concatenate([rng.normal(scale=0.01, size=(15, 8)), 10 + rng.normal(scale=0.01, size=(25, 8))])
        r = kmeans(X, 2, seed=3)
        assert np.array_equal(r.labels, [0] * 15 + [1] * 25)

    def test_ground_truth_parameters(self):
        ds = generate_scene(benchmark_spec("multipart", 150))
        t = float(ds.times[ds.split - 1])
        v = np.zeros((ds.n_particles, 3))
        w = np.zeros((ds.n_particles, 3))
        for lab, m in ds.part_motions.items():
            eq = to_equivalent(motion_params(m, t))
            v[ds.labels == lab], w[ds.labels == lab] = eq.v_bar_c, eq.w_p
        r = kmeans(motion_features(params(v, w)), 3)
        assert seg_metrics(r.labels, ds.labels)["accuracy"] == 1.0

    def test_deterministic(self, rng):
        X = rng.normal(size=(60, 8))
        a, b = kmeans(X, 4, seed=5), kmeans(X, 4, seed=5)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)

    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, s):
        rng = np.random.default_rng(s)
        X = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        a = kmeans(X, 3, seed=1, ids=np.arange(40))
        b = kmeans(X[perm], 3, seed=1, ids=perm)
        assert np.array_equal(a.labels[perm], b.labels)

    def test_labels_canonical(self, rng):
        X = np.concatenate([10 + rng.normal(size=(5, 2)), rng.normal(size=(5, 2))])
        r = kmeans(X, 2)
        assert r.labels[0] == 0 and set(r.labels) == {0, 1}

    def test_errors(self, rng):
        with pytest.raises(DataError):
            kmeans(rng.normal(size=(2, 8)), 3)
        with pytest.raises(ConfigError):
            kmeans(rng.normal(size=(2, 8)), 0)
        with pytest.raises(DataError):
            kmeans(np.zeros((0, 8)), 1)

    def test_duplicate_points(self):
        r = kmeans(np.zeros((6, 8)), 3)
        assert np.all(r.labels < r.k) and r.inertia == 0.0

    def test_select_k(self, rng):
        centers = np.array([[0, 0], [5, 0], [0, 5], [5, 5]], dtype=float)
        X = np.concatenate([c + 0.05 * rng.normal(size=(10, 2)) for c in centers])
        r = select_k(X, k_range=(2, 6))
        assert r.k == 4 and silhouette(X, r.labels) > 0.9


class TestKabsch:
    def test_identity(self, rng):
        P = rng.normal(size=(10, 3))
        f = kabsch(P, P)
        assert np.allclose(f.R, np.eye(3), atol=1e-12) and f.residual < 1e-12 and not f.degenerate

    def test_quarter_turn(self, rng):
        P = rng.normal(size=(12, 3))
        R = rodrigues(np.array([0.0, 0.0, 1.0]), np.pi / 2)
        f = kabsch(P, P @ R.T + [1.0, 2.0, 3.0])
        assert np.allclose(f.R, R, atol=1e-9) and np.allclose(f.T, [1, 2, 3], atol=1e-9)

    def test_noisy_rotation(self, rng):
        sigma = 1e-3
        out = []
        for _ in range(30):
            P = rng.normal(size=(200, 3))
            R = rodrigues(random_unit(rng, 1)[0], rng.uniform(0, np.pi))
            f = kabsch(P, P @ R.T + sigma * rng.normal(size=P.shape))
            assert np.linalg.det(f.R) == pytest.approx(1.0)
            out.append(f.residual)
        expect = sigma * np.sqrt(3)
        assert expect / 3 < np.mean(out) < 3 * expect

    def test_reflection_avoided(self, rng):
        P = rng.normal(size=(10, 3))
        f = kabsch(P, P * [1, 1, -1])
        assert np.linalg.det(f.R) == pytest.approx(1.0)

    def test_weights_ignore_outlier(self, rng):
        P = rng.normal(size=(10, 3))
        Q = P.copy()
        Q[0] += 5.0
        w = np.ones(10)
        w[0] = 0.0
        assert kabsch(P, Q, w).residual < 1e-12

    @pytest.mark.parametrize("n", [1, 2])
    def test_degenerate_few_points(self, rng, n):
        P = rng.normal(size=(n, 3))
        f = kabsch(P, P + 1.0)
        assert f.degenerate and np.array_equal(f.R, np.eye(3))

    def test_degenerate_collinear(self):
        P = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        f = kabsch(P, P)
        spread = np.sqrt(np.mean(np.sum((P - P.mean(axis=0)) ** 2, axis=1)))
        assert f.degenerate and f.residual == pytest.approx(spread)

    def test_benchmark_cluster_residuals(self):
        ds = generate_scene(benchmark_spec("indoor", 120))
        res = cluster_residuals(ds.labels, ds.positions[0], ds.positions[ds.n_frames // 2])
        assert max(res.values()) < 1e-3 * ds.diameter()


def brute_force_miou(pred, gt):
    """Best mean IoU over all injective assignments of predicted to GT labels."""
    g_ids, p_ids = np.unique(gt), np.unique(pred)
    best = 0.0
    for perm in itertools.permutations(p_ids, min(len(p_ids), len(g_ids))):
        tot = 0.0
        for g, p in zip(g_ids, perm):
            a, b = gt == g, pred == p
            tot += np.sum(a & b) / np.sum(a | b)
        best = max(best, tot / len(g_ids))
    return best


class TestMetrics:
    def test_identical(self):
        gt = np.array([0, 0, 1, 1, 2])
        assert seg_metrics(gt, gt) == {"accuracy": 1.0, "mIoU": 1.0, "RandIndex": 1.0}

    def test_permuted(self):
        gt = np.array([0, 0, 1, 1, 2, 2, 2])
        assert seg_metrics(np.array([7, 7, 3, 3, 0, 0, 0]), gt) == {"accuracy": 1.0, "mIoU": 1.0,
                                                                    "RandIndex": 1.0}

    def test_half_of_one_part_mislabeled(self):
        gt = np.array([0] * 50 + [1] * 50)
        pred = np.array([0] * 75 + [1] * 25)
        m = seg_metrics(pred, gt)
        assert m["accuracy"] == 0.75
        assert m["mIoU"] == pytest.approx(brute_force_miou(pred, gt), abs=1e-15)
        assert m["mIoU"] == pytest.approx((50 / 75 + 25 / 50) / 2)

    @given(st.integers(0, 10_000))
    def test_against_brute_force(self, s):
        rng = np.random.default_rng(s)
        gt = rng.integers(0, 3, size=30)
        pred = rng.integers(0, 4, size=30)
        assert seg_metrics(pred, gt)["mIoU"] == pytest.approx(brute_force_miou(pred, gt), abs=1e-12)

    def test_rand_index(self):
        # pairs: (0,1) same/same, (0,2) diff/same, (1,2) diff/same -> 1 of 3 agree
        assert seg_metrics(np.array([0, 0, 0]), np.array([0, 0, 1]))["RandIndex"] == pytest.approx(1 / 3)

    def test_errors(self):
        with pytest.raises(DataError):
            seg_metrics(np.array([]), np.array([]))
        with pytest.raises(DataError):
            seg_metrics(np.array([0, 1]), np.array([0]))


class TestLabelsFile:
    def test_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 4, size=25)
        p = write_labels_csv(tmp_path / "l.csv", labels)
        assert np.array_equal(read_labels_csv(p), labels)
        assert p.read_text().splitlines()[0] == "particle_id,label"

    @pytest.mark.parametrize("text", ["id,label\n0,1\n", "particle_id,label\n0,x\n", "particle_id,label\n1,0\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "l.csv").write_text(text)
        with pytest.raises(DataError):
            read_labels_csv(tmp_path / "l.csv")

    def test_colors_distinct(self):
        c = label_colors(np.arange(6))
        assert c.shape == (6, 3) and len({tuple(np.round(x, 6)) for x in c}) == 6
