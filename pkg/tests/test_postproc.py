import unittest
from collections import deque

import numpy as np

from src.vessel_refine.errors import ConfigError
from src.vessel_refine.postproc import (
    PostprocConfig,
    between_class_variance,
    connected_components,
    otsu_bin_indices,
    otsu_threshold,
    postprocess,
    remove_small,
)
from src.vessel_refine.raster import LabelMap, ProbMap


def scan_best_split(idx, bins):
    best_k, best = None, -1.0
    flat = idx.ravel()
    for k in range(1, bins):
        low, high = flat[flat < k], flat[flat >= k]
        if low.size == 0 or high.size == 0:
            continue
        score = low.size * high.size * (low.mean() - high.mean()) ** 2
        if score > best + 1e-9 * max(1.0, best):
            best_k, best = k, score
    return best_k


def scan_split_scores(idx, bins):
    """Between-class score for every split 1..bins-1, computed from the pixels; -1 when a side is empty."""
    flat = idx.ravel()
    scores = []
    for k in range(1, bins):
        low, high = flat[flat < k], flat[flat >= k]
        if low.size == 0 or high.size == 0:
            scores.append(-1.0)
            continue
        scores.append(float(low.size * high.size * (low.mean() - high.mean()) ** 2))
    return scores


def random_prob_map(rng, trial):
    shape = tuple(rng.integers(1, 17, 2))
    kind = trial % 4
    if kind == 0:
        return rng.random(shape)
    if kind == 1:
        fg = rng.random(shape) < rng.uniform(0.05, 0.5)
        return np.clip(np.where(fg, rng.normal(0.75, 0.1, shape), rng.normal(0.2, 0.1, shape)), 0.0, 1.0)
    if kind == 2:
        return rng.integers(0, 5, shape) / 4.0
    return np.full(shape, rng.random())


def flood_fill_labels(v, connectivity):
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    h, w = v.shape
    labels = np.zeros(v.shape, dtype=np.int64)
    current = 0
    for i in range(h):
        for j in range(w):
            if not v[i, j] or labels[i, j]:
                continue
            current += 1
            labels[i, j] = current
            queue = deque([(i, j)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and v[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        queue.append((ny, nx))
    return labels, current


def same_partition(a, b):
    """True when two label arrays differ only by a renaming of their IDs."""
    if not np.array_equal(a == 0, b == 0):
        return False
    pairs = set(zip(a[a > 0].tolist(), b[b > 0].tolist()))
    return len(pairs) == len({p for p, _ in pairs}) == len({q for _, q in pairs})


def random_map(rng, max_side=40):
    h, w = rng.integers(1, max_side + 1, 2)
    return (rng.random((h, w)) < rng.uniform(0.1, 0.8)).astype(np.uint8)


class TestOtsu(unittest.TestCase):
    def test_two_level_map(self):
        data = np.full((10, 10), 0.1)
        data[:, 5:] = 0.9
        threshold, binary = otsu_threshold(ProbMap(data))
        self.assertAlmostEqual(threshold, 26 / 256)
        np.testing.assert_array_equal(binary.data, (data > 0.5).astype(np.uint8))

    def test_constant_map(self):
        threshold, binary = otsu_threshold(ProbMap(np.full((6, 6), 0.7)))
        self.assertAlmostEqual(threshold, 0.7)
        self.assertFalse(binary.data.any())

    def test_bin_edges_right_closed(self):
        idx = otsu_bin_indices(np.array([0.0, 1 / 256, 1.5 / 256, 0.5, 1.0]), 256)
        np.testing.assert_array_equal(idx, [0, 0, 1, 127, 255])

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            bins = int(rng.choice([8, 32, 256]))
            data = np.clip(np.concatenate([
                rng.normal(0.25, 0.08, 200), rng.normal(0.7, 0.1, 120 + trial),
            ]), 0, 1).reshape(1, -1)
            threshold, binary = otsu_threshold(ProbMap(data), bins)
            idx = otsu_bin_indices(data, bins)
            k = scan_best_split(idx, bins)
            self.assertAlmostEqual(threshold, k / bins)
            np.testing.assert_array_equal(binary.data, (idx >= k).astype(np.uint8))

    def test_matches_exhaustive_scan_on_random_maps(self):
        rng = np.random.default_rng(11)
        for trial in range(1000):
            data = random_prob_map(rng, trial)
            threshold, binary = otsu_threshold(ProbMap(data))
            scores = scan_split_scores(otsu_bin_indices(data, 256), 256)
            np.testing.assert_array_equal(binary.data, (data > threshold).astype(np.uint8))
            if max(scores) < 0:
                self.assertEqual(threshold, float(data.max()))
                self.assertFalse(binary.data.any())
                continue
            k = int(round(threshold * 256))
            best = max(scores)
            self.assertGreaterEqual(scores[k - 1], best - 1e-9 * best, f"map {trial}")

    def test_monotone_in_the_map(self):
        rng = np.random.default_rng(12)
        for trial in range(200):
            data = random_prob_map(rng, trial)
            threshold, binary = otsu_threshold(ProbMap(data))
            raised = np.clip(data + rng.random(data.shape) * (rng.random(data.shape) < 0.3), 0.0, 1.0)
            self.assertTrue(np.all(otsu_bin_indices(raised, 256) >= otsu_bin_indices(data, 256)))
            self.assertTrue(np.all((raised > threshold) >= binary.data.astype(bool)))

    def test_variance_marks_empty_splits(self):
        hist = np.array([0, 5, 0, 5])
        var = between_class_variance(hist)
        self.assertEqual(var[0], -1.0)
        self.assertGreater(var[1], 0)
        self.assertEqual(var[1], var[2])

    def test_bins_validated(self):
        with self.assertRaises(ConfigError):
            otsu_threshold(ProbMap(np.zeros((2, 2))), bins=1)


class TestComponents(unittest.TestCase):
    def test_diagonal_pixels(self):
        v = LabelMap(np.array([[1, 0], [0, 1]]))
        self.assertEqual(connected_components(v, 4).count, 2)
        self.assertEqual(connected_components(v, 8).count, 1)

    def test_flood_fill_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(500):
            v = random_map(rng, max_side=64)
            for conn in (4, 8):
                cc = connected_components(LabelMap(v), conn)
                expected, count = flood_fill_labels(v, conn)
                self.assertEqual(cc.count, count)
                self.assertTrue(same_partition(cc.labels, expected), f"map {trial}, connectivity {conn}")
                self.assertEqual(cc.labels.shape, v.shape)

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            v = random_map(rng)
            for conn in (4, 8):
                cc = connected_components(LabelMap(v), conn)
                self.assertTrue(np.all(cc.labels[v == 0] == 0))
                self.assertTrue(np.all(cc.labels[v == 1] >= 1))
                self.assertEqual(set(np.unique(cc.labels[v == 1]).tolist()), set(range(1, cc.count + 1)))
                self.assertEqual(int(cc.sizes.sum()), int(v.sum()))
                self.assertTrue(np.all(cc.sizes > 0))

    def test_connectivity_validated(self):
        with self.assertRaises(ConfigError):
            connected_components(LabelMap(np.zeros((2, 2), dtype=np.uint8)), 6)


class TestRemoveSmall(unittest.TestCase):
    def setUp(self):
        v = np.zeros((40, 40), dtype=np.uint8)
        v[0, 0:3] = 1                 # 3 px
        v[5:8, 5:15] = 1              # 30 px
        v[20:40, 20:35] = 1           # 300 px
        self.v = LabelMap(v)

    def test_sizes(self):
        cc = connected_components(self.v)
        self.assertEqual(sorted(cc.sizes.tolist()), [3, 30, 300])
        kept = remove_small(self.v, 30)
        self.assertEqual(sorted(connected_components(kept).sizes.tolist()), [30, 300])
        kept = remove_small(self.v, 31)
        self.assertEqual(int(kept.data.sum()), 300)

    def test_idempotent(self):
        once = remove_small(self.v, 31)
        np.testing.assert_array_equal(remove_small(once, 31).data, once.data)

    def test_result_is_subset_of_input(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            v = random_map(rng)
            min_size = int(rng.integers(0, 20))
            conn = int(rng.choice([4, 8]))
            kept = remove_small(LabelMap(v), min_size, conn).data
            self.assertFalse(np.any((kept == 1) & (v == 0)))
            survivors = connected_components(LabelMap(kept), conn)
            self.assertTrue(np.all(survivors.sizes >= min_size))
            np.testing.assert_array_equal(remove_small(LabelMap(kept), min_size, conn).data, kept)

    def test_zero_keeps_everything(self):
        np.testing.assert_array_equal(remove_small(self.v, 0).data, self.v.data)
        with self.assertRaises(ConfigError):
            remove_small(self.v, -1)


class TestPostprocess(unittest.TestCase):
    def test_min_size_scaling(self):
        cfg = PostprocConfig()
        self.assertEqual(cfg.min_size_for(256, 256), 30)
        self.assertEqual(cfg.min_size_for(512, 512), 120)
        self.assertEqual(cfg.min_size_for(32, 32), 1)
        self.assertEqual(PostprocConfig(scale_min_size=False).min_size_for(32, 32), 30)
        with self.assertRaises(ConfigError):
            PostprocConfig(connectivity=5)

    def test_speck_removed(self):
        data = np.full((64, 64), 0.05)
        data[10:50, 30:34] = 0.95
        data[2, 2] = 0.95
        result = postprocess(ProbMap(data), PostprocConfig(min_size=30, scale_min_size=False))
        self.assertEqual(result.removed_sizes, [1])
        self.assertEqual(int(result.binary.data.sum()), 161)
        self.assertEqual(int(result.cleaned.data.sum()), 160)
        self.assertEqual(result.min_size, 30)


if __name__ == "__main__":
    unittest.main()
