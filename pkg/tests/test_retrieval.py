"""Retrieval ranking, PR-AUC against per-cutoff oracles, average images and heat maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpe.data.loader import load_dataset
from vpe.model import VPE, VpeConfig
from vpe.retrieval import (average_image, distance_heatmap, evaluate_retrieval, pr_auc,
                           render_heatmap, retrieve, write_retrieval)


def cutoff_oracle(relevant):
    """Precision and recall at every cutoff by explicit counting, then the area."""
    relevant = list(relevant)
    total = sum(relevant)
    area, prev_recall = 0.0, 0.0
    for k in range(1, len(relevant) + 1):
        hits = sum(relevant[:k])
        precision, recall = hits / k, hits / total
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def expected_random_ap(n, p):
    """Mean of the area over uniformly random rankings with p positives among n."""
    return sum((1 + (k - 1) * (p - 1) / (n - 1)) / k for k in range(1, n + 1)) / n


class TestRetrieve:
    def test_self_first(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((20, 5))
        r = retrieve(g[7], g, [f"i{j:02d}" for j in range(20)], np.zeros(20, int), 0)
        assert r.ids[0] == "i07" and r.distances[0] == 0.0

    def test_reversal_stable(self):
        rng = np.random.default_rng(1)
        g = np.round(rng.standard_normal((30, 2)), 1)   # forces ties
        g[5] = g[9]
        ids = [f"i{j:02d}" for j in range(30)]
        a = retrieve(np.zeros(2), g, ids, np.zeros(30, int), 0)
        b = retrieve(np.zeros(2), g[::-1], ids[::-1], np.zeros(30, int), 0)
        assert a.ids == b.ids
        assert np.all(np.diff(a.distances) >= 0)

    def test_matches_naive_sort(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((1000, 10))
        q = rng.standard_normal(10)
        ids = [f"{j:04d}" for j in range(1000)]
        r = retrieve(q, g, ids, np.zeros(1000, int), 0)
        naive = sorted(ids, key=lambda i: (float(np.sqrt(((g[int(i)] - q) ** 2).sum())), i))
        assert list(r.ids) == naive

    def test_empty_gallery_rejected(self):
        with pytest.raises(ValueError):
            retrieve(np.zeros(2), np.zeros((0, 2)), [], [], 0)


class TestPrAuc:
    def test_perfect_is_exactly_one(self):
        assert pr_auc(np.array([1, 1, 1, 0, 0, 0, 0], bool)) == 1.0

    @pytest.mark.parametrize("n", [1, 2, 7, 50])
    def test_single_last(self, n):
        rel = np.zeros(n, bool)
        rel[-1] = True
        assert pr_auc(rel) == pytest.approx(1 / n, abs=1e-15)

    def test_zero_positives_rejected(self):
        with pytest.raises(ValueError, match="no positives"):
            pr_auc(np.zeros(5, bool))

    def test_matches_cutoff_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            rel = rng.random(50) < rng.uniform(0.05, 0.6)
            rel[rng.integers(50)] = True
            assert abs(pr_auc(rel) - cutoff_oracle(rel)) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((40, 3))
        labels = rng.integers(0, 3, 40)
        labels[0] = 1
        ids = [f"{j:02d}" for j in range(40)]
        q = rng.standard_normal(3)
        a = pr_auc(retrieve(q, g, ids, labels, 1))
        # scaling the space is a strictly monotone map of every distance
        b = pr_auc(retrieve(q * 4.0, g * 4.0, ids, labels, 1))
        assert a == b

    def test_random_rankings_expectation(self):
        rng = np.random.default_rng(3)
        n, p, trials = 40, 8, 20_000
        base = np.zeros(n, bool)
        base[:p] = True
        vals = np.array([pr_auc(rng.permutation(base)) for _ in range(trials)])
        assert abs(vals.mean() - expected_random_ap(n, p)) <= 3 * vals.std() / np.sqrt(trials)

    def test_random_expectation_near_positive_fraction(self):
        # the closed form approaches p/n for large galleries
        assert expected_random_ap(20_000, 2_000) == pytest.approx(0.1, abs=2e-3)


class TestAverageImage:
    def ranking(self, n):
        return retrieve(np.zeros(1), np.arange(n, dtype=float)[:, None],
                        [f"{i}" for i in range(n)], np.zeros(n, int), 0)

    def test_identical_images(self):
        img = np.random.default_rng(0).random((3, 4, 4))
        out = average_image(self.ranking(3), 3, {str(i): img for i in range(3)})
        np.testing.assert_allclose(out, img, rtol=0, atol=1e-15)

    def test_black_and_white(self):
        src = {"0": np.zeros((1, 2, 2)), "1": np.ones((1, 2, 2))}
        np.testing.assert_array_equal(average_image(self.ranking(2), 2, src), np.full((1, 2, 2), 0.5))

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            average_image(self.ranking(2), 3, {})


class TestHeatmap:
    def test_zero_diagonal(self):
        protos = {i: np.random.default_rng(i).standard_normal(4) for i in range(3)}
        reals = {i: np.stack([v, v]) for i, v in protos.items()}
        m = distance_heatmap(reals, protos, normalize=False)
        assert np.all(np.diag(m.values) == 0) and np.all(m.values >= 0)

    def test_columns_normalized_order_preserved(self):
        rng = np.random.default_rng(1)
        protos = {i: rng.standard_normal(4) for i in range(4)}
        reals = {i: rng.standard_normal((5, 4)) for i in range(4)}
        raw = distance_heatmap(reals, protos, normalize=False)
        norm = distance_heatmap(reals, protos, normalize=True)
        np.testing.assert_allclose(norm.values.sum(axis=0), 1.0, atol=1e-9)
        for j in range(4):
            assert np.array_equal(np.argsort(raw.values[:, j]), np.argsort(norm.values[:, j]))

    def test_render_with_bands(self):
        m = distance_heatmap({0: np.zeros((1, 2)), 1: np.ones((1, 2))},
                             {0: np.zeros(2), 1: np.ones(2)})
        img = render_heatmap(m, {0: "a", 1: "b"}, cell=4, band=2)
        assert img.shape == (3, 11, 11) and img.min() >= 0 and img.max() <= 1


class TestEvaluateRetrieval:
    def test_outputs(self, tiny_bench, tmp_path):
        ds = load_dataset(tiny_bench, 16)
        model = VPE(VpeConfig.toy(), seed=0)
        x = ds.images(ds.train_items())
        model.loss_and_grad(x, x, rng=np.random.default_rng(0))
        report = evaluate_retrieval(model, ds, "unseen", top_k=100)
        assert report.top_k == 20 and len(report.auc) == 2
        assert all(0 < v <= 1 for v in report.auc.values())
        for img in report.averages.values():
            assert img.min() >= 0 and img.max() <= 1
        write_retrieval(report, ds, tmp_path)
        for name in ("rankings.csv", "auc.csv", "heatmap.csv", "heatmap.png"):
            assert (tmp_path / name).is_file()
        assert len(list((tmp_path / "average_images").glob("*.png"))) == 2
