"""Nearest-prototype classification, its brute-force oracle and the protocols."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from vpe.data.loader import load_dataset
from vpe.errors import DataError
from vpe.model import VPE, VpeConfig
from vpe.oneshot import (EvalProtocol, SupportSet, brute_force_nn_oracle, build_support, classify,
                         evaluate, nearest, score)


def support(points, labels=None):
    labels = list(range(len(points))) if labels is None else labels
    return SupportSet.from_pairs(labels, np.asarray(points, dtype=np.float64))


class TestClassify:
    def test_nearest_of_two(self):
        assert classify([[0.1, 0.0]], support([[0, 0], [1, 0]]))[0] == 0

    def test_exact_match(self):
        s = support([[0, 0], [1, 0], [5, 5]])
        assert classify([[5.0, 5.0]], s)[0] == 2

    def test_tie_goes_to_lower_label(self):
        s = support([[1, 0], [0, 0]], labels=[7, 3])
        assert classify([[0.5, 0.0]], s)[0] == 3

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nearest([[0.0]], np.zeros((0, 1)), [])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            classify([[0.0, 1.0, 2.0]], support([[0, 0]]))

    def test_duplicate_support_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            SupportSet.from_pairs([1, 1], np.zeros((2, 3)))

    def test_agrees_with_oracle(self):
        rng = np.random.default_rng(0)
        s = support(rng.standard_normal((50, 300)))
        q = rng.standard_normal((1000, 300))
        assert classify(q, s).tolist() == brute_force_nn_oracle(q, s)

    def test_oracle_single_class_and_tie(self):
        assert brute_force_nn_oracle([[3.0]], support([[0.0]])) == [0]
        assert brute_force_nn_oracle([[0.5]], support([[1.0], [0.0]], [9, 4])) == [4]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rigid_and_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((6, 4))
        q = rng.standard_normal((20, 4))
        base = classify(q, support(pts))
        rot = special_ortho_group.rvs(4, random_state=seed)
        shift = rng.standard_normal(4)
        moved = classify(q @ rot.T + shift, support(pts @ rot.T + shift))
        scaled = classify(q * 3.5, support(pts * 3.5))
        # rotation perturbs distances at the ulp level; only clear-cut queries must agree
        d = np.sort(((q[:, None] - pts[None]) ** 2).sum(-1), axis=1)
        clear = d[:, 1] - d[:, 0] > 1e-9
        assert np.array_equal(base[clear], moved[clear])
        assert np.array_equal(base, scaled)

    def test_duplicate_rows_of_same_class_harmless(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((5, 3))
        q = rng.standard_normal((50, 3))
        labels = np.arange(5)
        base, _ = nearest(q, pts, labels)
        dup, _ = nearest(q, np.vstack([pts, pts[:2]]), np.concatenate([labels, labels[:2]]))
        assert np.array_equal(base, dup)


class TestScore:
    def test_oracle_embeddings_perfect(self):
        rng = np.random.default_rng(0)
        protos = rng.standard_normal((10, 8))
        labels = rng.integers(0, 10, size=200)
        report = score([f"q{i}" for i in range(200)], protos[labels], labels, support(protos), "all")
        assert report.accuracy == 1.0

    def test_random_embeddings_chance(self):
        rng = np.random.default_rng(1)
        c, n = 10, 20_000
        report = score(list(range(n)), rng.standard_normal((n, 16)), rng.integers(0, c, n),
                       support(rng.standard_normal((c, 16))), "all")
        p = 1 / c
        assert abs(report.accuracy - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_missing_query_class_rejected(self):
        with pytest.raises(DataError, match="absent"):
            score(["a"], np.zeros((1, 2)), [5], support([[0, 0]]), "all")

    def test_report_consistency(self):
        rng = np.random.default_rng(2)
        report = score(list(range(100)), rng.standard_normal((100, 4)), rng.integers(0, 3, 100),
                       support(rng.standard_normal((3, 4))), "all")
        correct = sum(r["correct"] for r in report.per_class.values())
        assert report.accuracy == correct / report.n_queries
        assert sum(sum(v.values()) for v in report.confusion.values()) == 100


@pytest.fixture(scope="module")
def setup(tiny_bench):
    ds = load_dataset(tiny_bench, 16)
    model = VPE(VpeConfig.toy(), seed=0)
    x = ds.images(ds.train_items())
    model.loss_and_grad(x, x, rng=np.random.default_rng(0))
    return ds, model


class TestEvaluate:

    def test_protocol_shapes(self, setup):
        ds, model = setup
        all_ = evaluate(model, ds, "all")
        unseen = evaluate(model, ds, "unseen")
        mixed = evaluate(model, ds, "mixed")
        assert (all_.n_support, unseen.n_support, mixed.n_support) == (6, 2, 6)
        assert unseen.n_queries == mixed.n_queries == 20
        assert all_.n_queries == 28
        for r in (all_, unseen, mixed):
            assert 0 <= r.accuracy <= 1

    def test_unseen_excludes_training_classes(self, setup):
        ds, _ = setup
        train = set(ds.train_labels())
        proto = EvalProtocol("unseen")
        assert not train & set(proto.support_labels(ds))
        assert not train & {it.label for it in proto.query_items(ds)}

    def test_reproducible_and_written(self, setup, tmp_path):
        ds, model = setup
        a, b = evaluate(model, ds, "all", "ck"), evaluate(model, ds, "all", "ck")
        assert a.to_json() == b.to_json() and a.rows == b.rows
        jpath, cpath = a.write(tmp_path)
        body = json.loads(jpath.read_text())
        assert body["protocol"] == "all" and body["checkpoint"] == "ck"
        assert cpath.read_text().splitlines()[0] == "query_id,true_label,predicted_label,distance"

    def test_support_rebuild_identical(self, setup):
        ds, model = setup
        a = build_support(model, ds.prototypes(), range(6))
        b = build_support(model, ds.prototypes(), range(6))
        assert len(a) == 6 and np.array_equal(a.embeddings, b.embeddings)
