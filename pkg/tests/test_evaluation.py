import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flora.errors import InputError
from flora.evaluation import (
    GroundTruth,
    RecallCurve,
    collapsed_bits,
    fpr_radius0,
    ground_truth,
    hamming_rankings,
    recall_at,
    recall_curve,
    reranked_recall_curve,
    write_gnuplot,
    write_multitable_csv,
)
from flora.hashmodel import HashConfig, build_model
from flora.index import rerank_with_f
from flora.measures import make_measure, measure_score


class TestGroundTruth:
    def test_cosine_self_is_first(self):
        rng = np.random.default_rng(0)
        items = rng.standard_normal((40, 5))
        gt = ground_truth(items[[8, 30]], items, make_measure("scaled_cosine", 5, 5), 3)
        assert gt.ids[:, 0].tolist() == [8, 30]

    def test_full_ranking(self):
        rng = np.random.default_rng(1)
        items = rng.standard_normal((25, 3))
        gt = ground_truth(rng.standard_normal((2, 3)), items, make_measure("mlp_concate", 3, 3), 25)
        for row in gt.ids:
            assert sorted(row.tolist()) == list(range(25))
        assert np.all(np.diff(gt.scores, axis=1) <= 0)

    def test_sort_oracle(self):
        rng = np.random.default_rng(2)
        f = make_measure("deepfm_lite", 4, 4, seed=2)
        users, items = rng.standard_normal((20, 4)), rng.standard_normal((300, 4))
        gt = ground_truth(users, items, f, 10)
        for u in range(20):
            s = [measure_score(f, items[i], users[u]) for i in range(300)]
            assert gt.ids[u].tolist() == sorted(range(300), key=lambda i: (-s[i], i))[:10]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        f = make_measure("mlp_em_sum", 4, 4)
        users, items = rng.standard_normal((5, 4)), rng.standard_normal((60, 4))
        items[10] = items[20]  # exact tie resolved by id
        perm = rng.permutation(60)
        a = ground_truth(users, items, f, 10)
        b = ground_truth(users, items[perm], f, 10, item_ids=perm)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_k_bounds(self):
        with pytest.raises(InputError):
            ground_truth(np.ones((1, 2)), np.ones((3, 2)), make_measure("scaled_cosine", 2, 2), 4)


class TestRecall:
    def test_examples(self):
        assert recall_at([4, 5, 6], [4, 5, 6], 3) == 1.0
        assert recall_at([1, 5, 2], {1, 2, 3}, 3) == pytest.approx(2 / 3)

    def test_random_ranking_expectation(self):
        n, t, k, trials = 500, 50, 10, 4000
        rng = np.random.default_rng(0)
        gt = np.arange(k)
        vals = np.array([recall_at(rng.permutation(n), gt, t) for _ in range(trials)])
        # hypergeometric hits: mean t/n, variance of hits/k below (t/n)(1 - t/n)/k
        sigma = np.sqrt((t / n) * (1 - t / n) / k / trials)
        assert abs(vals.mean() - t / n) < 3 * sigma

    def test_single_user_curve(self):
        gt = GroundTruth(np.array([[3, 1]]), np.zeros((1, 2)))
        ranking = [0, 3, 2, 1]
        curve = recall_curve([ranking], gt, 4)
        assert curve.recall.tolist() == [recall_at(ranking, [3, 1], t) for t in range(1, 5)]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), T=st.integers(1, 60))
    def test_curve_monotone_and_bounded(self, seed, T):
        rng = np.random.default_rng(seed)
        gt = GroundTruth(np.array([rng.choice(50, 5, replace=False) for _ in range(8)]), np.zeros((8, 5)))
        curve = recall_curve([rng.permutation(50) for _ in range(8)], gt, T)
        assert len(curve.recall) == T
        assert np.all(np.diff(curve.recall) >= 0)
        assert np.all((curve.recall >= 0) & (curve.recall <= 1))

    def test_default_T(self):
        gt = GroundTruth(np.array([[0]]), np.zeros((1, 1)))
        assert len(recall_curve([np.arange(300)], gt).recall) == 200

    def test_padded_short_ranking(self):
        gt = GroundTruth(np.array([[0, 9]]), np.zeros((1, 2)))
        curve = recall_curve([[9]], gt, 5)
        assert curve.padded and curve.recall.tolist() == [0.5] * 5

    def test_mismatched_users(self):
        gt = GroundTruth(np.zeros((2, 1), dtype=int), np.zeros((2, 1)))
        with pytest.raises(InputError):
            recall_curve([[0]], gt, 3)

    def test_csv(self, tmp_path):
        curve = RecallCurve(np.array([0.1, 0.25]), k=10)
        curve.write_csv(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text() == "t,recall\n1,0.1\n2,0.25\n"


class TestFpr:
    def test_examples(self):
        assert fpr_radius0([1, 2], [1, 2, 3], 10) == 0.0
        assert fpr_radius0(range(10), [1, 2, 3], 10) == 1.0
        cand, gt = {0, 1, 5, 7}, {1, 2}
        assert fpr_radius0(cand, gt, 20) == len(cand - gt) / (20 - len(gt))

    def test_multitable_csv(self, tmp_path):
        write_multitable_csv([(1, 0.5, 0.01), (2, 0.75, 0.02)], tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text() == "L,recall,fpr\n1,0.5,0.01\n2,0.75,0.02\n"


@pytest.fixture(scope="module")
def rerank_setup():
    rng =np.random.default_rng(0)
    f = make_measure("mlp_em_sum", 6, 6, seed=1, hidden=(16,))
    model = build_model(6, 6, HashConfig(m=6, tower_sizes=(8,), shared_sizes=(8,)), rng)
    users, items = rng.standard_normal((15, 6)), rng.standard_normal((120, 6))
    return f, model, users, items, ground_truth(users, items, f, 10)


class TestReranked:
    def test_matches_direct_definition(self, rerank_setup):
        f, model, users, items, gt = rerank_setup
        T = 40
        curve = reranked_recall_curve(model, users, items, f, gt, T)
        ids, dists = hamming_rankings(model, users, items, 120)
        expected = np.zeros(T)
        for u in range(len(users)):
            for t in range(1, T + 1):
                cut = dists[u, t - 1]
                pool = ids[u][dists[u] <= cut]
                top = rerank_with_f(pool, users[u], f, items, t).ids
                expected[t - 1] += len(set(top.tolist()) & set(gt.ids[u].tolist())) / 10
        np.testing.assert_allclose(curve.recall, expected / len(users), rtol=0, atol=1e-15)

    def test_dominates_hamming(self, rerank_setup):
        f, model, users, items, gt = rerank_setup
        ham = recall_curve(hamming_rankings(model, users, items, 50)[0], gt, 50)
        rr = reranked_recall_curve(model, users, items, f, gt, 50)
        assert np.all(rr.recall >= ham.recall)


def test_gnuplot(tmp_path):
    write_gnuplot({"a": RecallCurve(np.array([0.1, 0.2]), 10), "b c": RecallCurve(np.array([0.3, 0.4]), 10)},
                  tmp_path / "p.dat")
    assert (tmp_path / "p.dat").read_text().splitlines() == ["# t a b_c", "1 0.1 0.3", "2 0.2 0.4"]


def test_collapsed_bits():
    codes = np.ones((100, 4), dtype=np.int8)
    codes[:50, 1] = -1
    codes[:3, 2] = -1
    assert collapsed_bits(codes) == 2
