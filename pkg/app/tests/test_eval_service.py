import math
import unittest

import numpy as np

from app.exceptions import PreconditionError
from app.schemas.corpus import SplitSpec
from app.schemas.model import ModelConfig
from app.services.eval_service import (
    aspect_contribution,
    contribution_reports,
    evaluate,
    explain,
    explain_frame,
    independence_frame,
    ndcg_at_k,
    rank_all,
    rank_scores,
    recall_at_k,
)
from app.services.graph_service import AspectInteractionStore, build_graphs
from app.services.model_service import ForwardCache, forward, init_embeddings


def fixed_cache(user_matrix: np.ndarray, item_matrix: np.ndarray) -> ForwardCache:
    """Single-block cache whose final representations are the given matrices"""
    return ForwardCache([[user_matrix]], [[item_matrix]], [user_matrix], [item_matrix])


def brute_force(scores, split: SplitSpec, partition: str, k: int) -> tuple[float, float]:
    excluded_parts = ("train",) if partition == "validation" else ("train", "validation")
    excluded = {(u, i) for name in excluded_parts for u, i in getattr(split, name)}
    held_out = split.user_sets(partition)
    recalls, ndcgs = [], []
    for user in sorted(held_out):
        relevant = held_out[user]
        if not relevant:
            continue
        candidates = [i for i in range(scores.shape[1]) if (user, i) not in excluded]
        top = sorted(candidates, key=lambda i: (-scores[user, i], i))[:k]
        hits = [rank for rank, item in enumerate(top, start=1) if item in relevant]
        recalls.append(len(hits) / len(relevant))
        dcg = sum(1 / math.log2(rank + 1) for rank in hits)
        idcg = sum(1 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
        ndcgs.append(dcg / idcg)
    return sum(recalls) / len(recalls), sum(ndcgs) / len(ndcgs)


class TestRankingMetrics(unittest.TestCase):
    def test_worked_ndcg_example(self):
        # Held-out items 0 and 1; item 0 ranks first, item 1 last
        cache = fixed_cache(np.array([[1.0]]), np.array([[5.0], [0.0], [4.0], [3.0], [2.0]]))
        split = SplitSpec(train=[], validation=[], test=[(0, 0), (0, 1)], rng_seed=0)

        report = evaluate(cache, split, [2])

        self.assertAlmostEqual(report.ndcg_at[2], 0.61315, places=5)
        self.assertEqual(report.recall_at[2], 0.5)
        self.assertEqual(report.num_eval_users, 1)

    def test_ties_go_to_lower_item_index(self):
        result = rank_scores(np.zeros((1, 2)), np.zeros((6, 2)), np.array([0]), {0: {1}}, [{5}], k=3)

        self.assertEqual(result.top_items[0].tolist(), [0, 2, 3])

    def test_seen_items_are_never_recommended(self):
        cache = fixed_cache(np.ones((2, 1)), np.arange(6, dtype=np.float64)[:, None])
        split = SplitSpec(train=[(0, 5), (0, 4), (1, 0)], validation=[(0, 3)], test=[(0, 0), (1, 5)], rng_seed=0)

        result = rank_all(cache, split, k=6)

        self.assertEqual(result.top_items[0].tolist(), [2, 1, 0])
        self.assertEqual(result.top_items[1].tolist(), [5, 4, 3, 2, 1])
        validation = rank_all(cache, split, k=6, partition="validation")
        self.assertEqual(validation.users.tolist(), [0])
        self.assertEqual(validation.top_items[0].tolist(), [3, 2, 1, 0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for trial in range(100):
            num_users, num_items = int(rng.integers(3, 9)), int(rng.integers(5, 13))
            # Small integer embeddings make exact score ties common
            users = rng.integers(-1, 3, size=(num_users, 2)).astype(np.float64)
            items = rng.integers(-1, 3, size=(num_items, 2)).astype(np.float64)
            parts = {"train": [], "validation": [], "test": [(0, int(rng.integers(num_items)))]}
            for user in range(num_users):
                for item in range(num_items):
                    if (user, item) != parts["test"][0] and rng.random() < 0.4:
                        parts[rng.choice(["train", "validation", "test"], p=[0.6, 0.2, 0.2])].append((user, item))
            split = SplitSpec(**parts, rng_seed=trial)
            scores = users @ items.T
            for partition in ("test", "validation"):
                if not split.validation and partition == "validation":
                    continue
                result = rank_all(fixed_cache(users, items), split, 5, partition)
                for k in (1, 3, 5):
                    with self.subTest(trial=trial, partition=partition, k=k):
                        recall, ndcg = brute_force(scores, split, partition, k)
                        self.assertAlmostEqual(recall_at_k(result, k), recall, places=12)
                        self.assertAlmostEqual(ndcg_at_k(result, k), ndcg, places=12)

    def test_cutoff_beyond_ranked_depth(self):
        result = rank_scores(np.ones((1, 1)), np.ones((4, 1)), np.array([0]), {}, [{1}], k=2)

        with self.assertRaises(PreconditionError):
            recall_at_k(result, 3)

    def test_unknown_partition(self):
        split = SplitSpec(train=[], validation=[], test=[(0, 0)], rng_seed=0)

        with self.assertRaises(ValueError):
            rank_all(fixed_cache(np.ones((1, 1)), np.ones((2, 1))), split, 1, partition="train")


class TestAspectReports(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(42)
        edges = [(int(u), int(i)) for u, i in np.argwhere(rng.random((20, 30)) < 0.25)]
        order = rng.permutation(len(edges))
        test = [edges[p] for p in order[: len(edges) // 5]]
        held = set(test)
        train = [e for e in edges if e not in held]
        cls.split = SplitSpec(train=train, validation=[], test=test, rng_seed=42)
        store = AspectInteractionStore.from_pairs(
            20, 30, edges, {"quality": train[::2], "price": train[1::3], "design": train[2::4]}
        )
        cls.graphs = build_graphs(store, train)
        cls.config = ModelConfig(num_aspects=3, embed_dim=4, num_layers=2, init_scale=0.5, seed=1)
        cls.table = init_embeddings(cls.config, 20, 30)
        cls.cache = forward(cls.table, cls.graphs, cls.config)

    def test_full_subset_equals_full_report(self):
        full = evaluate(self.cache, self.split, [5, 10])

        names = ["quality", "price", "design"]
        by_name = aspect_contribution(self.table, self.graphs, self.split, names, self.config, [5, 10])
        by_index = aspect_contribution(self.table, self.graphs, self.split, [0, 1, 2], self.config, [5, 10])

        self.assertEqual(by_name, full)
        self.assertEqual(by_index, full)

    def test_single_aspect_uses_its_block_only(self):
        expected = evaluate(
            fixed_cache(self.cache.user_aggregates[1], self.cache.item_aggregates[1]), self.split, [10]
        )

        report = aspect_contribution(self.table, self.graphs, self.split, ["price"], self.config, [10])

        self.assertEqual(report, expected)

    def test_invalid_subsets(self):
        for subset in ([], ["size"], [3]):
            with self.subTest(subset=subset):
                with self.assertRaises(PreconditionError):
                    aspect_contribution(self.table, self.graphs, self.split, subset, self.config, [10])

    def test_contribution_reports(self):
        reports = contribution_reports(self.table, self.graphs, self.split, self.config, [10])

        self.assertEqual(
            [r.aspects for r in reports], [["quality"], ["price"], ["design"], ["quality", "price", "design"]]
        )
        self.assertEqual(reports[-1].report, evaluate(self.cache, self.split, [10]))

    def test_explain_rows_sum_to_total(self):
        user_ids = [f"U{u}" for u in range(20)]
        item_ids = [f"I{i}" for i in range(30)]

        rows = explain(self.cache, self.graphs.aspect_names, [(0, 1), (4, 7)], user_ids, item_ids)
        frame = explain_frame(rows)

        self.assertEqual(list(frame.columns), ["quality", "price", "design", "total"])
        self.assertEqual(list(frame.index), ["U0 -> I1", "U4 -> I7"])
        for row in rows:
            self.assertAlmostEqual(sum(row.by_aspect.values()), row.total, places=12)

    def test_independence_frame(self):
        frame = independence_frame(self.cache, self.graphs.aspect_names, 3)

        self.assertEqual(list(frame.index), ["quality", "price", "design"])
        np.testing.assert_allclose(np.diag(frame.to_numpy()), 1.0, atol=1e-12)
        np.testing.assert_allclose(frame.to_numpy(), frame.to_numpy().T, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
