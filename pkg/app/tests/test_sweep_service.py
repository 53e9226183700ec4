import unittest
from unittest.mock import patch

import numpy as np

from app.exceptions import PreconditionError
from app.schemas.corpus import SplitSpec
from app.schemas.model import ModelConfig, TrainConfig
from app.services.graph_service import AspectInteractionStore, build_graphs
from app.services.sweep_service import aspect_count_sweep, sweep, sweep_frame


class TestSweep(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(17)
        edges = [(int(u), int(i)) for u, i in np.argwhere(rng.random((25, 30)) < 0.3)]
        order = rng.permutation(len(edges))
        cut_val, cut_test = len(edges) // 10, len(edges) // 5
        validation = [edges[p] for p in order[:cut_val]]
        test = [edges[p] for p in order[cut_val:cut_val + cut_test]]
        held = set(validation) | set(test)
        train = [e for e in edges if e not in held]
        cls.split = SplitSpec(train=train, validation=validation, test=test, rng_seed=17)
        cls.store = AspectInteractionStore.from_pairs(
            25, 30, edges, {"quality": edges[::2], "price": edges[1::2], "design": edges[::3]}
        )
        cls.model_config = ModelConfig(embed_dim=4, num_layers=1, seed=17)
        cls.train_config = TrainConfig(batch_size=64, learning_rate=0.01, max_epochs=2, patience=2, seed=17)

    def test_aspect_count_sweep(self):
        reports = aspect_count_sweep(self.store, self.split, self.model_config, self.train_config, [1, 3], [5])

        self.assertEqual([value for value, _ in reports], [1, 3])
        for _, report in reports:
            self.assertTrue(0.0 <= report.recall_at[5] <= 1.0)

        frame = sweep_frame("aspects", reports)
        self.assertEqual(frame["aspects"].tolist(), [1, 3])
        self.assertEqual(list(frame.columns), ["aspects", "num_eval_users", "recall@5", "ndcg@5"])

    def test_aspect_sweep_keeps_most_interacted_aspects(self):
        edges = [tuple(e) for e in self.split.train]
        store = AspectInteractionStore.from_pairs(
            25, 30, edges, {"quality": edges[:3], "price": edges[3:60], "design": edges[60:80]}
        )
        trained_on = []

        def recording_build(selected, *args):
            trained_on.append(selected.aspect_names)
            return build_graphs(selected, *args)

        with patch("app.services.sweep_service.build_graphs", side_effect=recording_build):
            aspect_count_sweep(store, self.split, self.model_config, self.train_config, [1, 2], [5])

        self.assertEqual(trained_on, [["price"], ["price", "design"]])

    def test_dimension_sweep_keeps_every_aspect(self):
        reports = sweep(self.store, self.split, self.model_config, self.train_config, "dim", [2, 6], [5])

        self.assertEqual([value for value, _ in reports], [2, 6])
        self.assertTrue(all(report.num_eval_users > 0 for _, report in reports))

    def test_invalid_requests(self):
        with self.assertRaises(PreconditionError):
            aspect_count_sweep(self.store, self.split, self.model_config, self.train_config, [4])
        with self.assertRaises(PreconditionError):
            sweep(self.store, self.split, self.model_config, self.train_config, "batch_size", [8])


if __name__ == "__main__":
    unittest.main()
