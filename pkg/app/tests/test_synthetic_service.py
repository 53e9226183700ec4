import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from app.exceptions import PreconditionError
from app.schemas.model import ModelConfig, TrainConfig
from app.services.corpus_service import load_corpus, split_interactions
from app.services.eval_service import evaluate
from app.services.graph_service import AspectInteractionStore, build_graphs
from app.services.model_service import forward, init_embeddings
from app.services.prompts import KeywordResponder
from app.services.synthetic_service import generate_planted, review_text, write_planted_corpus
from app.services.trainer_service import train


class TestPlantedGenerator(unittest.TestCase):
    def test_aspect_edges_follow_blocks(self):
        planted = generate_planted(num_users=40, num_items=50, num_aspects=2, num_blocks=5, per_aspect=4, noise=2)

        self.assertEqual(planted.aspect_names, ["quality", "price"])
        for a, name in enumerate(planted.aspect_names):
            for user, item in planted.aspect_edges[name]:
                self.assertEqual(planted.item_blocks[item, a], planted.user_groups[user, a])
            counts = np.bincount([u for u, _ in planted.aspect_edges[name]], minlength=40)
            self.assertTrue(np.all(counts == 4))

    def test_noise_edges_avoid_aspect_items(self):
        planted = generate_planted(num_users=30, num_items=40, num_blocks=4, per_aspect=5, noise=3)
        aspect_pairs = {pair for edges in planted.aspect_edges.values() for pair in edges}

        self.assertEqual(len(planted.noise_edges), 90)
        self.assertFalse(aspect_pairs & set(planted.noise_edges))

    def test_same_seed_same_corpus(self):
        first, second = generate_planted(seed=5), generate_planted(seed=5)

        self.assertEqual(first.aspect_edges, second.aspect_edges)
        self.assertEqual(first.noise_edges, second.noise_edges)
        self.assertNotEqual(first.noise_edges, generate_planted(seed=6).noise_edges)

    def test_block_too_small(self):
        with self.assertRaises(PreconditionError):
            generate_planted(num_items=20, num_blocks=10, per_aspect=3)

    def test_reviews_name_their_aspects(self):
        responder = KeywordResponder()

        for aspects in ([], ["quality"], ["quality", "price"]):
            with self.subTest(aspects=aspects):
                text = review_text(aspects).lower()
                for name in aspects:
                    self.assertTrue(any(form in text for form in responder.keywords[name]))

    def test_written_corpus_loads(self):
        planted = generate_planted(num_users=20, num_items=30, num_blocks=3, per_aspect=4, noise=2)
        with tempfile.TemporaryDirectory() as tmp:
            corpus, truth = Path(tmp) / "synthetic.jsonl", Path(tmp) / "planted.json"

            count = write_planted_corpus(planted, corpus, truth)
            records, id_maps = load_corpus(corpus)
            saved = json.loads(truth.read_text(encoding="utf-8"))

        self.assertEqual(len(records), count)
        self.assertEqual(id_maps.num_users, 20)
        self.assertEqual(saved["aspects"], ["quality", "price"])
        pairs = {(r.user_id, r.item_id) for r in records}
        for name, edges in saved["aspect_edges"].items():
            self.assertTrue(all((f"u{u}", f"i{i}") in pairs for u, i in edges))


class TestPlantedRecovery(unittest.TestCase):
    """Aspect graphs built from the planted structure must be learnable"""

    @classmethod
    def setUpClass(cls):
        planted = generate_planted(num_users=200, num_items=100, num_aspects=2, num_blocks=10, per_aspect=6, noise=3)
        with tempfile.TemporaryDirectory() as tmp:
            corpus = Path(tmp) / "synthetic.jsonl"
            write_planted_corpus(planted, corpus)
            records, id_maps = load_corpus(corpus)

        def indexed(pairs):
            return [(id_maps.user_index[f"u{u}"], id_maps.item_index[f"i{i}"]) for u, i in pairs]

        cls.split = split_interactions(records, seed=2024)
        cls.store = AspectInteractionStore.from_pairs(
            id_maps.num_users,
            id_maps.num_items,
            [(r.user_index, r.item_index) for r in records],
            {name: indexed(planted.aspect_edges[name]) for name in planted.aspect_names},
        )
        cls.train_config = TrainConfig(
            batch_size=256, learning_rate=0.01, max_epochs=80, patience=15, seed=2024
        )
        cls.random_recall = 10 / id_maps.num_items
        cls.aspect_fit = cls.fit(cls.store)
        cls.single_fit = cls.fit(cls.store.merged())

    @classmethod
    def fit(cls, store):
        graphs = build_graphs(store, cls.split.train)
        model_config = ModelConfig(num_aspects=store.num_aspects, embed_dim=16, num_layers=2, seed=2024)
        untrained = evaluate(
            forward(init_embeddings(model_config, graphs.num_users, graphs.num_items), graphs, model_config),
            cls.split,
            [10],
            partition="validation",
        )
        result = train(cls.split, graphs, model_config, cls.train_config, progress=False)
        return result, untrained.recall_at[10]

    def test_aspect_model_beats_random_ranking(self):
        result, untrained = self.aspect_fit

        self.assertGreaterEqual(result.best_recall, 3 * self.random_recall)
        self.assertGreater(result.best_recall, untrained)
        self.assertLess(result.log[-1].mean_loss, result.log[0].mean_loss)

    def test_single_graph_model_learns(self):
        result, untrained = self.single_fit

        self.assertGreater(result.best_recall, untrained)

    def test_aspect_graphs_outperform_single_graph(self):
        aspect_result, _ = self.aspect_fit
        single_result, _ = self.single_fit

        self.assertGreaterEqual(aspect_result.best_recall, 1.5 * single_result.best_recall)

    def test_loss_falls_every_early_epoch_with_defaults(self):
        graphs = build_graphs(self.store, self.split.train)
        model_config = ModelConfig(num_aspects=self.store.num_aspects)

        result = train(
            self.split, graphs, model_config, TrainConfig(max_epochs=5, early_stopping=False), progress=False
        )

        losses = [entry.mean_loss for entry in result.log]
        self.assertEqual(len(losses), 5)
        self.assertTrue(np.all(np.diff(losses) < 0), losses)


if __name__ == "__main__":
    unittest.main()
