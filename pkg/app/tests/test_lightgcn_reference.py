import unittest

import numpy as np
import torch

from app.schemas.corpus import SplitSpec
from app.schemas.model import ModelConfig, TrainConfig
from app.services.graph_service import AspectInteractionStore, NormalizedAspectGraph, build_graphs
from app.services.model_service import EmbeddingTable, batch_scores, forward, init_embeddings
from app.services.trainer_service import sample_triplets, train


class TorchAspectGCN(torch.nn.Module):
    """Autograd re-implementation of the per-aspect light convolution model"""

    def __init__(self, table: EmbeddingTable, graphs: NormalizedAspectGraph, num_layers: int):
        super().__init__()
        self.users = torch.nn.ParameterList(torch.nn.Parameter(torch.tensor(b)) for b in table.user_blocks)
        self.items = torch.nn.ParameterList(torch.nn.Parameter(torch.tensor(b)) for b in table.item_blocks)
        self.operators = [torch.from_numpy(g.user_major.toarray()) for g in graphs.graphs]
        self.num_layers = num_layers

    def aggregates(self):
        result = []
        for users, items, operator in zip(self.users, self.items, self.operators):
            agg_u, agg_i = users, items
            for _ in range(self.num_layers):
                users, items = operator @ items, operator.T @ users
                agg_u, agg_i = agg_u + users, agg_i + items
            result.append((agg_u, agg_i))
        return result

    def scores(self, users, items):
        return sum((agg_u[users] * agg_i[items]).sum(dim=1) for agg_u, agg_i in self.aggregates())

    def batch_loss(self, users, positives, negatives, weight_decay):
        margin = self.scores(users, positives) - self.scores(users, negatives)
        touched_u, touched_i = torch.unique(users), torch.unique(torch.cat([positives, negatives]))
        reg = sum((b[touched_u] ** 2).sum() for b in self.users) + sum((b[touched_i] ** 2).sum() for b in self.items)
        return -torch.nn.functional.logsigmoid(margin).sum() + weight_decay * reg


def as_index(values: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(values, dtype=np.int64))


class TestLightGcnReference(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(77)
        num_users, num_items = 30, 25
        adjacency = rng.random((num_users, num_items)) < 0.2
        adjacency[:, 0] = True
        edges = [(int(u), int(i)) for u, i in np.argwhere(adjacency)]
        cls.split = SplitSpec(train=edges, validation=[], test=[], rng_seed=77)
        aspects = {name: [e for e in edges if rng.random() < 0.5] for name in ("quality", "price", "design")}
        store = AspectInteractionStore.from_pairs(num_users, num_items, edges, aspects)
        cls.graphs = build_graphs(store, edges, include_base_graph=True)
        cls.model_config = ModelConfig(num_aspects=4, embed_dim=6, num_layers=3, init_scale=0.1, seed=11)
        cls.table = init_embeddings(cls.model_config, num_users, num_items)

    def test_forward_matches(self):
        reference = TorchAspectGCN(self.table, self.graphs, self.model_config.num_layers)
        cache = forward(self.table, self.graphs, self.model_config)

        with torch.no_grad():
            for a, (agg_u, agg_i) in enumerate(reference.aggregates()):
                np.testing.assert_allclose(cache.user_aggregates[a], agg_u.numpy(), atol=1e-10)
                np.testing.assert_allclose(cache.item_aggregates[a], agg_i.numpy(), atol=1e-10)

    def test_scores_match(self):
        reference = TorchAspectGCN(self.table, self.graphs, self.model_config.num_layers)
        cache = forward(self.table, self.graphs, self.model_config)
        users = np.repeat(np.arange(30), 25)
        items = np.tile(np.arange(25), 30)

        with torch.no_grad():
            expected = reference.scores(as_index(users), as_index(items)).numpy()

        np.testing.assert_allclose(batch_scores(cache, users, items), expected, atol=1e-10)

    def test_one_epoch_matches(self):
        train_config = TrainConfig(
            batch_size=32, learning_rate=0.01, weight_decay=1e-3, max_epochs=1, early_stopping=False, seed=13
        )
        result = train(
            self.split, self.graphs, self.model_config, train_config, initial_table=self.table, progress=False
        )

        reference = TorchAspectGCN(self.table, self.graphs, self.model_config.num_layers)
        optimizer = torch.optim.Adam(
            reference.parameters(),
            lr=train_config.learning_rate,
            betas=train_config.adam_betas,
            eps=train_config.adam_eps,
        )
        triplets = sample_triplets(self.split.train, self.graphs.num_items, [train_config.seed, 1])
        total = 0.0
        for batch in triplets.batches(train_config.batch_size):
            optimizer.zero_grad()
            loss = reference.batch_loss(
                as_index(batch.users), as_index(batch.positives), as_index(batch.negatives), train_config.weight_decay
            )
            loss.backward()
            optimizer.step()
            total += loss.item()

        self.assertAlmostEqual(result.log[0].mean_loss, total / len(triplets), delta=1e-10)
        for ours, theirs in zip(result.table.user_blocks, reference.users):
            np.testing.assert_allclose(ours, theirs.detach().numpy(), atol=1e-10)
        for ours, theirs in zip(result.table.item_blocks, reference.items):
            np.testing.assert_allclose(ours, theirs.detach().numpy(), atol=1e-10)


if __name__ == "__main__":
    unittest.main()
