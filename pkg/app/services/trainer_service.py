import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from app.exceptions import DivergenceError, PreconditionError, ShapeError
from app.schemas.corpus import SplitSpec
from app.schemas.model import EpochLog, ModelConfig, TrainConfig
from app.services.eval_service import evaluate
from app.services.graph_service import NormalizedAspectGraph, edge_keys, normalize_edges, propagate_transpose
from app.services.model_service import EmbeddingTable, ForwardCache, batch_scores, forward, init_embeddings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplets:
    """Aligned (u, i+, i-) index arrays"""
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            end = start + batch_size
            yield Triplets(self.users[start:end], self.positives[start:end], self.negatives[start:end])


def sample_triplets(train_edges, num_items: int, epoch_seed) -> Triplets:
    """Shuffle training edges and pair each with one uniformly drawn uninteracted item."""
    edges = normalize_edges(train_edges, num_items=num_items)
    rng = np.random.default_rng(epoch_seed)
    degrees = np.bincount(edges[:, 0]) if len(edges) else np.zeros(0, dtype=np.int64)
    saturated = np.flatnonzero(degrees >= num_items)
    if len(saturated):
        logger.warning(f"Skipping {len(saturated)} users who interacted with every item: {saturated.tolist()}")
        edges = edges[~np.isin(edges[:, 0], saturated)]

    edges = edges[rng.permutation(len(edges))]
    users, positives = edges[:, 0], edges[:, 1]
    known = np.sort(edge_keys(edges, num_items))
    negatives = rng.integers(0, num_items, size=len(edges))
    pending = np.arange(len(edges))
    # Rejection sampling: redraw only the collisions until none remain
    while len(pending):
        keys = users[pending] * np.int64(num_items) + negatives[pending]
        slot = np.minimum(np.searchsorted(known, keys), max(len(known) - 1, 0))
        collided = known[slot] == keys if len(known) else np.zeros(len(keys), dtype=bool)
        pending = pending[collided]
        negatives[pending] = rng.integers(0, num_items, size=len(pending))
    return Triplets(users, positives, negatives)


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray, weight_decay: float, params_sq_norm: float) -> float:
    """Sum of -ln sigmoid(r+ - r-) plus weight_decay * params_sq_norm."""
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ShapeError("positive and negative score vectors differ in length")
    if not (np.isfinite(scores_pos).all() and np.isfinite(scores_neg).all()):
        raise DivergenceError("non-finite preference score")
    # -ln sigmoid(x) == ln(1 + exp(-x))
    return float(np.logaddexp(0.0, -(scores_pos - scores_neg)).sum() + weight_decay * params_sq_norm)


def bpr_coefficients(scores_pos: np.ndarray, scores_neg: np.ndarray) -> np.ndarray:
    """d(-ln sigmoid(x))/dx at x = r+ - r-"""
    return -expit(-(scores_pos - scores_neg))


def touched_rows(triplets: Triplets) -> tuple[np.ndarray, np.ndarray]:
    return np.unique(triplets.users), np.unique(np.concatenate([triplets.positives, triplets.negatives]))


def regularized_sq_norm(table: EmbeddingTable, triplets: Triplets) -> float:
    """Squared norm of the layer-0 rows a batch touches, over every aspect"""
    users, items = touched_rows(triplets)
    return float(
        sum(np.square(b[users]).sum() for b in table.user_blocks)
        + sum(np.square(b[items]).sum() for b in table.item_blocks)
    )


def batch_objective(
    table: EmbeddingTable, graphs: NormalizedAspectGraph, config: ModelConfig, triplets: Triplets, weight_decay: float
) -> float:
    cache = forward(table, graphs, config)
    pos = batch_scores(cache, triplets.users, triplets.positives)
    neg = batch_scores(cache, triplets.users, triplets.negatives)
    return bpr_loss(pos, neg, weight_decay, regularized_sq_norm(table, triplets))


def backward(
    cache: ForwardCache,
    graphs: NormalizedAspectGraph,
    triplets: Triplets,
    weight_decay: float,
    table: EmbeddingTable,
) -> EmbeddingTable:
    """Gradient of the batch objective with respect to every layer-0 block.

    Aggregate gradients are scattered per aspect, then pulled back through
    each propagation depth with the adjoint operator and summed, since every
    layer 0..K enters the aggregate with unit weight.
    """
    if cache.num_aspects != table.num_aspects or cache.num_users != table.num_users:
        raise ShapeError("forward cache does not match the embedding table")
    users, pos, neg = triplets.users, triplets.positives, triplets.negatives
    coef = bpr_coefficients(batch_scores(cache, users, pos), batch_scores(cache, users, neg))[:, None]
    num_layers = len(cache.user_layers[0]) - 1

    grad = table.zeros_like()
    for a in range(cache.num_aspects):
        e_users = cache.user_aggregates[a][users]
        e_items = cache.item_aggregates[a]
        g_users = np.zeros_like(cache.user_aggregates[a])
        g_items = np.zeros_like(cache.item_aggregates[a])
        np.add.at(g_users, users, coef * (e_items[pos] - e_items[neg]))
        np.add.at(g_items, pos, coef * e_users)
        np.add.at(g_items, neg, -coef * e_users)

        acc_users, acc_items = g_users.copy(), g_items.copy()
        for _ in range(num_layers):
            g_users, g_items = propagate_transpose(graphs, a, g_users, g_items)
            acc_users += g_users
            acc_items += g_items
        grad.user_blocks[a] = acc_users
        grad.item_blocks[a] = acc_items

    if weight_decay:
        reg_users, reg_items = touched_rows(triplets)
        for a in range(table.num_aspects):
            grad.user_blocks[a][reg_users] += 2.0 * weight_decay * table.user_blocks[a][reg_users]
            grad.item_blocks[a][reg_items] += 2.0 * weight_decay * table.item_blocks[a][reg_items]
    return grad


@dataclass
class AdamState:
    first: EmbeddingTable
    second: EmbeddingTable
    step: int = 0

    @classmethod
    def for_table(cls, table: EmbeddingTable) -> "AdamState":
        return cls(table.zeros_like(), table.zeros_like())


def adam_step(
    table: EmbeddingTable,
    grad: EmbeddingTable,
    state: AdamState,
    learning_rate: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied to the table in place"""
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for params, g, m, v in zip(table.blocks(), grad.blocks(), state.first.blocks(), state.second.blocks()):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        params -= learning_rate * (m / correction1) / (np.sqrt(v / correction2) + eps)


class EarlyStopping:
    """Stops once `patience` epochs pass without a strict improvement"""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = -np.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's metric; returns True when it is a new best"""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainingResult:
    table: EmbeddingTable
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None
    best_recall: float | None = None


def train(
    split: SplitSpec,
    graphs: NormalizedAspectGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    initial_table: EmbeddingTable | None = None,
    progress: bool = True,
) -> TrainingResult:
    """Mini-batch BPR training with recall-based early stopping.

    Returns the table of the best validation epoch when early stopping is
    on, otherwise the table after the last epoch.
    """
    early_stopping = train_config.early_stopping
    if early_stopping and not split.validation:
        raise PreconditionError("early stopping needs a non-empty validation set")
    table = initial_table.copy() if initial_table is not None else init_embeddings(
        model_config, graphs.num_users, graphs.num_items
    )
    train_edges = normalize_edges(split.train, graphs.num_users, graphs.num_items)
    if len(train_edges) == 0:
        raise PreconditionError("no training interactions")
    state = AdamState.for_table(table)
    stopper = EarlyStopping(train_config.patience)
    result = TrainingResult(table=table.copy())
    wd = train_config.weight_decay

    epochs = tqdm(range(1, train_config.max_epochs + 1), desc="Training", disable=not progress)
    for epoch in epochs:
        started = time.perf_counter()
        triplets = sample_triplets(train_edges, graphs.num_items, [train_config.seed, epoch])
        total_loss = 0.0
        for batch in triplets.batches(train_config.batch_size):
            cache = forward(table, graphs, model_config)
            pos = batch_scores(cache, batch.users, batch.positives)
            neg = batch_scores(cache, batch.users, batch.negatives)
            loss = bpr_loss(pos, neg, wd, regularized_sq_norm(table, batch))
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}")
            total_loss += loss
            adam_step(
                table,
                backward(cache, graphs, batch, wd, table),
                state,
                train_config.learning_rate,
                train_config.adam_betas,
                train_config.adam_eps,
            )
        if not table.is_finite():
            raise DivergenceError(f"embeddings became non-finite at epoch {epoch}")
        mean_loss = total_loss / max(len(triplets), 1)

        recall = ndcg = 0.0
        if split.validation:
            cache = forward(table, graphs, model_config)
            report = evaluate(cache, split, [train_config.eval_k], partition="validation")
            recall = report.recall_at[train_config.eval_k]
            ndcg = report.ndcg_at[train_config.eval_k]
        elapsed = time.perf_counter() - started
        result.log.append(
            EpochLog(
                epoch=epoch,
                mean_loss=mean_loss,
                val_recall=recall,
                val_ndcg=ndcg,
                elapsed_s=elapsed if train_config.record_elapsed else None,
                eval_k=train_config.eval_k,
            )
        )
        logger.info(
            f"Epoch {epoch}: loss={mean_loss:.6f} recall@{train_config.eval_k}={recall:.4f} "
            f"ndcg@{train_config.eval_k}={ndcg:.4f} ({elapsed:.2f}s)"
        )

        if not early_stopping:
            continue
        if stopper.update(epoch, recall):
            result.table = table.copy()
            result.best_epoch, result.best_recall = epoch, recall
        if stopper.should_stop:
            logger.info(f"Early stop at epoch {epoch}; best epoch {stopper.best_epoch} (recall {stopper.best:.4f})")
            break

    if not early_stopping:
        result.table = table.copy()
        result.best_epoch = result.log[-1].epoch
        result.best_recall = result.log[-1].val_recall
    return result


def save_training_log(log: list[EpochLog], path: Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for entry in log:
            handle.write(entry.model_dump_json() + "\n")
