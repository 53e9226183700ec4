import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.exceptions import PreconditionError, ShapeError
from app.schemas.model import ModelConfig
from app.services.graph_service import NormalizedAspectGraph, propagate

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAGCNCK\x00"
CHECKPOINT_VERSION = 1
USER_ROLE, ITEM_ROLE = 0, 1


@dataclass
class EmbeddingTable:
    """Layer-0 embeddings, one (N, d) user block and one (M, d) item block per aspect"""
    user_blocks: list[np.ndarray]
    item_blocks: list[np.ndarray]

    @property
    def num_aspects(self) -> int:
        return len(self.user_blocks)

    @property
    def num_users(self) -> int:
        return self.user_blocks[0].shape[0]

    @property
    def num_items(self) -> int:
        return self.item_blocks[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.user_blocks[0].shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable([b.copy() for b in self.user_blocks], [b.copy() for b in self.item_blocks])

    def scaled(self, alpha: float) -> "EmbeddingTable":
        return EmbeddingTable([alpha * b for b in self.user_blocks], [alpha * b for b in self.item_blocks])

    def zeros_like(self) -> "EmbeddingTable":
        return EmbeddingTable(
            [np.zeros_like(b) for b in self.user_blocks], [np.zeros_like(b) for b in self.item_blocks]
        )

    def blocks(self) -> list[np.ndarray]:
        return self.user_blocks + self.item_blocks

    def is_finite(self) -> bool:
        return all(np.isfinite(b).all() for b in self.blocks())


@dataclass
class ForwardCache:
    """Per-aspect layer outputs and their layer sums"""
    user_layers: list[list[np.ndarray]]
    item_layers: list[list[np.ndarray]]
    user_aggregates: list[np.ndarray]
    item_aggregates: list[np.ndarray]

    @property
    def num_aspects(self) -> int:
        return len(self.user_aggregates)

    @property
    def num_users(self) -> int:
        return self.user_aggregates[0].shape[0]

    @property
    def num_items(self) -> int:
        return self.item_aggregates[0].shape[0]

    def user_matrix(self, aspects: list[int] | None = None) -> np.ndarray:
        """Concatenated final user representations, restricted to `aspects` when given"""
        chosen = range(self.num_aspects) if aspects is None else aspects
        return np.concatenate([self.user_aggregates[a] for a in chosen], axis=1)

    def item_matrix(self, aspects: list[int] | None = None) -> np.ndarray:
        chosen = range(self.num_aspects) if aspects is None else aspects
        return np.concatenate([self.item_aggregates[a] for a in chosen], axis=1)


def init_embeddings(config: ModelConfig, num_users: int, num_items: int) -> EmbeddingTable:
    """Independent Normal(0, init_scale^2) draws per (seed, aspect, role)."""
    user_blocks, item_blocks = [], []
    for aspect in range(config.num_blocks):
        user_rng = np.random.default_rng([config.seed, aspect, USER_ROLE])
        item_rng = np.random.default_rng([config.seed, aspect, ITEM_ROLE])
        user_blocks.append(user_rng.normal(0.0, config.init_scale, size=(num_users, config.embed_dim)))
        item_blocks.append(item_rng.normal(0.0, config.init_scale, size=(num_items, config.embed_dim)))
    return EmbeddingTable(user_blocks, item_blocks)


def check_compatible(table: EmbeddingTable, graphs: NormalizedAspectGraph, config: ModelConfig | None = None):
    if table.num_aspects != graphs.num_aspects:
        raise ShapeError(f"table has {table.num_aspects} aspect blocks, graphs have {graphs.num_aspects}")
    if table.num_users != graphs.num_users or table.num_items != graphs.num_items:
        raise ShapeError("table and graphs disagree on the number of users or items")
    if config is not None and (config.num_blocks != table.num_aspects or config.embed_dim != table.embed_dim):
        raise ShapeError("table does not match the model configuration")


def forward(table: EmbeddingTable, graphs: NormalizedAspectGraph, config: ModelConfig) -> ForwardCache:
    """K light convolutions per aspect graph, summed over layers 0..K."""
    check_compatible(table, graphs, config)
    user_layers, item_layers, user_aggregates, item_aggregates = [], [], [], []
    for aspect in range(table.num_aspects):
        users = [table.user_blocks[aspect]]
        items = [table.item_blocks[aspect]]
        for _ in range(config.num_layers):
            next_users, next_items = propagate(graphs, aspect, users[-1], items[-1])
            users.append(next_users)
            items.append(next_items)
        user_layers.append(users)
        item_layers.append(items)
        user_aggregates.append(np.sum(users, axis=0))
        item_aggregates.append(np.sum(items, axis=0))
    return ForwardCache(user_layers, item_layers, user_aggregates, item_aggregates)


def final_representation(cache: ForwardCache, entity: str, index: int) -> np.ndarray:
    """Concatenation of the per-aspect aggregates in block order"""
    if entity == "user":
        aggregates, size = cache.user_aggregates, cache.num_users
    elif entity == "item":
        aggregates, size = cache.item_aggregates, cache.num_items
    else:
        raise ValueError(f"entity must be 'user' or 'item', got {entity!r}")
    if not 0 <= index < size:
        raise IndexError(f"{entity} index {index} out of range [0, {size})")
    return np.concatenate([block[index] for block in aggregates])


def score_by_aspect(cache: ForwardCache, user: int, item: int) -> np.ndarray:
    return np.array(
        [
            float(np.dot(cache.user_aggregates[a][user], cache.item_aggregates[a][item]))
            for a in range(cache.num_aspects)
        ]
    )


def score(cache: ForwardCache, user: int, item: int) -> float:
    return float(score_by_aspect(cache, user, item).sum())


def batch_scores(cache: ForwardCache, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Scores of aligned (user, item) index arrays"""
    total = np.zeros(len(users))
    for a in range(cache.num_aspects):
        total += np.einsum("bd,bd->b", cache.user_aggregates[a][users], cache.item_aggregates[a][items])
    return total


def aspect_independence(
    source: EmbeddingTable | ForwardCache, index: int, entity: str = "user"
) -> np.ndarray:
    """Cosine similarity between the aspect blocks of one entity; NaN where a block has zero norm."""
    if isinstance(source, EmbeddingTable):
        blocks = source.user_blocks if entity == "user" else source.item_blocks
    else:
        blocks = source.user_aggregates if entity == "user" else source.item_aggregates
    if not 0 <= index < blocks[0].shape[0]:
        raise IndexError(f"{entity} index {index} out of range")
    vectors = np.stack([block[index] for block in blocks])
    norms = np.linalg.norm(vectors, axis=1)
    sims = np.full((len(blocks), len(blocks)), np.nan)
    nonzero = norms > 0
    unit = vectors[nonzero] / norms[nonzero, None]
    sims[np.ix_(nonzero, nonzero)] = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sims, np.where(nonzero, 1.0, np.nan))
    return sims


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


def save_checkpoint(
    table: EmbeddingTable, config: ModelConfig, aspect_names: list[str], path: Path, meta_path: Path | None = None
) -> None:
    """Write `model.ckpt` (little-endian float32 blocks) and its metadata file."""
    echo = config.model_dump_json().encode("utf-8")
    with Path(path).open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(np.array([CHECKPOINT_VERSION], dtype="<u4").tobytes())
        handle.write(
            np.array(
                [len(echo), table.num_aspects, table.num_users, table.num_items, table.embed_dim], dtype="<u8"
            ).tobytes()
        )
        handle.write(echo)
        for user_block, item_block in zip(table.user_blocks, table.item_blocks):
            handle.write(user_block.astype("<f4").tobytes())
            handle.write(item_block.astype("<f4").tobytes())
    if meta_path is not None:
        meta = {"aspects": aspect_names, "config_hash": config_hash(config), "config": config.model_dump()}
        Path(meta_path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_checkpoint(path: Path) -> tuple[EmbeddingTable, ModelConfig]:
    buffer = Path(path).read_bytes()
    if buffer[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise PreconditionError(f"{path} is not a model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version = int(np.frombuffer(buffer, dtype="<u4", count=1, offset=offset)[0])
    if version != CHECKPOINT_VERSION:
        raise PreconditionError(f"unsupported checkpoint version {version}")
    offset += 4
    echo_len, num_aspects, num_users, num_items, dim = (
        int(v) for v in np.frombuffer(buffer, dtype="<u8", count=5, offset=offset)
    )
    offset += 40
    config = ModelConfig.model_validate_json(buffer[offset: offset + echo_len])
    offset += echo_len
    user_blocks, item_blocks = [], []
    for _ in range(num_aspects):
        for rows, target in ((num_users, user_blocks), (num_items, item_blocks)):
            block = np.frombuffer(buffer, dtype="<f4", count=rows * dim, offset=offset)
            target.append(block.reshape(rows, dim).astype(np.float64))
            offset += 4 * rows * dim
    return EmbeddingTable(user_blocks, item_blocks), config
