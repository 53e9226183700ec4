import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from app.exceptions import PreconditionError
from app.schemas.corpus import SplitSpec
from app.schemas.model import ModelConfig
from app.schemas.report import AspectContribution, ExplainRow, MetricReport
from app.services.graph_service import NormalizedAspectGraph
from app.services.model_service import (
    EmbeddingTable,
    ForwardCache,
    aspect_independence,
    forward,
    score,
    score_by_aspect,
)

logger = logging.getLogger(__name__)

EXCLUDED_PARTITIONS = {
    "validation": ("train",),
    "test": ("train", "validation"),
}


@dataclass
class RankingResult:
    """Top-k lists and held-out items of every evaluated user"""
    users: np.ndarray
    top_items: list[np.ndarray]
    top_scores: list[np.ndarray]
    relevant: list[set[int]]
    k: int


def rank_scores(
    user_matrix: np.ndarray,
    item_matrix: np.ndarray,
    users: np.ndarray,
    excluded: dict[int, set[int]],
    relevant: list[set[int]],
    k: int,
    chunk_size: int = 1024,
) -> RankingResult:
    """Rank all non-excluded items per user; ties go to the lower item index."""
    top_items, top_scores = [], []
    for start in range(0, len(users), chunk_size):
        chunk = users[start:start + chunk_size]
        scores = user_matrix[chunk] @ item_matrix.T
        for row, user in enumerate(chunk):
            seen = list(excluded.get(int(user), ()))
            if seen:
                scores[row, seen] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for row in range(len(chunk)):
            ranked = order[row]
            ranked_scores = scores[row, ranked]
            keep = np.isfinite(ranked_scores)
            top_items.append(ranked[keep])
            top_scores.append(ranked_scores[keep])
    return RankingResult(users=users, top_items=top_items, top_scores=top_scores, relevant=relevant, k=k)


def _targets(split: SplitSpec, partition: str) -> tuple[np.ndarray, list[set[int]], dict[int, set[int]]]:
    if partition not in EXCLUDED_PARTITIONS:
        raise ValueError(f"cannot rank against partition {partition!r}")
    held_out = split.user_sets(partition)
    users = np.array(sorted(u for u, items in held_out.items() if items), dtype=np.int64)
    excluded: dict[int, set[int]] = {}
    for name in EXCLUDED_PARTITIONS[partition]:
        for user, items in split.user_sets(name).items():
            excluded.setdefault(user, set()).update(items)
    return users, [held_out[int(u)] for u in users], excluded


def rank_all(
    cache: ForwardCache, split: SplitSpec, k: int, partition: str = "test", aspects: list[int] | None = None
) -> RankingResult:
    """Top-k recommendations for every user with held-out items in `partition`."""
    users, relevant, excluded = _targets(split, partition)
    return rank_scores(cache.user_matrix(aspects), cache.item_matrix(aspects), users, excluded, relevant, k)


def _check_k(result: RankingResult, k: int):
    if k < 1 or k > result.k:
        raise PreconditionError(f"cutoff {k} outside the ranked depth {result.k}")


def recall_at_k(result: RankingResult, k: int) -> float:
    """Mean over users of |top-k ∩ held-out| / |held-out|"""
    _check_k(result, k)
    values = [
        len(set(top[:k].tolist()) & relevant) / len(relevant)
        for top, relevant in zip(result.top_items, result.relevant)
        if relevant
    ]
    return float(np.mean(values)) if values else 0.0


def ndcg_at_k(result: RankingResult, k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, |held-out|)"""
    _check_k(result, k)
    values = []
    for top, relevant in zip(result.top_items, result.relevant):
        if not relevant:
            continue
        dcg = sum(1.0 / np.log2(rank + 1) for rank, item in enumerate(top[:k].tolist(), start=1) if item in relevant)
        idcg = sum(1.0 / np.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
        values.append(dcg / idcg)
    return float(np.mean(values)) if values else 0.0


def metric_report(result: RankingResult, ks: list[int]) -> MetricReport:
    return MetricReport(
        recall_at={k: recall_at_k(result, k) for k in ks},
        ndcg_at={k: ndcg_at_k(result, k) for k in ks},
        num_eval_users=sum(1 for relevant in result.relevant if relevant),
    )


def evaluate(
    cache: ForwardCache,
    split: SplitSpec,
    ks: list[int],
    partition: str = "test",
    aspects: list[int] | None = None,
) -> MetricReport:
    ks = sorted(set(ks))
    return metric_report(rank_all(cache, split, max(ks), partition, aspects), ks)


def resolve_aspects(names: list[str], subset: list[str] | list[int]) -> list[int]:
    positions = []
    for entry in subset:
        if isinstance(entry, str):
            if entry not in names:
                raise PreconditionError(f"unknown aspect '{entry}'")
            positions.append(names.index(entry))
        else:
            if not 0 <= entry < len(names):
                raise PreconditionError(f"aspect index {entry} out of range")
            positions.append(int(entry))
    return positions


def aspect_contribution(
    table: EmbeddingTable,
    graphs: NormalizedAspectGraph,
    split: SplitSpec,
    aspect_subset: list[str] | list[int],
    config: ModelConfig,
    ks: list[int] = (10, 20),
    cache: ForwardCache | None = None,
) -> MetricReport:
    """Metrics with preference scores restricted to the chosen aspect blocks."""
    if not aspect_subset:
        raise PreconditionError("aspect subset is empty")
    positions = resolve_aspects(graphs.aspect_names, aspect_subset)
    if cache is None:
        cache = forward(table, graphs, config)
    return evaluate(cache, split, list(ks), "test", positions)


def contribution_reports(
    table: EmbeddingTable,
    graphs: NormalizedAspectGraph,
    split: SplitSpec,
    config: ModelConfig,
    ks: list[int] = (10, 20),
) -> list[AspectContribution]:
    """One report per single aspect followed by the full model"""
    cache = forward(table, graphs, config)
    reports = [
        AspectContribution(
            aspects=[name], report=aspect_contribution(table, graphs, split, [name], config, ks, cache)
        )
        for name in graphs.aspect_names
    ]
    reports.append(
        AspectContribution(
            aspects=list(graphs.aspect_names),
            report=aspect_contribution(table, graphs, split, list(graphs.aspect_names), config, ks, cache),
        )
    )
    return reports


def independence_frame(cache: ForwardCache, aspect_names: list[str], index: int, entity: str = "user") -> pd.DataFrame:
    return pd.DataFrame(aspect_independence(cache, index, entity), index=aspect_names, columns=aspect_names)


def explain(
    cache: ForwardCache,
    aspect_names: list[str],
    pairs: list[tuple[int, int]],
    user_ids: list[str],
    item_ids: list[str],
) -> list[ExplainRow]:
    """Per-aspect preference scores for each (user, item) pair"""
    rows = []
    for user, item in pairs:
        by_aspect = score_by_aspect(cache, user, item)
        rows.append(
            ExplainRow(
                user_id=user_ids[user],
                item_id=item_ids[item],
                total=score(cache, user, item),
                by_aspect={name: float(v) for name, v in zip(aspect_names, by_aspect)},
            )
        )
    return rows


def explain_frame(rows: list[ExplainRow]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [row.by_aspect for row in rows],
        index=[f"{row.user_id} -> {row.item_id}" for row in rows],
    )
    frame["total"] = [row.total for row in rows]
    return frame


def save_report(report: MetricReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=2), encoding="utf-8")
