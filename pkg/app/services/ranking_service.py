import logging
import re

import numpy as np

from app.exceptions import BackendError, PreconditionError
from app.schemas.corpus import IndexedRecord, SplitSpec
from app.schemas.report import LlmRankReport
from app.services.eval_service import RankingResult, ndcg_at_k, recall_at_k
from app.services.llm_backend import LlmBackend
from app.services.prompts import ranking_prompt

logger = logging.getLogger(__name__)

_RATING_LINE = re.compile(
    r"item id:\s*(?P<item_id>[^)\s]+)\s*\)?.*?rating:\s*(?P<rating>\d+(?:\.\d+)?)", re.I
)


def parse_ratings(response: str) -> list[tuple[str, float]]:
    """(item id, rating) in response order; the first rating of an item wins"""
    seen: dict[str, float] = {}
    for line in response.splitlines():
        match = _RATING_LINE.search(line)
        if match and match.group("item_id") not in seen:
            seen[match.group("item_id")] = float(match.group("rating"))
    return list(seen.items())


def llm_rank_baseline(
    history: list[tuple[str, float]], candidates: list[tuple[str, str]], backend: LlmBackend
) -> list[str]:
    """Rank candidates by the star rating the backend predicts for each.

    Candidates the response does not rate get 0 and keep their given order
    after the rated ones; equal ratings keep response order.
    """
    if not candidates:
        raise PreconditionError("no candidates to rank")
    response = backend.complete(ranking_prompt(history, candidates))
    rated = {item_id: (rating, position) for position, (item_id, rating) in enumerate(parse_ratings(response))}
    order = []
    for position, (_, item_id) in enumerate(candidates):
        rating, response_position = rated.get(item_id, (0.0, len(rated) + position))
        order.append((-rating, response_position, item_id))
    return [item_id for _, _, item_id in sorted(order)]


class LlmRankingProtocol:
    """One held-out positive against sampled negatives per user, ranked by the LLM"""

    def __init__(
        self,
        backend: LlmBackend,
        item_ids: list[str],
        titles: dict[str, str] | None = None,
        num_negatives: int = 9,
        max_history: int = 20,
    ):
        self.backend = backend
        self.item_ids = item_ids
        self.titles = titles or {}
        self.num_negatives = num_negatives
        self.max_history = max_history

    def title(self, item: int) -> str:
        item_id = self.item_ids[item]
        return self.titles.get(item_id, item_id)

    def run(
        self,
        records: list[IndexedRecord],
        split: SplitSpec,
        num_users: int = 200,
        ks: list[int] = (1, 3, 5, 7),
        seed: int = 2024,
    ) -> LlmRankReport:
        ratings = {(r.user_index, r.item_index): r.rating for r in records}
        train = split.user_sets("train")
        test = split.user_sets("test")
        interacted: dict[int, set[int]] = {}
        for record in records:
            interacted.setdefault(record.user_index, set()).add(record.item_index)
        num_items = len(self.item_ids)
        eligible = sorted(
            u for u, items in test.items()
            if items and num_items - len(interacted[u]) >= self.num_negatives
        )
        if not eligible:
            raise PreconditionError("no user has a test item and enough uninteracted items")

        rng = np.random.default_rng(seed)
        sampled = rng.choice(eligible, size=min(num_users, len(eligible)), replace=False)
        top_items, relevant, failures = [], [], 0
        for user in sorted(int(u) for u in sampled):
            positive = int(rng.choice(sorted(test[user])))
            pool = np.setdiff1d(np.arange(num_items), sorted(interacted[user]))
            negatives = rng.choice(pool, size=self.num_negatives, replace=False)
            candidates = [positive] + [int(i) for i in negatives]
            candidates = [candidates[p] for p in rng.permutation(len(candidates))]
            history = [(self.title(i), ratings[(user, i)]) for i in sorted(train.get(user, ()))][: self.max_history]
            try:
                ranked_ids = llm_rank_baseline(
                    history, [(self.title(i), self.item_ids[i]) for i in candidates], self.backend
                )
            except BackendError as e:
                logger.warning(f"LLM ranking failed for user {user}: {e}")
                failures += 1
                continue
            index_of = {self.item_ids[i]: i for i in candidates}
            top_items.append(np.array([index_of[item_id] for item_id in ranked_ids], dtype=np.int64))
            relevant.append({positive})

        if failures:
            logger.warning(f"{failures} of {len(sampled)} users failed; reporting the rest")
        ks = sorted(set(ks))
        result = RankingResult(
            users=np.arange(len(top_items)), top_items=top_items, top_scores=[], relevant=relevant,
            k=1 + self.num_negatives,
        )
        return LlmRankReport(
            recall_at={k: recall_at_k(result, k) for k in ks},
            ndcg_at={k: ndcg_at_k(result, k) for k in ks},
            num_eval_users=len(top_items),
            num_sampled_users=len(sampled),
            num_failures=failures,
        )
