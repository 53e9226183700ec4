import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.exceptions import PreconditionError
from app.services.prompts import DEFAULT_KEYWORDS

logger = logging.getLogger(__name__)

NOISE_REVIEW = "Arrived on time and matches the listing"
ASPECT_PHRASES = {
    "quality": "the quality is exactly what I hoped for",
    "price": "the price felt right for what you get",
}


@dataclass(frozen=True)
class PlantedCorpus:
    """Ground truth behind a generated corpus"""
    aspect_names: list[str]
    user_groups: np.ndarray  # (num_users, num_aspects)
    item_blocks: np.ndarray  # (num_items, num_aspects)
    aspect_edges: dict[str, list[tuple[int, int]]]
    noise_edges: list[tuple[int, int]]


def item_partition(num_items: int, num_blocks: int, aspect: int, rng: np.random.Generator) -> np.ndarray:
    """Block id per item; the first aspect uses contiguous blocks, the second interleaves them"""
    if aspect == 0:
        return np.arange(num_items) * num_blocks // num_items
    if aspect == 1:
        return np.arange(num_items) % num_blocks
    return rng.permutation(np.arange(num_items) * num_blocks // num_items)


def generate_planted(
    num_users: int = 200,
    num_items: int = 100,
    num_aspects: int = 2,
    num_blocks: int = 10,
    per_aspect: int = 6,
    noise: int = 3,
    seed: int = 2024,
) -> PlantedCorpus:
    """Interactions drawn from a per-aspect block structure plus uniform noise.

    Each user belongs to one group per aspect and interacts with
    `per_aspect` items of that aspect's matching item block; noise edges
    carry no aspect.
    """
    if num_aspects > len(DEFAULT_KEYWORDS):
        raise PreconditionError(f"at most {len(DEFAULT_KEYWORDS)} planted aspects are supported")
    block_size = num_items // num_blocks
    if per_aspect > block_size:
        raise PreconditionError(f"per_aspect={per_aspect} exceeds the block size {block_size}")
    names = list(ASPECT_PHRASES)[:num_aspects] + [
        name for name in DEFAULT_KEYWORDS if name not in ASPECT_PHRASES
    ][: max(0, num_aspects - len(ASPECT_PHRASES))]

    rng = np.random.default_rng(seed)
    item_blocks = np.stack([item_partition(num_items, num_blocks, a, rng) for a in range(num_aspects)], axis=1)
    user_groups = rng.integers(0, num_blocks, size=(num_users, num_aspects))
    aspect_edges: dict[str, list[tuple[int, int]]] = {name: [] for name in names}
    noise_edges: list[tuple[int, int]] = []
    for user in range(num_users):
        taken: set[int] = set()
        for a, name in enumerate(names):
            members = np.flatnonzero(item_blocks[:, a] == user_groups[user, a])
            for item in rng.choice(members, size=per_aspect, replace=False):
                aspect_edges[name].append((user, int(item)))
                taken.add(int(item))
        others = np.setdiff1d(np.arange(num_items), sorted(taken))
        for item in rng.choice(others, size=min(noise, len(others)), replace=False):
            noise_edges.append((user, int(item)))
    return PlantedCorpus(names, user_groups, item_blocks, aspect_edges, noise_edges)


def review_text(aspects: list[str]) -> str:
    if not aspects:
        return NOISE_REVIEW
    phrases = [ASPECT_PHRASES.get(name, f"the {name} stood out") for name in aspects]
    return "Overall, " + " and ".join(phrases)


def write_planted_corpus(planted: PlantedCorpus, corpus_path: Path, truth_path: Path | None = None) -> int:
    """Write the corpus as amazon-json-lines; returns the number of records."""
    by_pair: dict[tuple[int, int], list[str]] = {}
    for name in planted.aspect_names:
        for pair in planted.aspect_edges[name]:
            by_pair.setdefault(pair, []).append(name)
    for pair in planted.noise_edges:
        by_pair.setdefault(pair, [])

    count = 0
    with Path(corpus_path).open("w", encoding="utf-8") as handle:
        for timestamp, (user, item) in enumerate(sorted(by_pair)):
            aspects = by_pair[(user, item)]
            record = {
                "reviewerID": f"u{user}",
                "asin": f"i{item}",
                "overall": 5.0 if aspects else 3.0,
                "reviewText": review_text(aspects),
                "unixReviewTime": 1_600_000_000 + timestamp,
            }
            handle.write(json.dumps(record) + "\n")
            count += 1
    if truth_path is not None:
        truth = {
            "aspects": planted.aspect_names,
            "user_groups": planted.user_groups.tolist(),
            "item_blocks": planted.item_blocks.tolist(),
            "aspect_edges": {name: [list(p) for p in edges] for name, edges in planted.aspect_edges.items()},
            "noise_edges": [list(p) for p in planted.noise_edges],
        }
        Path(truth_path).write_text(json.dumps(truth), encoding="utf-8")
    logger.info(f"Wrote {count} planted interactions to {corpus_path}")
    return count
