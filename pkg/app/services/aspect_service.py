import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from tqdm import tqdm

from app.exceptions import BackendError, PreconditionError, VocabularyError
from app.schemas.aspects import (
    AspectAnnotation,
    AspectCount,
    AspectVocabulary,
    LlmFailure,
    MergeRules,
    ParseStatus,
)
from app.schemas.corpus import IndexedRecord
from app.services.graph_service import AspectInteractionStore, edge_keys, normalize_edges
from app.services.llm_backend import LlmBackend
from app.services.prompts import aspect_extraction_prompt, aspect_review_prompt

logger = logging.getLogger(__name__)

NEGATION_PATTERNS = (
    "did not mention",
    "didn't mention",
    "does not mention",
    "no mention",
    "not mentioned",
    "not addressed",
    "no information",
)
_NEGATION = re.compile("|".join(re.escape(p) for p in NEGATION_PATTERNS), re.I)
# Numbered or bulleted point markers, also when several points share one line
_POINT_START = re.compile(r"(?:^(?:[-*•]|\d{1,2}[.)])|(?<=\s)\d{1,2}[.)])\s+")
_MARKDOWN = re.compile(r"[*_`#]+")


def split_points(response: str) -> list[tuple[bool, str]]:
    """Split an answer into points.

    Returns (is_bullet, text) pairs; lines without a marker continue the
    previous bullet, or stand alone before the first one.
    """
    points: list[tuple[bool, str]] = []
    for line in response.splitlines():
        line = line.strip()
        if not line:
            continue
        starts = [m for m in _POINT_START.finditer(line)]
        if not starts:
            if points and points[-1][0]:
                points[-1] = (True, f"{points[-1][1]} {line}".strip())
            else:
                points.append((False, line))
            continue
        if starts[0].start() > 0:
            points.append((False, line[: starts[0].start()].strip()))
        for current, following in zip(starts, starts[1:] + [None]):
            end = following.start() if following is not None else len(line)
            points.append((True, line[current.end(): end].strip()))
    return points


def parse_aspect_labels(response: str) -> list[str]:
    """Aspect names from the leading label of each point ("1. Quality: ...")."""
    labels = []
    for is_bullet, text in split_points(response):
        if not is_bullet or ":" not in text:
            continue
        label = _MARKDOWN.sub("", text.split(":", 1)[0]).strip().lower()
        if label and label not in labels:
            labels.append(label)
    return labels


def discover_aspects(review: str, backend: LlmBackend) -> list[str]:
    """Ask the backend which perspectives a review covers."""
    if not review or not review.strip():
        raise PreconditionError("review text is empty")
    response = backend.complete(aspect_extraction_prompt(review))
    return parse_aspect_labels(response)


def consolidate_aspects(
    raw_counts: dict[str, int], target_n: int, merge_rules: MergeRules | dict | None = None
) -> AspectVocabulary:
    """Merge synonyms, then keep the target_n most frequent canonical aspects."""
    if target_n < 1:
        raise PreconditionError("target_n must be at least 1")
    if merge_rules is None:
        merge_rules = MergeRules()
    elif isinstance(merge_rules, dict):
        merge_rules = MergeRules(merges=merge_rules)

    merged: Counter = Counter()
    merge_map: dict[str, str] = {}
    for raw_name, count in raw_counts.items():
        canonical = merge_rules.canonical(raw_name)
        if canonical is None:
            continue
        merged[canonical] += count
        if canonical != raw_name.strip().lower():
            merge_map[raw_name.strip().lower()] = canonical

    ranked = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < target_n:
        raise VocabularyError(
            f"only {len(ranked)} distinct aspects available, {target_n} requested",
            available=len(ranked),
        )
    selected = ranked[:target_n]
    kept = {name for name, _ in selected}
    return AspectVocabulary(
        aspects=[AspectCount(name=name, frequency=count) for name, count in selected],
        merge_map={raw: canon for raw, canon in sorted(merge_map.items()) if canon in kept},
    )


def _aspect_patterns(vocabulary: AspectVocabulary) -> list[tuple[str, re.Pattern]]:
    patterns = []
    for name in vocabulary.names:
        for surface in vocabulary.synonyms(name):
            patterns.append((name, re.compile(rf"\b{re.escape(surface)}\b", re.I)))
    return patterns


def attribute_line(text: str, patterns: list[tuple[str, re.Pattern]]) -> str | None:
    """The aspect whose name or synonym appears earliest in the line"""
    best = None
    for name, pattern in patterns:
        match = pattern.search(text)
        if match and (best is None or match.start() < best[0]):
            best = (match.start(), name)
    return best[1] if best else None


def parse_annotation(response: str, vocabulary: AspectVocabulary) -> tuple[list[str], ParseStatus]:
    patterns = _aspect_patterns(vocabulary)
    decided: dict[str, bool] = {}
    for _, text in split_points(response):
        aspect = attribute_line(text, patterns)
        if aspect is None or aspect in decided:
            continue
        decided[aspect] = _NEGATION.search(text) is None
    if not decided:
        return [], ParseStatus.fallback
    present = [name for name in vocabulary.names if decided.get(name)]
    return present, ParseStatus.clean


def annotate_review(
    review: str,
    vocabulary: AspectVocabulary,
    backend: LlmBackend,
    user_index: int = 0,
    item_index: int = 0,
) -> AspectAnnotation:
    """Decide which vocabulary aspects a review interacts with.

    A mention counts even when its sentiment is negative; only the negation
    patterns mark an aspect absent.
    """
    if not vocabulary.aspects:
        raise PreconditionError("vocabulary is empty")
    if not review or not review.strip():
        raise PreconditionError("review text is empty")
    try:
        response = backend.complete(aspect_review_prompt(review, vocabulary.names))
    except BackendError as e:
        logger.warning(f"Annotation failed for ({user_index}, {item_index}): {e}")
        return AspectAnnotation(
            user_index=user_index, item_index=item_index, parse_status=ParseStatus.failed
        )
    present, status = parse_annotation(response, vocabulary)
    return AspectAnnotation(
        user_index=user_index,
        item_index=item_index,
        present_aspects=present,
        parse_status=status,
        raw_llm_output=response,
    )


def build_aspect_interactions(
    annotations: list[AspectAnnotation],
    base,
    vocabulary: AspectVocabulary,
    num_users: int,
    num_items: int,
) -> AspectInteractionStore:
    """One edge list per vocabulary aspect; the base keeps every interaction."""
    base_edges = normalize_edges(base, num_users, num_items)
    base_keys = set(edge_keys(base_edges, num_items).tolist())
    per_aspect: dict[str, list[tuple[int, int]]] = {name: [] for name in vocabulary.names}
    for annotation in annotations:
        pair = (annotation.user_index, annotation.item_index)
        in_range = 0 <= pair[0] < num_users and 0 <= pair[1] < num_items
        if not in_range or pair[0] * num_items + pair[1] not in base_keys:
            raise PreconditionError(f"annotation for unknown interaction {pair}")
        for name in annotation.present_aspects:
            if name not in per_aspect:
                raise PreconditionError(f"annotation names aspect '{name}' outside the vocabulary")
            per_aspect[name].append(pair)
    return AspectInteractionStore(
        num_users=num_users,
        num_items=num_items,
        base_edges=base_edges,
        aspect_edges=[normalize_edges(per_aspect[name], num_users, num_items) for name in vocabulary.names],
        aspect_names=vocabulary.names,
    )


class AspectExtractionService:
    """Runs both prompting stages over a corpus with a bounded worker pool"""

    def __init__(self, backend: LlmBackend, failure_log: Path | None = None, progress: bool = True):
        self.backend = backend
        self.failure_log = failure_log
        self.progress = progress
        self.failures: list[LlmFailure] = []

    def _record_failure(self, stage: str, record: IndexedRecord, error: Exception):
        logger.warning(f"{stage} failed for ({record.user_index}, {record.item_index}): {error}")
        self.failures.append(
            LlmFailure(stage=stage, user_index=record.user_index, item_index=record.item_index, error=str(error))
        )

    def _run(self, fn, records: list[IndexedRecord], desc: str) -> list:
        with ThreadPoolExecutor(max_workers=self.backend.max_concurrency) as pool:
            results = pool.map(fn, records)
            return list(tqdm(results, total=len(records), desc=desc, disable=not self.progress))

    def _flush_failures(self):
        if self.failure_log is None or not self.failures:
            return
        with self.failure_log.open("a", encoding="utf-8") as handle:
            for failure in self.failures:
                handle.write(failure.model_dump_json() + "\n")

    def extract(self, records: list[IndexedRecord]) -> dict[str, int]:
        """Count, per raw aspect name, the reviews that mention it."""
        usable = [r for r in records if r.has_review]

        def discover(record: IndexedRecord):
            try:
                return discover_aspects(record.review_text, self.backend)
            except BackendError as e:
                self._record_failure("extract", record, e)
                return None

        counts: Counter = Counter()
        fallbacks = 0
        for labels in self._run(discover, usable, "Extracting aspects"):
            if labels is None:
                continue
            if not labels:
                fallbacks += 1
            counts.update(set(labels))
        if fallbacks:
            logger.warning(f"{fallbacks} reviews yielded no parseable aspects")
        logger.info(f"Found {len(counts)} raw aspects across {len(usable)} reviews")
        self._flush_failures()
        return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))

    def annotate(self, records: list[IndexedRecord], vocabulary: AspectVocabulary) -> list[AspectAnnotation]:
        """Annotate every review; empty reviews keep their interaction with no aspects."""

        def annotate(record: IndexedRecord) -> AspectAnnotation:
            if not record.has_review:
                return AspectAnnotation(
                    user_index=record.user_index, item_index=record.item_index, parse_status=ParseStatus.fallback
                )
            annotation = annotate_review(
                record.review_text, vocabulary, self.backend, record.user_index, record.item_index
            )
            if annotation.parse_status == ParseStatus.failed:
                self.failures.append(
                    LlmFailure(
                        stage="annotate",
                        user_index=record.user_index,
                        item_index=record.item_index,
                        error="backend request failed",
                    )
                )
            return annotation

        annotations = self._run(annotate, records, "Annotating reviews")
        annotations.sort(key=lambda a: (a.user_index, a.item_index))
        statuses = Counter(a.parse_status for a in annotations)
        logger.info(
            f"Annotated {len(annotations)} reviews: "
            + ", ".join(f"{status.value}={statuses[status]}" for status in ParseStatus)
        )
        self._flush_failures()
        return annotations


def save_vocabulary(vocabulary: AspectVocabulary, path: Path) -> None:
    path.write_text(vocabulary.model_dump_json(indent=2), encoding="utf-8")


def load_vocabulary(path: Path) -> AspectVocabulary:
    return AspectVocabulary.model_validate_json(path.read_text(encoding="utf-8"))


def save_annotations(annotations: list[AspectAnnotation], path: Path) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for annotation in annotations:
            handle.write(
                annotation.model_dump_json(by_alias=True, exclude={"raw_llm_output"}) + "\n"
            )


def load_annotations(path: Path) -> list[AspectAnnotation]:
    with path.open("r", encoding="utf-8") as handle:
        return [AspectAnnotation.model_validate_json(line) for line in handle if line.strip()]


def save_raw_counts(counts: dict[str, int], path: Path) -> None:
    path.write_text(json.dumps(counts, indent=2), encoding="utf-8")


def load_raw_counts(path: Path) -> dict[str, int]:
    return json.loads(path.read_text(encoding="utf-8"))
