import json
import shutil
import tempfile
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import unittest
from pathlib import Path

import numpy as np

from app.exceptions import PreconditionError, VocabularyError
from app.schemas.aspects import AspectAnnotation, AspectCount, AspectVocabulary, MergeRules, ParseStatus
from app.schemas.corpus import IndexedRecord
from app.services.aspect_service import (
    AspectExtractionService,
    annotate_review,
    build_aspect_interactions,
    consolidate_aspects,
    discover_aspects,
    parse_annotation,
    parse_aspect_labels,
)
from app.services.llm_backend import CachedBackend, MockBackend, ResponseCache
from app.services.prompts import KeywordResponder, aspect_extraction_prompt, aspect_review_prompt

FIXTURES = Path(__file__).parent / "fixtures"


def vocabulary(*names, merge_map=None):
    return AspectVocabulary(
        aspects=[AspectCount(name=name, frequency=len(names) - n) for n, name in enumerate(names)],
        merge_map=merge_map or {},
    )


def record(user, item, text):
    return IndexedRecord(
        user_id=f"u{user}", item_id=f"i{item}", rating=4.0, review_text=text, user_index=user, item_index=item
    )


class TestAspectExtraction(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.fixtures = json.loads((FIXTURES / "llm" / "storage_bins.json").read_text(encoding="utf-8"))
        cls.review = cls.fixtures[0]["review"]
        cls.backend = MockBackend.from_fixtures(FIXTURES / "llm")

    def test_fixture_prompts_match_templates(self):
        self.assertEqual(self.fixtures[0]["prompt"], aspect_extraction_prompt(self.review))
        self.assertEqual(
            self.fixtures[1]["prompt"], aspect_review_prompt(self.review, self.fixtures[1]["aspects"])
        )

    def test_discover_storage_bin_aspects(self):
        aspects = discover_aspects(self.review, self.backend)

        self.assertIn("functionality", aspects)
        self.assertIn("durability", aspects)

    def test_annotate_storage_bin_review(self):
        vocab = vocabulary("functionality", "ease of use", "durability")

        annotation = annotate_review(self.review, vocab, self.backend, 3, 5)

        # A complaint about durability is still an interaction on durability
        self.assertEqual(annotation.present_aspects, ["functionality", "durability"])
        self.assertEqual(annotation.parse_status, ParseStatus.clean)
        self.assertEqual((annotation.user_index, annotation.item_index), (3, 5))
        self.assertIn("did not mention anything about the ease of use", annotation.raw_llm_output)

    def test_empty_review_is_rejected(self):
        with self.assertRaises(PreconditionError):
            discover_aspects("   ", self.backend)

    def test_numbered_labels(self):
        self.assertEqual(parse_aspect_labels("1. Quality: solid build\n2. Price: a bargain"), ["quality", "price"])
        self.assertEqual(parse_aspect_labels("1. Quality: solid. 2. Price: cheap."), ["quality", "price"])

    def test_bulleted_and_markdown_labels(self):
        response = "Perspectives:\n- **Design**: sleek\n* Ease of Use: simple\n  and quick to set up\n• Size: compact"

        self.assertEqual(parse_aspect_labels(response), ["design", "ease of use", "size"])

    def test_unstructured_answer_has_no_labels(self):
        self.assertEqual(parse_aspect_labels("The customer liked it: a lot."), [])


class TestConsolidation(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.counts = json.loads((FIXTURES / "office_aspect_counts.json").read_text(encoding="utf-8"))
        with open(FIXTURES / "merges.toml", "rb") as handle:
            cls.rules = MergeRules.model_validate(tomllib.load(handle))

    def test_office_vocabulary_ordering(self):
        vocab = consolidate_aspects(self.counts, 8, self.rules)

        self.assertEqual(
            vocab.names,
            ["quality", "functionality", "ease of use", "convenience", "comfort", "durability", "design", "price"],
        )
        self.assertEqual(vocab.aspects[0].frequency, 43850)
        self.assertEqual(vocab.aspects[-1].frequency, 23661)
        self.assertEqual(vocab.merge_map["value"], "price")
        self.assertEqual(vocab.synonyms("price"), ["price", "value"])

    def test_merge_sums_counts(self):
        vocab = consolidate_aspects({"price": 5, "cost": 3}, 1, {"cost": "price"})

        self.assertEqual(vocab.aspects, [AspectCount(name="price", frequency=8)])

    def test_rule_names_are_case_insensitive(self):
        rules = MergeRules(merges={"Cost ": "Price"}, drop=["Customer Service"])

        vocab = consolidate_aspects({"price": 5, "cost": 3, "customer service": 9}, 1, rules)

        self.assertEqual(vocab.aspects, [AspectCount(name="price", frequency=8)])
        self.assertEqual(vocab.merge_map, {"cost": "price"})

    def test_ties_break_lexicographically(self):
        vocab = consolidate_aspects({"b": 3, "a": 3, "c": 5}, 3)

        self.assertEqual(vocab.names, ["c", "a", "b"])

    def test_too_few_aspects(self):
        with self.assertRaises(VocabularyError) as ctx:
            consolidate_aspects({"quality": 2, "price": 1}, 8)
        self.assertEqual(ctx.exception.available, 2)

    def test_dropped_aspects_are_removed(self):
        vocab = consolidate_aspects(self.counts, 9, self.rules)

        self.assertNotIn("customer service", vocab.names)
        self.assertEqual(vocab.names[-1], "packaging")
        with self.assertRaises(VocabularyError):
            consolidate_aspects(self.counts, 10, self.rules)


class TestAnnotationParsing(unittest.TestCase):
    def setUp(self):
        self.vocab = vocabulary("quality", "durability", "price", merge_map={"cost": "price"})

    def test_negation_marks_absence(self):
        response = (
            "1. Quality: The customer did not mention the quality.\n"
            "2. Durability: Not addressed in the review.\n"
            "3. Price: The customer found the cost reasonable."
        )

        present, status = parse_annotation(response, self.vocab)

        self.assertEqual(present, ["price"])
        self.assertEqual(status, ParseStatus.clean)

    def test_synonym_attributes_line(self):
        present, _ = parse_annotation("- The cost was too high for what it is.", self.vocab)

        self.assertEqual(present, ["price"])

    def test_first_line_per_aspect_decides(self):
        response = "1. Quality: great quality.\n2. Quality: no information beyond that."

        present, _ = parse_annotation(response, self.vocab)

        self.assertEqual(present, ["quality"])

    def test_aspects_without_a_line_are_absent(self):
        present, _ = parse_annotation("1. Durability: it broke after a week.", self.vocab)

        self.assertEqual(present, ["durability"])

    def test_unrecognizable_response_falls_back(self):
        present, status = parse_annotation("I am not able to answer that.", self.vocab)

        self.assertEqual(present, [])
        self.assertEqual(status, ParseStatus.fallback)


class TestAspectInteractions(unittest.TestCase):
    def test_shared_edge_appears_in_both_aspects(self):
        vocab = vocabulary("quality", "price")
        annotations = [
            AspectAnnotation(user_index=0, item_index=1, present_aspects=["quality", "price"]),
            AspectAnnotation(user_index=1, item_index=0, present_aspects=[]),
            AspectAnnotation(user_index=1, item_index=1, present_aspects=["price"]),
        ]

        store = build_aspect_interactions(annotations, [(0, 1), (1, 0), (1, 1)], vocab, 2, 2)

        self.assertEqual(store.aspect_names, ["quality", "price"])
        np.testing.assert_array_equal(store.aspect_edges[0], [[0, 1]])
        np.testing.assert_array_equal(store.aspect_edges[1], [[0, 1], [1, 1]])
        np.testing.assert_array_equal(store.base_edges, [[0, 1], [1, 0], [1, 1]])

    def test_unknown_pair_is_rejected(self):
        annotations = [AspectAnnotation(user_index=0, item_index=0, present_aspects=["quality"])]

        with self.assertRaises(PreconditionError):
            build_aspect_interactions(annotations, [(0, 1)], vocabulary("quality"), 2, 2)


class TestExtractionService(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp_dir = Path(tempfile.mkdtemp())
        cls.records = [
            record(0, 0, "The quality is great and the price is fair"),
            record(0, 1, "Great price"),
            record(1, 0, ""),
            record(1, 1, "Very sturdy and easy to use"),
        ]
        cls.vocab = vocabulary("quality", "durability", "ease of use", "price")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp_dir)

    def test_extract_counts_reviews_per_aspect(self):
        service = AspectExtractionService(MockBackend(responder=KeywordResponder()), progress=False)

        counts = service.extract(self.records)

        self.assertEqual(counts, {"price": 2, "durability": 1, "ease of use": 1, "quality": 1})
        self.assertEqual(list(counts)[0], "price")

    def test_annotate_keeps_empty_reviews(self):
        service = AspectExtractionService(MockBackend(responder=KeywordResponder(), max_concurrency=3), progress=False)

        annotations = service.annotate(list(reversed(self.records)), self.vocab)

        self.assertEqual([(a.user_index, a.item_index) for a in annotations], [(0, 0), (0, 1), (1, 0), (1, 1)])
        self.assertEqual(annotations[0].present_aspects, ["quality", "price"])
        self.assertEqual(annotations[2].present_aspects, [])
        self.assertEqual(annotations[2].parse_status, ParseStatus.fallback)
        self.assertEqual(annotations[3].present_aspects, ["durability", "ease of use"])

    def test_failed_requests_keep_base_interactions(self):
        # No responder: every request the backend has no canned answer for fails
        backend = MockBackend()
        backend.add_response(
            aspect_review_prompt("Great price", self.vocab.names), "1. Price: The customer mentioned the price."
        )
        failure_log = self.tmp_dir / "failures.jsonl"
        service = AspectExtractionService(backend, failure_log=failure_log, progress=False)

        annotations = service.annotate(self.records, self.vocab)
        store = build_aspect_interactions(
            annotations, [(r.user_index, r.item_index) for r in self.records], self.vocab, 2, 2
        )

        statuses = [a.parse_status for a in annotations]
        self.assertEqual(statuses.count(ParseStatus.failed), 2)
        self.assertEqual(len(store.base_edges), 4)
        np.testing.assert_array_equal(store.aspect_edges[3], [[0, 1]])
        self.assertEqual(sum(len(edges) for edges in store.aspect_edges), 1)
        lines = failure_log.read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(json.loads(lines[0])["stage"], "annotate")

    def test_cached_annotation_is_idempotent(self):
        cache = ResponseCache(self.tmp_dir / "llm_cache")
        first_inner = MockBackend(responder=KeywordResponder())
        first = AspectExtractionService(CachedBackend(first_inner, cache), progress=False).annotate(
            self.records, self.vocab
        )

        resumed_inner = MockBackend(responder=KeywordResponder())
        resumed_backend = CachedBackend(resumed_inner, cache)
        second = AspectExtractionService(resumed_backend, progress=False).annotate(self.records, self.vocab)

        self.assertEqual(first_inner.calls, 3)
        self.assertEqual(resumed_inner.calls, 0)
        self.assertEqual(resumed_backend.hits, 3)
        self.assertEqual(first, second)
        self.assertEqual(len(list((self.tmp_dir / "llm_cache").glob("*.json"))), 3)


if __name__ == "__main__":
    unittest.main()
