import logging
from pathlib import Path

from app.commands.common import add_backend_arguments, begin_stage, load_merge_rules, make_backend
from app.exceptions import BackendError, PreconditionError
from app.schemas.aspects import ParseStatus
from app.schemas.corpus import CorpusFormat
from app.services.aspect_service import (
    AspectExtractionService,
    consolidate_aspects,
    load_raw_counts,
    load_vocabulary,
    save_annotations,
    save_raw_counts,
    save_vocabulary,
)
from app.services.corpus_service import (
    corpus_stats,
    load_corpus,
    load_saved_corpus,
    save_corpus,
    save_id_maps,
    save_split,
    split_interactions,
)
from app.services.workspace_service import Workspace, file_hash

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_SEED = 2024


def get_extraction_service(args, workspace: Workspace) -> AspectExtractionService:
    return AspectExtractionService(
        make_backend(args, workspace), failure_log=workspace.path("failures"), progress=not args.quiet
    )


def _fixture_hashes(directory: Path) -> dict[str, str]:
    return {path.name: file_hash(path) for path in sorted(Path(directory).glob("*.json"))}


def _backend_settings(args) -> dict:
    return {
        "backend": args.backend,
        "fixtures": _fixture_hashes(args.fixtures) if args.fixtures is not None else None,
    }


def cmd_extract(args, workspace: Workspace):
    """Parse the corpus, split it, and count the raw aspects the LLM discovers"""
    if not args.corpus.exists():
        raise PreconditionError(f"corpus file not found: {args.corpus}")
    seed = DEFAULT_SPLIT_SEED if args.seed is None else args.seed
    settings = {
        "corpus": file_hash(args.corpus),
        "format": args.format,
        "seed": seed,
        **_backend_settings(args),
    }
    input_hash = begin_stage(args, workspace, "extract", settings)
    if input_hash is None:
        return

    records, id_maps = load_corpus(args.corpus, args.format)
    stats = corpus_stats(records, id_maps)
    logger.info(
        f"Corpus: {stats.num_users} users, {stats.num_items} items, "
        f"{stats.num_interactions} interactions, sparsity {stats.sparsity:.4%}"
    )
    split = split_interactions(records, seed=seed)

    workspace.path("failures").unlink(missing_ok=True)
    service = get_extraction_service(args, workspace)
    counts = service.extract(records)
    reviewed = sum(1 for record in records if record.has_review)
    if reviewed and len(service.failures) == reviewed:
        raise BackendError(f"aspect discovery failed for all {reviewed} reviews")

    save_corpus(records, workspace.path("corpus"))
    save_id_maps(id_maps, workspace.path("idmaps"))
    save_split(split, workspace.path("split"))
    save_raw_counts(counts, workspace.path("raw_aspects"))
    workspace.manifest.stats = stats.model_dump()
    workspace.complete("extract", ["corpus", "idmaps", "split", "raw_aspects"], input_hash)


def cmd_consolidate(args, workspace: Workspace):
    """Merge synonyms and keep the most frequent aspects"""
    rules = load_merge_rules(args.merge)
    input_hash = begin_stage(args, workspace, "consolidate", {"n": args.n, "rules": rules.model_dump()})
    if input_hash is None:
        return
    vocabulary = consolidate_aspects(load_raw_counts(workspace.path("raw_aspects")), args.n, rules)
    for position, aspect in enumerate(vocabulary.aspects, start=1):
        print(f"{position}. {aspect.name}: {aspect.frequency}")
    save_vocabulary(vocabulary, workspace.path("aspects"))
    workspace.complete("consolidate", ["aspects"], input_hash)


def cmd_annotate(args, workspace: Workspace):
    """Ask which vocabulary aspects each review mentions"""
    input_hash = begin_stage(args, workspace, "annotate", _backend_settings(args))
    if input_hash is None:
        return
    records = load_saved_corpus(workspace.path("corpus"))
    vocabulary = load_vocabulary(workspace.path("aspects"))
    service = get_extraction_service(args, workspace)
    annotations = service.annotate(records, vocabulary)
    save_annotations(annotations, workspace.path("annotations"))

    reviewed = sum(1 for record in records if record.has_review)
    failed = sum(1 for a in annotations if a.parse_status == ParseStatus.failed)
    if reviewed and failed == reviewed:
        # Leave the stage incomplete so `annotate --resume` can pick up from the cache
        raise BackendError(f"annotation failed for all {reviewed} reviews")
    if failed:
        logger.warning(f"{failed} reviews kept their interaction without aspects after backend failures")
    workspace.complete("annotate", ["annotations"], input_hash)


def register(subparsers, parents):
    extract = subparsers.add_parser("extract", parents=parents, help="discover raw aspects in the reviews")
    extract.add_argument("--corpus", type=Path, required=True)
    extract.add_argument(
        "--format", choices=[f.value for f in CorpusFormat], default=CorpusFormat.amazon_json_lines.value
    )
    add_backend_arguments(extract)
    extract.set_defaults(handler=cmd_extract)

    consolidate = subparsers.add_parser("consolidate", parents=parents, help="build the aspect vocabulary")
    consolidate.add_argument("--n", type=int, default=8, help="vocabulary size")
    consolidate.add_argument("--merge", type=Path, help="TOML file of synonym merges")
    consolidate.set_defaults(handler=cmd_consolidate)

    annotate = subparsers.add_parser("annotate", parents=parents, help="label each review with vocabulary aspects")
    add_backend_arguments(annotate)
    annotate.set_defaults(handler=cmd_annotate)
