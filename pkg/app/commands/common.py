import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

from app.exceptions import PreconditionError
from app.schemas.aspects import MergeRules
from app.schemas.corpus import IdMaps
from app.schemas.model import RunConfig
from app.services.aspect_service import build_aspect_interactions, load_annotations, load_vocabulary
from app.services.corpus_service import load_id_maps, load_saved_corpus
from app.services.graph_service import AspectInteractionStore
from app.services.llm_backend import CachedBackend, LlmBackend, MockBackend, OllamaBackend, ResponseCache
from app.services.prompts import KeywordResponder
from app.services.workspace_service import Workspace

logger = logging.getLogger(__name__)


def add_backend_arguments(parser):
    parser.add_argument("--backend", choices=["mock", "http"], default="mock")
    parser.add_argument("--fixtures", type=Path, help="directory of canned mock responses")
    parser.add_argument("--concurrency", type=int, default=None, help="requests in flight")
    parser.add_argument("--resume", action="store_true", help="reuse responses already in llm_cache/")


def make_backend(args, workspace: Workspace) -> LlmBackend:
    """Backend selected by --backend, recording responses in the workspace cache"""
    if args.backend == "mock":
        concurrency = args.concurrency or 1
        if args.fixtures is not None:
            inner = MockBackend.from_fixtures(args.fixtures, KeywordResponder(), max_concurrency=concurrency)
        else:
            inner = MockBackend(responder=KeywordResponder(), max_concurrency=concurrency)
    else:
        inner = OllamaBackend(max_concurrency=args.concurrency)
    return CachedBackend(inner, ResponseCache(workspace.cache_dir), read=args.resume)


def load_run_config(args) -> RunConfig:
    """`--config` TOML file, then CLI overrides, then `--seed`"""
    run_config = RunConfig()
    if args.config is not None:
        if not Path(args.config).exists():
            raise PreconditionError(f"config file not found: {args.config}")
        with open(args.config, "rb") as handle:
            run_config = RunConfig.model_validate(tomllib.load(handle))
    model_updates = {
        "num_layers": getattr(args, "layers", None),
        "embed_dim": getattr(args, "dim", None),
    }
    train_updates = {
        "max_epochs": getattr(args, "epochs", None),
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "patience": getattr(args, "patience", None),
    }
    run_config = RunConfig(
        model=run_config.model.model_copy(update={k: v for k, v in model_updates.items() if v is not None}),
        train=run_config.train.model_copy(update={k: v for k, v in train_updates.items() if v is not None}),
    )
    return run_config.with_seed(args.seed)


def load_merge_rules(path: Path | None) -> MergeRules:
    if path is None:
        return MergeRules()
    with open(path, "rb") as handle:
        return MergeRules.model_validate(tomllib.load(handle))


def load_store(workspace: Workspace) -> tuple[AspectInteractionStore, IdMaps]:
    """Aspect interaction store rebuilt from the corpus and annotation artifacts"""
    records = load_saved_corpus(workspace.path("corpus"))
    id_maps = load_id_maps(workspace.path("idmaps"))
    store = build_aspect_interactions(
        load_annotations(workspace.path("annotations")),
        [(r.user_index, r.item_index) for r in records],
        load_vocabulary(workspace.path("aspects")),
        id_maps.num_users,
        id_maps.num_items,
    )
    return store, id_maps


def resolve_index(name: str, mapping: dict[str, int], prefix: str) -> int:
    """External id, or `<prefix><dense index>` such as u3547"""
    if name in mapping:
        return mapping[name]
    match = re.fullmatch(rf"{prefix}(\d+)", name)
    if match and int(match.group(1)) < len(mapping):
        return int(match.group(1))
    raise PreconditionError(f"unknown id '{name}'")


def begin_stage(args, workspace: Workspace, stage: str, settings: dict | None = None) -> str | None:
    """Input hash of the stage, or None when it already ran on the same inputs"""
    workspace.check_upstream(stage)
    input_hash = workspace.input_hash(stage, settings)
    if not args.force and workspace.is_current(stage, input_hash):
        logger.info(f"'{stage}' is up to date; pass --force to rerun it")
        return None
    return input_hash
