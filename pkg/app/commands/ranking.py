import json
import logging
from pathlib import Path

from app.commands.common import add_backend_arguments, begin_stage, make_backend
from app.exceptions import BackendError, PreconditionError
from app.services.corpus_service import load_id_maps, load_saved_corpus, load_split
from app.services.eval_service import save_report
from app.services.ranking_service import LlmRankingProtocol
from app.services.workspace_service import Workspace, file_hash

logger = logging.getLogger(__name__)


def load_titles(path: Path | None) -> dict[str, str]:
    if path is None:
        return {}
    if not path.exists():
        raise PreconditionError(f"titles file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def cmd_llm_rank(args, workspace: Workspace):
    """Zero-shot LLM ranking of one held-out item against sampled negatives"""
    seed = 2024 if args.seed is None else args.seed
    ks = sorted(set(args.k))
    settings = {
        "users": args.users,
        "negatives": args.negatives,
        "k": ks,
        "seed": seed,
        "backend": args.backend,
        "titles": file_hash(args.titles) if args.titles is not None and args.titles.exists() else None,
    }
    input_hash = begin_stage(args, workspace, "llm-rank", settings)
    if input_hash is None:
        return
    id_maps = load_id_maps(workspace.path("idmaps"))
    protocol = LlmRankingProtocol(
        make_backend(args, workspace), id_maps.item_ids(), load_titles(args.titles), args.negatives
    )
    report = protocol.run(
        load_saved_corpus(workspace.path("corpus")), load_split(workspace.path("split")), args.users, ks, seed
    )
    if report.num_eval_users == 0:
        raise BackendError(f"ranking failed for all {report.num_sampled_users} sampled users")
    save_report(report, workspace.path("llm_rank"))
    print(f"LLM ranking over {report.num_eval_users} users ({report.num_failures} failed)")
    for k in ks:
        print(f"  Recall@{k}: {report.recall_at[k]:.4f}  NDCG@{k}: {report.ndcg_at[k]:.4f}")
    workspace.complete("llm-rank", ["llm_rank"], input_hash)


def register(subparsers, parents):
    rank = subparsers.add_parser("llm-rank", parents=parents, help="zero-shot LLM ranking baseline")
    rank.add_argument("--users", type=int, default=200, help="users to sample")
    rank.add_argument("--negatives", type=int, default=9, help="negative candidates per user")
    rank.add_argument("--titles", type=Path, help="JSON map of item id to title")
    rank.add_argument("--k", type=int, nargs="+", default=[1, 3, 5, 7])
    add_backend_arguments(rank)
    rank.set_defaults(handler=cmd_llm_rank)
