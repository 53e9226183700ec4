import json
import logging

import numpy as np

from app.commands.common import begin_stage, load_run_config, load_store, resolve_index
from app.exceptions import ManifestError, PreconditionError
from app.schemas.model import ModelConfig
from app.services.corpus_service import load_id_maps, load_split
from app.services.eval_service import (
    contribution_reports,
    evaluate,
    explain,
    explain_frame,
    independence_frame,
    save_report,
)
from app.services.graph_service import NormalizedAspectGraph, build_graphs, load_graphs, save_graphs
from app.services.model_service import EmbeddingTable, config_hash, forward, load_checkpoint, save_checkpoint
from app.services.sweep_service import SWEEP_FIELDS, sweep, sweep_frame
from app.services.trainer_service import save_training_log, train
from app.services.workspace_service import Workspace

logger = logging.getLogger(__name__)


def cmd_build_graphs(args, workspace: Workspace):
    """Normalized per-aspect graphs over the training interactions"""
    run_config = load_run_config(args)
    include_base = run_config.model.include_base_graph and not args.single_graph
    settings = {"single_graph": args.single_graph, "include_base": include_base, "aspects": args.aspects}
    input_hash = begin_stage(args, workspace, "build-graphs", settings)
    if input_hash is None:
        return
    store, _ = load_store(workspace)
    if args.single_graph:
        store = store.merged()
    elif args.aspects is not None:
        store = store.ranked().top(args.aspects)
    graphs = build_graphs(store, load_split(workspace.path("split")).train, include_base)
    for name, edges in graphs.edge_counts().items():
        logger.info(f"Graph '{name}': {edges} edges")
    save_graphs(graphs, workspace.path("graphs"), workspace.path("graphs_summary"))
    workspace.complete("build-graphs", ["graphs", "graphs_summary"], input_hash)


def cmd_train(args, workspace: Workspace):
    run_config = load_run_config(args)
    input_hash = begin_stage(args, workspace, "train", run_config.model_dump())
    if input_hash is None:
        return
    graphs = load_graphs(workspace.path("graphs"))
    # Every stored graph, base block included, gets its own embedding block
    model_config = run_config.model.model_copy(
        update={"num_aspects": graphs.num_aspects, "include_base_graph": False}
    )
    if run_config.model.num_blocks != graphs.num_aspects:
        logger.info(f"Training on the {graphs.num_aspects} stored graphs: {', '.join(graphs.aspect_names)}")
    result = train(
        load_split(workspace.path("split")), graphs, model_config, run_config.train, progress=not args.quiet
    )
    logger.info(f"Best epoch {result.best_epoch} with validation recall {result.best_recall:.4f}")
    save_checkpoint(
        result.table, model_config, graphs.aspect_names,
        workspace.path("checkpoint"), workspace.path("checkpoint_meta"),
    )
    save_training_log(result.log, workspace.path("training_log"))
    workspace.complete("train", ["checkpoint", "checkpoint_meta", "training_log"], input_hash)


def load_trained_model(workspace: Workspace) -> tuple[EmbeddingTable, ModelConfig, NormalizedAspectGraph]:
    """Checkpoint and graphs, refusing any pair that was not trained together"""
    table, model_config = load_checkpoint(workspace.path("checkpoint"))
    meta = json.loads(workspace.path("checkpoint_meta").read_text(encoding="utf-8"))
    if meta.get("config_hash") != config_hash(model_config):
        raise ManifestError("model.meta.json does not describe model.ckpt; rerun 'train'", "train")
    graphs = load_graphs(workspace.path("graphs"))
    if meta.get("aspects") != graphs.aspect_names:
        raise ManifestError(
            f"checkpoint aspects {meta.get('aspects')} differ from the graphs {graphs.aspect_names}; rerun 'train'",
            "train",
        )
    return table, model_config, graphs


def _print_report(title: str, report):
    print(title)
    for k in sorted(report.recall_at):
        print(f"  Recall@{k}: {report.recall_at[k]:.4f}  NDCG@{k}: {report.ndcg_at[k]:.4f}")


def cmd_eval(args, workspace: Workspace):
    ks = sorted(set(args.k or [10, 20]))
    settings = {"k": ks, "per_aspect": args.per_aspect, "independence": args.independence, "user": args.user}
    input_hash = begin_stage(args, workspace, "eval", settings)
    if input_hash is None:
        return
    table, model_config, graphs = load_trained_model(workspace)
    split = load_split(workspace.path("split"))
    cache = forward(table, graphs, model_config)

    report = evaluate(cache, split, ks)
    save_report(report, workspace.path("metrics"))
    _print_report(f"Test metrics over {report.num_eval_users} users", report)
    artifacts = ["metrics"]

    if args.per_aspect:
        contributions = contribution_reports(table, graphs, split, model_config, ks)
        workspace.path("contribution").write_text(
            json.dumps([c.model_dump() for c in contributions], indent=2), encoding="utf-8"
        )
        for contribution in contributions:
            _print_report(" + ".join(contribution.aspects), contribution.report)
        artifacts.append("contribution")

    if args.independence:
        id_maps = load_id_maps(workspace.path("idmaps"))
        if args.user is not None:
            user = resolve_index(args.user, id_maps.user_index, "u")
        else:
            seed = model_config.seed if args.seed is None else args.seed
            user = int(np.random.default_rng(seed).integers(id_maps.num_users))
        frame = independence_frame(cache, graphs.aspect_names, user)
        frame.to_csv(workspace.path("independence"))
        print(f"Aspect cosine similarity for user {id_maps.user_ids()[user]}")
        print(frame.round(4).to_string())
        artifacts.append("independence")

    workspace.complete("eval", artifacts, input_hash)


def _explain_pairs(users: list[int], items: list[int]) -> list[tuple[int, int]]:
    if len(users) == 1:
        return [(users[0], item) for item in items]
    if len(items) == 1:
        return [(user, items[0]) for user in users]
    if len(users) == len(items):
        return list(zip(users, items))
    raise PreconditionError("give one --user with several --item, several --user with one --item, or equal counts")


def cmd_explain(args, workspace: Workspace):
    """Print the per-aspect preference scores behind recommendations"""
    workspace.check_upstream("explain")
    table, model_config, graphs = load_trained_model(workspace)
    id_maps = load_id_maps(workspace.path("idmaps"))
    users = [resolve_index(name, id_maps.user_index, "u") for name in args.user]
    items = [resolve_index(name, id_maps.item_index, "i") for name in args.item]
    rows = explain(
        forward(table, graphs, model_config),
        graphs.aspect_names,
        _explain_pairs(users, items),
        id_maps.user_ids(),
        id_maps.item_ids(),
    )
    print(explain_frame(rows).round(4).to_string())


def cmd_sweep(args, workspace: Workspace):
    """Retrain once per value of an aspect count, layer count or embedding size"""
    run_config = load_run_config(args)
    ks = sorted(set(args.k or [10, 20]))
    settings = {"over": args.over, "values": args.values, "k": ks, "run": run_config.model_dump()}
    input_hash = begin_stage(args, workspace, "sweep", settings)
    if input_hash is None:
        return
    store, _ = load_store(workspace)
    reports = sweep(
        store,
        load_split(workspace.path("split")),
        run_config.model,
        run_config.train,
        args.over,
        args.values,
        ks,
        progress=not args.quiet,
    )
    frame = sweep_frame(args.over, reports)
    frame.to_csv(workspace.path("sweep"), index=False)
    print(frame.round(4).to_string(index=False))
    workspace.complete("sweep", ["sweep"], input_hash)


def register(subparsers, parents):
    graphs = subparsers.add_parser("build-graphs", parents=parents, help="build the normalized aspect graphs")
    graphs.add_argument("--single-graph", action="store_true", help="one graph over all training interactions")
    graphs.add_argument("--aspects", type=int, help="keep only the N aspects with the most interactions")
    graphs.set_defaults(handler=cmd_build_graphs)

    trainer = subparsers.add_parser("train", parents=parents, help="fit the embeddings with BPR")
    trainer.add_argument("--epochs", type=int)
    trainer.add_argument("--lr", type=float)
    trainer.add_argument("--batch-size", type=int)
    trainer.add_argument("--weight-decay", type=float)
    trainer.add_argument("--layers", type=int)
    trainer.add_argument("--dim", type=int)
    trainer.add_argument("--patience", type=int)
    trainer.set_defaults(handler=cmd_train)

    evaluation = subparsers.add_parser("eval", parents=parents, help="Recall and NDCG on the test split")
    evaluation.add_argument("--k", type=int, action="append", help="cutoff, repeatable (default 10 and 20)")
    evaluation.add_argument("--per-aspect", action="store_true", help="also score each aspect on its own")
    evaluation.add_argument("--independence", action="store_true", help="write the aspect cosine matrix")
    evaluation.add_argument("--user", help="user for --independence (default: a seeded random user)")
    evaluation.set_defaults(handler=cmd_eval)

    explainer = subparsers.add_parser("explain", parents=parents, help="per-aspect scores of (user, item) pairs")
    explainer.add_argument("--user", action="append", required=True)
    explainer.add_argument("--item", action="append", required=True)
    explainer.set_defaults(handler=cmd_explain)

    sweeper = subparsers.add_parser("sweep", parents=parents, help="retrain across a range of settings")
    sweeper.add_argument("--over", choices=list(SWEEP_FIELDS), default="aspects")
    sweeper.add_argument("--values", type=int, nargs="+", required=True)
    sweeper.add_argument("--k", type=int, action="append")
    sweeper.set_defaults(handler=cmd_sweep)
