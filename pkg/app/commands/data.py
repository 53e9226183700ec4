import logging
from pathlib import Path

from app.services.synthetic_service import generate_planted, write_planted_corpus
from app.services.workspace_service import Workspace

logger = logging.getLogger(__name__)


def cmd_gen_synthetic(args, workspace: Workspace):
    """Write a corpus generated from known per-aspect block structure"""
    planted = generate_planted(
        num_users=args.users,
        num_items=args.items,
        num_aspects=args.aspects,
        num_blocks=args.blocks,
        per_aspect=args.per_aspect,
        noise=args.noise,
        seed=2024 if args.seed is None else args.seed,
    )
    out = args.out or workspace.path("synthetic")
    count = write_planted_corpus(planted, out, workspace.path("planted"))
    print(f"Wrote {count} interactions to {out}; aspects: {', '.join(planted.aspect_names)}")


def register(subparsers, parents):
    synthetic = subparsers.add_parser("gen-synthetic", parents=parents, help="write a planted-aspect corpus")
    synthetic.add_argument("--out", type=Path, help="corpus path (default: synthetic.jsonl in the workspace)")
    synthetic.add_argument("--users", type=int, default=200)
    synthetic.add_argument("--items", type=int, default=100)
    synthetic.add_argument("--aspects", type=int, default=2)
    synthetic.add_argument("--blocks", type=int, default=10, help="item blocks per aspect")
    synthetic.add_argument("--per-aspect", type=int, default=6, help="items per user and aspect")
    synthetic.add_argument("--noise", type=int, default=3, help="aspect-free interactions per user")
    synthetic.set_defaults(handler=cmd_gen_synthetic)
