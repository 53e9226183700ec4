import logging

import pandas as pd

from app.exceptions import PreconditionError
from app.schemas.corpus import SplitSpec
from app.schemas.model import ModelConfig, TrainConfig
from app.schemas.report import MetricReport
from app.services.eval_service import evaluate
from app.services.graph_service import AspectInteractionStore, build_graphs
from app.services.model_service import forward
from app.services.trainer_service import train

logger = logging.getLogger(__name__)

SWEEP_FIELDS = {"aspects": "num_aspects", "layers": "num_layers", "dim": "embed_dim"}


def _fit_and_score(store, split, model_config, train_config, ks, progress) -> MetricReport:
    graphs = build_graphs(store, split.train, model_config.include_base_graph)
    result = train(split, graphs, model_config, train_config, progress=progress)
    return evaluate(forward(result.table, graphs, model_config), split, ks)


def sweep(
    store: AspectInteractionStore,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    over: str,
    values: list[int],
    ks: list[int] = (10, 20),
    progress: bool = False,
) -> list[tuple[int, MetricReport]]:
    """Train and test once per value of the swept model setting.

    Sweeping `aspects` keeps the n aspects with the most interactions.
    """
    if over not in SWEEP_FIELDS:
        raise PreconditionError(f"cannot sweep over {over!r}; choose from {', '.join(SWEEP_FIELDS)}")
    if over == "aspects":
        too_many = [n for n in values if n > store.num_aspects]
        if too_many:
            raise PreconditionError(f"only {store.num_aspects} aspects available, requested {too_many}")
    reports = []
    for value in values:
        config = model_config.model_copy(update={SWEEP_FIELDS[over]: value})
        selected = store
        if over == "aspects":
            selected = store.ranked().top(value)
        else:
            config = config.model_copy(update={"num_aspects": store.num_aspects})
        logger.info(f"Sweep {over}={value}")
        reports.append((value, _fit_and_score(selected, split, config, train_config, list(ks), progress)))
    return reports


def aspect_count_sweep(
    store: AspectInteractionStore,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_values: list[int],
    ks: list[int] = (10, 20),
    progress: bool = False,
) -> list[tuple[int, MetricReport]]:
    return sweep(store, split, model_config, train_config, "aspects", n_values, ks, progress)


def sweep_frame(over: str, reports: list[tuple[int, MetricReport]]) -> pd.DataFrame:
    rows = []
    for value, report in reports:
        row = {over: value, "num_eval_users": report.num_eval_users}
        row.update({f"recall@{k}": v for k, v in report.recall_at.items()})
        row.update({f"ndcg@{k}": v for k, v in report.ndcg_at.items()})
        rows.append(row)
    return pd.DataFrame(rows)
