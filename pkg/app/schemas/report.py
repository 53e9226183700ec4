from pydantic import BaseModel, Field


class MetricReport(BaseModel):
    recall_at: dict[int, float] = Field(default_factory=dict)
    ndcg_at: dict[int, float] = Field(default_factory=dict)
    num_eval_users: int = 0


class AspectContribution(BaseModel):
    aspects: list[str]
    report: MetricReport


class LlmRankReport(MetricReport):
    num_sampled_users: int = 0
    num_failures: int = 0


class ExplainRow(BaseModel):
    """Per-aspect preference scores for one (user, item) pair"""
    user_id: str
    item_id: str
    total: float
    by_aspect: dict[str, float]
