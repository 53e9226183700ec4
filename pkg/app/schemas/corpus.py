from enum import Enum
from pydantic import BaseModel, Field, field_validator, model_validator


class CorpusFormat(str, Enum):
    amazon_json_lines = "amazon-json-lines"
    csv = "csv"


class InteractionRecord(BaseModel):
    """One (user, item, rating, review) tuple from the raw corpus"""
    user_id: str
    item_id: str
    rating: float = Field(ge=1.0, le=5.0)
    review_text: str
    timestamp: int | None = None

    @field_validator("user_id", "item_id")
    def validate_id(cls, value):
        value = value.strip()
        if not value:
            raise ValueError("external id must be non-empty")
        return value

    @property
    def has_review(self) -> bool:
        return bool(self.review_text.strip())


class IndexedRecord(InteractionRecord):
    """A deduplicated record together with its dense indices"""
    user_index: int = Field(ge=0)
    item_index: int = Field(ge=0)


class IdMaps(BaseModel):
    """Dense index assignment in first-appearance order"""
    user_index: dict[str, int] = Field(default_factory=dict)
    item_index: dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_bijective(self):
        for name, mapping in (("user", self.user_index), ("item", self.item_index)):
            if sorted(mapping.values()) != list(range(len(mapping))):
                raise ValueError(f"{name} indices must be contiguous from 0")
        return self

    @property
    def num_users(self) -> int:
        return len(self.user_index)

    @property
    def num_items(self) -> int:
        return len(self.item_index)

    def user_ids(self) -> list[str]:
        """External user ids ordered by dense index"""
        return sorted(self.user_index, key=self.user_index.__getitem__)

    def item_ids(self) -> list[str]:
        return sorted(self.item_index, key=self.item_index.__getitem__)


class SplitSpec(BaseModel):
    """Per-user train/validation/test partition of interaction pairs"""
    train: list[tuple[int, int]]
    validation: list[tuple[int, int]]
    test: list[tuple[int, int]]
    rng_seed: int

    def user_sets(self, partition: str) -> dict[int, set[int]]:
        sets: dict[int, set[int]] = {}
        for user, item in getattr(self, partition):
            sets.setdefault(user, set()).add(item)
        return sets


class CorpusStats(BaseModel):
    num_users: int
    num_items: int
    num_interactions: int
    sparsity: float
