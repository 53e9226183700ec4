from enum import Enum
from pydantic import BaseModel, Field, field_validator, model_validator


class ParseStatus(str, Enum):
    clean = "clean"
    fallback = "fallback"
    failed = "failed"


class AspectCount(BaseModel):
    name: str
    frequency: int = Field(ge=0)


class AspectVocabulary(BaseModel):
    """Consolidated aspect names ranked by review frequency"""
    aspects: list[AspectCount]
    merge_map: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_ranking(self):
        names = [aspect.name for aspect in self.aspects]
        if len(set(names)) != len(names):
            raise ValueError("aspect names must be unique")
        frequencies = [aspect.frequency for aspect in self.aspects]
        if frequencies != sorted(frequencies, reverse=True):
            raise ValueError("aspects must be ordered by frequency descending")
        return self

    @property
    def names(self) -> list[str]:
        return [aspect.name for aspect in self.aspects]

    def top(self, n: int) -> "AspectVocabulary":
        kept = set(self.names[:n])
        return AspectVocabulary(
            aspects=self.aspects[:n],
            merge_map={raw: canon for raw, canon in self.merge_map.items() if canon in kept},
        )

    def synonyms(self, name: str) -> list[str]:
        """Raw names that merge into the canonical aspect, canonical first"""
        return [name] + sorted(raw for raw, canon in self.merge_map.items() if canon == name and raw != name)


class MergeRules(BaseModel):
    """Synonym → canonical aspect mapping, supplied as `merges.toml`"""
    merges: dict[str, str] = Field(default_factory=dict)
    drop: list[str] = Field(default_factory=list)

    @field_validator("merges")
    @classmethod
    def normalize_merges(cls, merges: dict[str, str]) -> dict[str, str]:
        return {raw.strip().lower(): canon.strip().lower() for raw, canon in merges.items()}

    @field_validator("drop")
    @classmethod
    def normalize_drop(cls, drop: list[str]) -> list[str]:
        return [name.strip().lower() for name in drop]

    def canonical(self, raw_name: str) -> str | None:
        name = raw_name.strip().lower()
        if name in self.drop:
            return None
        return self.merges.get(name, name)


class AspectAnnotation(BaseModel):
    user_index: int = Field(alias="u")
    item_index: int = Field(alias="i")
    present_aspects: list[str] = Field(default_factory=list, alias="aspects")
    parse_status: ParseStatus = Field(default=ParseStatus.clean, alias="status")
    raw_llm_output: str = Field(default="", alias="raw")

    model_config = {"populate_by_name": True}

    @model_validator(mode="after")
    def validate_failed_empty(self):
        if self.parse_status == ParseStatus.failed and self.present_aspects:
            raise ValueError("failed annotations carry no aspects")
        return self


class LlmFailure(BaseModel):
    """One entry of llm_failures.jsonl"""
    stage: str
    user_index: int
    item_index: int
    error: str
