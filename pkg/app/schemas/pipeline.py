from pydantic import BaseModel, Field


class StageRecord(BaseModel):
    artifacts: dict[str, str] = Field(default_factory=dict)
    input_hash: str = ""
    output_hashes: dict[str, str] = Field(default_factory=dict)
    # Upstream output hashes at completion time
    consumed: dict[str, dict[str, str]] = Field(default_factory=dict)
    completed: bool = False


class PipelineManifest(BaseModel):
    """Stage completion flags and the hashes each stage consumed"""
    stages: dict[str, StageRecord] = Field(default_factory=dict)
    stats: dict[str, float] = Field(default_factory=dict)
