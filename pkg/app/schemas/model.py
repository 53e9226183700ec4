from pydantic import BaseModel, Field, model_serializer


class ModelConfig(BaseModel):
    """Shape and initialization of the aspect embedding table"""
    num_aspects: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    num_layers: int = Field(default=3, ge=0)
    init_scale: float = Field(default=0.01, gt=0.0)
    seed: int = 2024
    # Prepend the full training graph as an extra block (literal A+1-block concatenation)
    include_base_graph: bool = False

    @property
    def num_blocks(self) -> int:
        return self.num_aspects + int(self.include_base_graph)


class TrainConfig(BaseModel):
    batch_size: int = Field(default=1024, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    max_epochs: int = Field(default=1000, ge=1)
    patience: int = Field(default=20, ge=1)
    eval_k: int = Field(default=10, ge=1)
    seed: int = 2024
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    early_stopping: bool = True
    record_elapsed: bool = False


class RunConfig(BaseModel):
    """Contents of `train.toml`"""
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return RunConfig(
            model=self.model.model_copy(update={"seed": seed}),
            train=self.train.model_copy(update={"seed": seed}),
        )


class EpochLog(BaseModel):
    """One line of training_log.jsonl"""
    epoch: int
    mean_loss: float
    val_recall: float
    val_ndcg: float
    elapsed_s: float | None = None
    eval_k: int = 10

    @model_serializer(mode="wrap")
    def _name_cutoff(self, handler):
        # Metric keys carry the validation cutoff, e.g. val_recall@20
        data = handler(self)
        return {
            "epoch": data["epoch"],
            "mean_loss": data["mean_loss"],
            f"val_recall@{self.eval_k}": data["val_recall"],
            f"val_ndcg@{self.eval_k}": data["val_ndcg"],
            "elapsed_s": data["elapsed_s"],
        }
