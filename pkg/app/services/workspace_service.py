import hashlib
import json
import logging
from pathlib import Path

from app.exceptions import ManifestError
from app.schemas.pipeline import PipelineManifest, StageRecord

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "idmaps": "idmaps.json",
    "split": "split.json",
    "raw_aspects": "raw_aspects.json",
    "aspects": "aspects.json",
    "annotations": "annotations.jsonl",
    "graphs": "graphs.bin",
    "graphs_summary": "graphs.json",
    "checkpoint": "model.ckpt",
    "checkpoint_meta": "model.meta.json",
    "training_log": "training_log.jsonl",
    "metrics": "metrics.json",
    "contribution": "aspect_contribution.json",
    "independence": "independence.csv",
    "sweep": "sweep.csv",
    "llm_rank": "llm_rank.json",
    "failures": "llm_failures.jsonl",
    "synthetic": "synthetic.jsonl",
    "planted": "planted.json",
}

# Stage → stages whose outputs it consumes
UPSTREAM = {
    "extract": [],
    "consolidate": ["extract"],
    "annotate": ["extract", "consolidate"],
    "build-graphs": ["extract", "consolidate", "annotate"],
    "train": ["extract", "build-graphs"],
    "eval": ["extract", "build-graphs", "train"],
    "explain": ["extract", "build-graphs", "train"],
    "sweep": ["extract", "consolidate", "annotate"],
    "llm-rank": ["extract"],
}


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Workspace:
    """Stage artifacts and the manifest recording what produced them"""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = self._load()

    def _load(self) -> PipelineManifest:
        if self.manifest_path.exists():
            return PipelineManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))
        return PipelineManifest()

    def save(self) -> None:
        self.manifest_path.write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")

    def path(self, artifact: str) -> Path:
        return self.root / ARTIFACTS[artifact]

    @property
    def cache_dir(self) -> Path:
        return self.root / "llm_cache"

    def check_upstream(self, stage: str) -> None:
        """Refuse to run unless every upstream stage completed and its outputs are unchanged."""
        for upstream in UPSTREAM[stage]:
            record = self.manifest.stages.get(upstream)
            if record is None or not record.completed:
                raise ManifestError(f"'{stage}' needs the outputs of '{upstream}'; run '{upstream}' first", upstream)
            for artifact, expected in record.output_hashes.items():
                path = self.path(artifact)
                if not path.exists():
                    raise ManifestError(f"{path.name} is missing; rerun '{upstream}'", upstream)
                if file_hash(path) != expected:
                    raise ManifestError(
                        f"{path.name} changed since '{upstream}' produced it; rerun '{upstream}'", upstream
                    )
            for producer, hashes in record.consumed.items():
                if self.stage_hashes(producer) != hashes:
                    raise ManifestError(
                        f"'{upstream}' is out of date since '{producer}' reran; rerun '{upstream}'", upstream
                    )

    def input_hash(self, stage: str, settings: dict | None = None) -> str:
        """Digest of upstream output hashes plus the stage settings"""
        payload = {
            "upstream": {
                name: self.manifest.stages[name].output_hashes
                for name in UPSTREAM[stage]
                if name in self.manifest.stages
            },
            "settings": settings or {},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()

    def is_current(self, stage: str, input_hash: str) -> bool:
        """True when the stage already ran on these inputs and its outputs are intact"""
        record = self.manifest.stages.get(stage)
        if record is None or not record.completed or record.input_hash != input_hash:
            return False
        return all(
            self.path(artifact).exists() and file_hash(self.path(artifact)) == expected
            for artifact, expected in record.output_hashes.items()
        )

    def stage_hashes(self, stage: str) -> dict[str, str]:
        record = self.manifest.stages.get(stage)
        return {} if record is None else record.output_hashes

    def complete(self, stage: str, artifacts: list[str], input_hash: str) -> None:
        self.manifest.stages[stage] = StageRecord(
            artifacts={name: ARTIFACTS[name] for name in artifacts},
            input_hash=input_hash,
            output_hashes={name: file_hash(self.path(name)) for name in artifacts},
            consumed={name: dict(self.stage_hashes(name)) for name in UPSTREAM[stage]},
            completed=True,
        )
        self.save()
        logger.info(f"Stage '{stage}' complete")
