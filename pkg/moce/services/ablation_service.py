import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..config.moce_config import MODEL_PARAMETERS
from ..schemas.config import RunConfig
from ..schemas.instruction import InstructionRecord
from ..schemas.metrics import AblationRow
from ..utils.exceptions import ConfigurationError, ContractError
from ..utils.seeding import CLUSTERING, substream_seed
from .checkpoint_service import load_checkpoint
from .clustering_service import ClusteringService
from .dataset_service import build_tokenizer, ingest_dataset
from .evaluation_service import EvaluationService
from .training_service import TrainingService

logger = logging.getLogger(__name__)

ROUTING_STRATEGIES: List[Tuple[str, Dict[str, Any]]] = [
    ("top-1", {"top_k": 1, "mode": "topk"}),
    ("top-2", {"top_k": 2, "mode": "topk"}),
    ("soft", {"mode": "soft"}),
]

STAGES: List[Tuple[str, Dict[str, Any]]] = [
    ("clustering", {}),
    ("no_clustering", {"no_clustering": True, "k_max": None, "num_groups": None}),
    ("no_token_routing", {"no_token_routing": True, "num_experts": 1, "top_k": 1}),
]

EXPERT_COUNTS = (1, 2, 4)


class AblationService:
    """Trains and scores a grid of routing configurations on shared data and seeds."""

    def __init__(
        self,
        base_config: RunConfig,
        train_records: Optional[Sequence[InstructionRecord]] = None,
        eval_records: Optional[Sequence[InstructionRecord]] = None,
    ):
        if base_config.no_clustering or base_config.no_token_routing:
            raise ConfigurationError("The ablation base config must enable both clustering and token routing")
        self.base_config = base_config
        self.train_records = list(train_records) if train_records is not None else self._load(base_config.train_path)
        if eval_records is not None:
            self.eval_records = list(eval_records)
        elif base_config.eval_path:
            self.eval_records = ingest_dataset(base_config.eval_path)
        else:
            self.eval_records = self.train_records
        self.output_dir = Path(base_config.output_dir)

    @staticmethod
    def _load(path: Optional[str]) -> List[InstructionRecord]:
        if not path:
            raise ContractError("Ablation needs training records or a train_path")
        return ingest_dataset(path)

    def _derive(self, label: str, seed: int, overrides: Dict[str, Any]) -> RunConfig:
        values = self.base_config.model_dump()
        values.update(overrides)
        values["seed"] = seed
        values["output_dir"] = str(self.output_dir / f"seed{seed}" / label)
        return RunConfig.from_mapping(values)

    def run_one(self, table: str, label: str, config: RunConfig) -> AblationRow:
        try:
            result = TrainingService(config).pipeline_train(self.train_records)
        except Exception as e:
            logger.error(f"Ablation run {label} (seed {config.seed}) failed: {str(e)}")
            raise
        report = EvaluationService(load_checkpoint(result.checkpoint_dir)).evaluate(self.eval_records)
        model_config = result.model.config
        return AblationRow(
            table=table,
            label=label,
            top_k=model_config.top_k,
            mode=model_config.mode,
            clustering=not config.no_clustering,
            token_routing=not config.no_token_routing,
            num_groups=model_config.num_groups,
            num_experts=model_config.num_experts,
            seed=config.seed,
            heldout_loss=report.eval_loss,
            exact_match=report.exact_match,
            final_train_loss=result.report.final_loss,
            active_experts_per_token=result.report.active_experts_per_token,
            expert_forwards_per_token=result.report.expert_forwards_per_token,
        )

    def routing_grid(self, seed: int) -> List[AblationRow]:
        rows = []
        for strategy, routing in ROUTING_STRATEGIES:
            for stage, stage_overrides in STAGES:
                overrides = dict(routing)
                overrides.update(stage_overrides)
                if overrides.get("top_k", self.base_config.top_k) > overrides.get("num_experts", self.base_config.num_experts):
                    overrides["top_k"] = overrides.get("num_experts", self.base_config.num_experts)
                label = f"{strategy}/{stage}"
                rows.append(self.run_one("routing", label, self._derive(label.replace("/", "_"), seed, overrides)))
        return rows

    def expert_scaling(self, seed: int) -> List[AblationRow]:
        rows = []
        for count in EXPERT_COUNTS:
            label = f"N={count}"
            overrides = {"num_experts": count, "top_k": min(self.base_config.top_k, count), "mode": "topk"}
            rows.append(self.run_one("expert_scaling", label, self._derive(f"experts{count}", seed, overrides)))
        return rows

    def run(self, seeds: Optional[Sequence[int]] = None) -> List[AblationRow]:
        rows: List[AblationRow] = []
        for seed in seeds or [self.base_config.seed]:
            rows.extend(self.routing_grid(seed))
            rows.extend(self.expert_scaling(seed))
        write_rows(rows, self.output_dir)
        logger.info(f"Ablation finished: {len(rows)} rows written to {self.output_dir}")
        return rows

    def cluster_sweep(self, counts: Sequence[int], seeds: Optional[Sequence[int]] = None) -> Tuple[List[AblationRow], int]:
        """Fixed-M runs for every count, plus the elbow choice on the same embeddings."""
        if not counts:
            raise ContractError("cluster_sweep needs at least one cluster count")
        rows: List[AblationRow] = []
        for seed in seeds or [self.base_config.seed]:
            for count in counts:
                overrides = {"num_groups": count, "k_max": None}
                rows.append(self.run_one("cluster_sweep", f"M={count}", self._derive(f"groups{count}", seed, overrides)))

        trainer = TrainingService(self.base_config)
        embeddings = trainer.embed(self.train_records, build_tokenizer(self.train_records))
        k_max = min(self.base_config.k_max or MODEL_PARAMETERS["clustering"]["k_max"], len(embeddings))
        report, _, _ = ClusteringService(seed=substream_seed(self.base_config.seed, CLUSTERING)).select(embeddings, k_max)
        write_rows(rows, self.output_dir, stem="cluster_sweep")
        logger.info(f"Cluster sweep over M={list(counts)}; elbow selects M={report.selected_k}")
        return rows, report.selected_k


def write_rows(rows: Sequence[AblationRow], output_dir: Path, stem: str = "ablation") -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    fields = list(AblationRow.model_fields)
    with open(output_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump())
    (output_dir / f"{stem}.json").write_text(json.dumps([row.model_dump() for row in rows], indent=2), encoding="utf-8")


def ablation_run(
    base_config: RunConfig,
    train_records: Optional[Sequence[InstructionRecord]] = None,
    eval_records: Optional[Sequence[InstructionRecord]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> List[AblationRow]:
    return AblationService(base_config, train_records, eval_records).run(seeds)


def cluster_sweep(
    base_config: RunConfig,
    counts: Sequence[int],
    train_records: Optional[Sequence[InstructionRecord]] = None,
    eval_records: Optional[Sequence[InstructionRecord]] = None,
) -> Tuple[List[AblationRow], int]:
    return AblationService(base_config, train_records, eval_records).cluster_sweep(counts)
