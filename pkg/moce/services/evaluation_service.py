import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from ..config.moce_config import MODEL_PARAMETERS
from ..models.embedding import EmbeddingSet
from ..models.kmeans import KMeansModel
from ..models.moce_layer import RoutingRecord
from ..models.sequence import EncodedSequence
from ..schemas.instruction import InstructionRecord
from ..schemas.metrics import MetricsReport, RouteStatsReport
from ..utils.exceptions import ConfigurationError, ContractError
from .checkpoint_service import Checkpoint, load_checkpoint
from .clustering_service import load_kmeans, predict_labels
from .dataset_service import encode_record, ingest_dataset
from .embedding_service import EmbeddingService, load_embeddings
from .model_service import generate, lm_loss, model_forward, perplexity

logger = logging.getLogger(__name__)

ROUTE_STATS_CSV = "route_stats.csv"
ROUTE_STATS_JSON = "route_stats.json"
ROUTING_CSV = "routing.csv"
EVAL_JSON = "eval_metrics.json"
UNTAGGED = "untagged"

CheckpointLike = Union[str, Path, Checkpoint]
DatasetLike = Union[str, Path, Sequence[InstructionRecord]]


@dataclass
class SequenceResult:
    nll_sum: float
    supervised_tokens: int
    exact: bool
    record: RoutingRecord


def group_histogram(clustering: KMeansModel, embeddings: EmbeddingSet, sources: Sequence[str]) -> RouteStatsReport:
    """Predicted-cluster histogram overall and per source tag."""
    labels = predict_labels(clustering, embeddings)
    histogram = np.bincount(labels, minlength=clustering.k)
    per_source: Dict[str, List[int]] = {}
    for source in sorted(set(sources)):
        mask = np.array([s == source for s in sources])
        per_source[source] = np.bincount(labels[mask], minlength=clustering.k).tolist()
    return RouteStatsReport(
        num_groups=clustering.k,
        total_sequences=int(labels.size),
        histogram=histogram.tolist(),
        per_source=per_source,
    )


class EvaluationService:
    """Scores held-out records against a read-only checkpoint."""

    def __init__(
        self,
        checkpoint: CheckpointLike,
        clustering: Optional[Union[str, Path, KMeansModel]] = None,
        embeddings_path: Optional[Union[str, Path]] = None,
        n_jobs: Optional[int] = None,
    ):
        self.config = MODEL_PARAMETERS["evaluation"]
        self.checkpoint = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        self.model = self.checkpoint.model
        self.tokenizer = self.checkpoint.tokenizer
        self.embeddings_path = embeddings_path
        self.n_jobs = self.config["n_jobs"] if n_jobs is None else n_jobs

        if clustering is not None:
            model = clustering if isinstance(clustering, KMeansModel) else load_kmeans(clustering)
            if model.k != self.model.num_groups:
                raise ConfigurationError(
                    f"Clustering model has {model.k} clusters but the checkpoint has {self.model.num_groups} expert groups"
                )
            self.model.clustering = model

    @property
    def clustering(self) -> KMeansModel:
        return self.model.clustering

    def _records(self, dataset: DatasetLike) -> List[InstructionRecord]:
        records = ingest_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
        if not records:
            raise ContractError("Evaluation set is empty")
        return records

    def embed(self, records: Sequence[InstructionRecord]) -> EmbeddingSet:
        meta = self.checkpoint.metadata
        dimension = int(meta.get("embedding_dim", self.clustering.dimension))
        service = EmbeddingService(dimension, int(meta.get("embedding_seed", 0)), meta.get("embed_fields"))
        if meta.get("embedding_source") == "file":
            if self.embeddings_path is None:
                raise ConfigurationError("Checkpoint was trained on file embeddings; pass an embedding file for this dataset")
            embeddings = service.align(load_embeddings(self.embeddings_path), records)
        else:
            embeddings = service.embed_records(records, self.tokenizer)
        if embeddings.dimension != self.clustering.dimension:
            raise ConfigurationError(
                f"Embeddings of dimension {embeddings.dimension} do not match the clustering model ({self.clustering.dimension})"
            )
        return embeddings

    def route(self, records: Sequence[InstructionRecord]) -> np.ndarray:
        """One group per record, predicted once from its embedding."""
        return predict_labels(self.clustering, self.embed(records))

    def _score(self, sequence: EncodedSequence, group_id: int, index: int, decode: bool) -> SequenceResult:
        record = RoutingRecord(keep_gates=False)
        logits = model_forward(self.model, sequence.input_ids, group_id, record, index)
        loss = lm_loss(logits, sequence.targets, sequence.loss_mask).item()
        exact = False
        if decode:
            budget = max(len(sequence.response_ids) + 1, 1)
            exact = generate(self.model, sequence.prompt_ids, group_id, budget) == sequence.response_ids
        return SequenceResult(loss * sequence.supervised_tokens, sequence.supervised_tokens, exact, record)

    def _run(self, records: Sequence[InstructionRecord], groups: np.ndarray, decode: bool) -> List[SequenceResult]:
        sequences = [encode_record(r, self.tokenizer, self.model.config.max_seq_len) for r in records]
        # Threads share the read-only model; results come back in dataset order.
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self._score)(sequence, int(group), index, decode)
            for index, (sequence, group) in enumerate(zip(sequences, groups))
        )

    def evaluate(self, dataset: DatasetLike) -> MetricsReport:
        records = self._records(dataset)
        groups = self.route(records)
        results = self._run(records, groups, decode=True)

        usage = RoutingRecord(keep_gates=False)
        for result in results:
            usage.extend(result.record)
        tokens = sum(r.supervised_tokens for r in results)
        eval_loss = sum(r.nll_sum for r in results) / tokens
        exact_match = sum(r.exact for r in results) / len(results)
        config = self.model.config
        token_layers = sum(usage.total_tokens(layer) for layer in range(config.n_layers))
        forwards = sum(e.selected.size for e in usage.entries)
        report = MetricsReport(
            eval_loss=eval_loss,
            perplexity=perplexity(eval_loss),
            exact_match=exact_match,
            num_groups=config.num_groups,
            num_experts=config.num_experts,
            total_tokens=usage.total_tokens(),
            group_token_counts=usage.group_token_counts(config.num_groups),
            load_fractions=usage.load_fraction_report(),
            active_experts_per_token=float(config.active_experts_per_token),
            expert_forwards_per_token=forwards / token_layers if token_layers else 0.0,
        )
        logger.info(
            f"Evaluated {len(records)} records: loss={eval_loss:.4f}, perplexity={report.perplexity:.3f}, "
            f"exact_match={exact_match:.3f}"
        )
        return report

    def route_stats(self, dataset: DatasetLike, output_dir: Optional[Union[str, Path]] = None) -> RouteStatsReport:
        records = self._records(dataset)
        embeddings = self.embed(records)
        report = group_histogram(self.clustering, embeddings, [r.source or UNTAGGED for r in records])
        groups = predict_labels(self.clustering, embeddings)

        usage = RoutingRecord(keep_gates=False)
        for result in self._run(records, groups, decode=False):
            usage.extend(result.record)
        report.load_fractions = usage.load_fraction_report()

        if output_dir is not None:
            write_route_stats(report, usage, Path(output_dir))
        return report


def write_route_stats(report: RouteStatsReport, usage: RoutingRecord, output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / ROUTE_STATS_CSV, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["source", "group", "count", "fraction"])
        rows = [("all", report.histogram)] + sorted(report.per_source.items())
        for source, counts in rows:
            total = max(sum(counts), 1)
            for group, count in enumerate(counts):
                writer.writerow([source, group, count, repr(count / total)])
    (output_dir / ROUTE_STATS_JSON).write_text(json.dumps(report.model_dump(), indent=2), encoding="utf-8")
    usage.to_csv(output_dir / ROUTING_CSV)
    logger.info(f"Wrote routing statistics to {output_dir}")


def pipeline_eval(
    checkpoint: CheckpointLike,
    dataset: DatasetLike,
    clustering: Optional[Union[str, Path, KMeansModel]] = None,
    embeddings_path: Optional[Union[str, Path]] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> MetricsReport:
    report = EvaluationService(checkpoint, clustering, embeddings_path).evaluate(dataset)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        (Path(output_dir) / EVAL_JSON).write_text(json.dumps(report.model_dump(), indent=2), encoding="utf-8")
    return report


def route_stats(
    checkpoint: CheckpointLike,
    dataset: DatasetLike,
    clustering: Optional[Union[str, Path, KMeansModel]] = None,
    embeddings_path: Optional[Union[str, Path]] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RouteStatsReport:
    return EvaluationService(checkpoint, clustering, embeddings_path).route_stats(dataset, output_dir)
