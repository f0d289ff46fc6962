import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.moce_config import MONITORING
from ..engine import ops
from ..engine.optim import Adam
from ..engine.tensor import ComputationTape, Tensor
from ..models.embedding import EmbeddingSet
from ..models.kmeans import ClusterAssignment, KMeansModel
from ..models.moce_layer import RoutingRecord
from ..models.sequence import EncodedSequence
from ..models.transformer import DenseTransformer, MoCEModel
from ..schemas.config import ModelConfig, RunConfig
from ..schemas.instruction import InstructionRecord
from ..schemas.metrics import MetricsReport, StepMetrics
from ..utils.exceptions import ContractError, NumericError
from ..utils.seeding import CLUSTERING, DATA_ORDER, DENSE_INIT, EMBEDDER, substream, substream_seed
from ..utils.tokenizer import WhitespaceTokenizer
from .checkpoint_service import save_checkpoint
from .clustering_service import ClusteringService, save_kmeans
from .dataset_service import build_tokenizer, encode_record, ingest_dataset
from .embedding_service import EmbeddingService, load_embeddings
from .model_service import dense_forward, lm_loss, model_forward, upcycle_init
from .routing_service import load_balance_loss

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
CLUSTERING_FILE = "clustering.txt"
ELBOW_FILE = "elbow.csv"
CONFIG_FILE = "run_config.txt"
FINAL_LOSS_WINDOW = 10

SUMMARY_FIELDS = [
    "steps", "initial_loss", "final_loss", "num_groups", "num_experts", "total_tokens",
    "active_experts_per_token", "expert_forwards_per_token",
]


@dataclass
class TrainResult:
    model: MoCEModel
    tokenizer: WhitespaceTokenizer
    clustering: KMeansModel
    assignment: ClusterAssignment
    report: MetricsReport
    checkpoint_dir: Optional[Path] = None


def embedding_metadata(config: RunConfig) -> Dict[str, object]:
    """Embedder settings stored with the checkpoint so prompts embed identically at eval time."""
    return {
        "embedding_source": config.embedding_source,
        "embedding_dim": config.embedding_dim,
        "embedding_seed": substream_seed(config.seed, EMBEDDER),
        "embed_fields": config.embed_fields,
    }


def batch_schedule(n_sequences: int, batch_size: int, epochs: int, seed: int) -> List[np.ndarray]:
    """Seeded shuffled batches, one permutation per epoch."""
    rng = substream(seed, DATA_ORDER)
    batches: List[np.ndarray] = []
    for _ in range(epochs):
        order = rng.permutation(n_sequences)
        batches.extend(order[start:start + batch_size] for start in range(0, n_sequences, batch_size))
    return batches


def training_schedule(
    n_sequences: int, batch_size: int, epochs: int, max_steps: Optional[int], seed: int
) -> List[np.ndarray]:
    """Exactly ``max_steps`` batches when set (as many epochs as that takes), else ``epochs`` full passes."""
    if max_steps is None:
        return batch_schedule(n_sequences, batch_size, epochs, seed)
    batches_per_epoch = math.ceil(n_sequences / batch_size)
    return batch_schedule(n_sequences, batch_size, math.ceil(max_steps / batches_per_epoch), seed)[:max_steps]


def group_micro_batches(batch: Sequence[int], labels: np.ndarray) -> List[Tuple[int, List[int]]]:
    """Split a batch into per-group micro-batches, groups in ascending order."""
    groups: Dict[int, List[int]] = {}
    for index in batch:
        groups.setdefault(int(labels[index]), []).append(int(index))
    return sorted(groups.items())


def mean_loss(losses: Sequence[Tensor]) -> Tensor:
    if len(losses) == 1:
        return losses[0]
    stacked = ops.concat([ops.reshape(loss, (1,)) for loss in losses])
    return ops.scale(ops.sum(stacked), 1.0 / len(losses))


def sequence_loss(
    model: MoCEModel,
    sequence: EncodedSequence,
    group_id: int,
    record: Optional[RoutingRecord] = None,
    sequence_id: int = 0,
) -> Tensor:
    logits = model_forward(model, sequence.input_ids, group_id, record, sequence_id)
    return lm_loss(logits, sequence.targets, sequence.loss_mask)


class TrainingService:
    """Runs the embed -> cluster -> upcycle -> train pipeline for one RunConfig."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.log_every = MONITORING["log_every"]

    def load_records(self) -> List[InstructionRecord]:
        if not self.config.train_path:
            raise ContractError("train_path is required for training")
        return ingest_dataset(self.config.train_path)

    def embed(self, records: Sequence[InstructionRecord], tokenizer: WhitespaceTokenizer) -> EmbeddingSet:
        config = self.config
        service = EmbeddingService(config.embedding_dim, substream_seed(config.seed, EMBEDDER), config.embed_fields)
        if config.embedding_source == "file":
            return service.align(load_embeddings(config.embedding_path), records)
        return service.embed_records(records, tokenizer)

    def cluster(self, embeddings: EmbeddingSet, output_dir: Optional[Path]) -> Tuple[KMeansModel, ClusterAssignment]:
        config = self.config
        service = ClusteringService(seed=substream_seed(config.seed, CLUSTERING))
        if config.no_clustering:
            model, assignment = service.single_group(embeddings)
        elif config.k_max is not None:
            report, model, assignment = service.select(embeddings, config.k_max)
            if output_dir is not None:
                report.to_csv(output_dir / ELBOW_FILE)
        else:
            model, assignment = service.fit(embeddings, config.num_groups)
        if output_dir is not None:
            save_kmeans(model, output_dir / CLUSTERING_FILE)
        return model, assignment

    def pretrain_dense(self, dense: DenseTransformer, sequences: Sequence[EncodedSequence]) -> None:
        steps = self.config.dense_pretrain_steps
        if steps == 0:
            return
        schedule = training_schedule(len(sequences), self.config.batch_size, 1, steps, self.config.seed)
        optimizer = Adam(dense.trainable_parameters(), lr=self.config.learning_rate)
        for step, batch in enumerate(schedule, start=1):
            optimizer.zero_grad()
            with ComputationTape() as tape:
                loss = mean_loss(
                    [lm_loss(dense_forward(dense, sequences[i].input_ids), sequences[i].targets, sequences[i].loss_mask) for i in batch]
                )
            if not math.isfinite(loss.item()):
                raise NumericError(f"Non-finite dense pretraining loss at step {step}")
            tape.backward(loss)
            optimizer.step()
            if step % self.log_every == 0 or step == steps:
                logger.info(f"Dense pretraining step {step}/{steps}: loss={loss.item():.4f}")

    def train_step(
        self,
        model: MoCEModel,
        optimizer: Adam,
        sequences: Sequence[EncodedSequence],
        labels: np.ndarray,
        batch: Sequence[int],
        step: int,
        usage: RoutingRecord,
    ) -> StepMetrics:
        coefficient = self.config.balance_coefficient
        micro_batches = group_micro_batches(batch, labels)
        record = RoutingRecord()
        optimizer.zero_grad()
        with ComputationTape() as tape:
            losses = []
            for group_id, members in micro_batches:
                for index in members:
                    losses.append(sequence_loss(model, sequences[index], group_id, record, index))
            lm = mean_loss(losses)
            if coefficient > 0:
                balance = load_balance_loss(record, coefficient=coefficient)
                loss = ops.add(lm, balance)
            else:
                balance = Tensor(0.0)
                loss = lm
        if not math.isfinite(loss.item()):
            raise NumericError(f"Non-finite training loss at step {step}")
        tape.backward(loss)
        optimizer.step()
        usage.extend(record)
        return StepMetrics(
            step=step,
            loss=loss.item(),
            lm_loss=lm.item(),
            balance_loss=balance.item(),
            groups_active=len(micro_batches),
        )

    def pipeline_train(self, records: Optional[Sequence[InstructionRecord]] = None) -> TrainResult:
        """Embed, cluster, upcycle and train; persists clustering, metrics and checkpoint."""
        config = self.config
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        config.to_file(output_dir / CONFIG_FILE)

        records = list(records) if records is not None else self.load_records()
        if not records:
            raise ContractError("Training set is empty")
        tokenizer = build_tokenizer(records)

        embeddings = self.embed(records, tokenizer)
        clustering, assignment = self.cluster(embeddings, output_dir)
        labels = assignment.labels
        logger.info(f"Routing {len(records)} sequences to {clustering.k} expert groups: sizes={assignment.counts.tolist()}")

        model_config: ModelConfig = config.build_model_config(tokenizer.vocab_size, clustering.k)
        sequences = [encode_record(r, tokenizer, model_config.max_seq_len) for r in records]

        dense = DenseTransformer.initialize(model_config, substream(config.seed, DENSE_INIT))
        self.pretrain_dense(dense, sequences)
        model = upcycle_init(dense, model_config, clustering)
        model.reset_counters()

        optimizer = Adam(model.trainable_parameters(), lr=config.learning_rate)
        schedule = training_schedule(len(sequences), config.batch_size, config.epochs, config.max_steps, config.seed)

        usage = RoutingRecord(keep_gates=False)
        steps: List[StepMetrics] = []
        metrics_path = output_dir / MONITORING["metrics_file"]
        with open(metrics_path, "w", encoding="utf-8") as metrics_file:
            for step, batch in enumerate(schedule, start=1):
                try:
                    metrics = self.train_step(model, optimizer, sequences, labels, batch, step, usage)
                except NumericError as e:
                    logger.error(f"Training failed: {str(e)}")
                    raise
                steps.append(metrics)
                metrics_file.write(json.dumps(metrics.model_dump()) + "\n")
                if step % self.log_every == 0 or step == len(schedule):
                    logger.info(
                        f"Step {step}/{len(schedule)}: loss={metrics.loss:.4f} "
                        f"(lm={metrics.lm_loss:.4f}, balance={metrics.balance_loss:.4f}, groups={metrics.groups_active})"
                    )

        report = build_report(model, usage, steps)
        write_summary(report, output_dir / MONITORING["summary_file"])
        checkpoint_dir = save_checkpoint(
            model, tokenizer, output_dir / CHECKPOINT_DIR, step=len(steps), metadata=embedding_metadata(config)
        )
        return TrainResult(model, tokenizer, clustering, assignment, report, checkpoint_dir)


def build_report(model: MoCEModel, usage: RoutingRecord, steps: Sequence[StepMetrics]) -> MetricsReport:
    config = model.config
    total_tokens = usage.total_tokens()
    token_layers = sum(usage.total_tokens(layer) for layer in range(config.n_layers))
    losses = [s.loss for s in steps]
    return MetricsReport(
        steps=list(steps),
        initial_loss=losses[0] if losses else None,
        final_loss=float(np.mean(losses[-FINAL_LOSS_WINDOW:])) if losses else None,
        num_groups=config.num_groups,
        num_experts=config.num_experts,
        total_tokens=total_tokens,
        group_token_counts=usage.group_token_counts(config.num_groups),
        load_fractions=usage.load_fraction_report() if total_tokens else {},
        active_experts_per_token=float(config.active_experts_per_token),
        expert_forwards_per_token=model.expert_forwards() / token_layers if token_layers else 0.0,
    )


def write_summary(report: MetricsReport, path: Path) -> None:
    values = report.model_dump()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerow({"steps": len(report.steps), **{k: values[k] for k in SUMMARY_FIELDS if k != "steps"}})


def pipeline_train(config: RunConfig, records: Optional[Sequence[InstructionRecord]] = None) -> TrainResult:
    return TrainingService(config).pipeline_train(records)
