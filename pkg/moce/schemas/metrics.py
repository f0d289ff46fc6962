import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

CONSERVATION_TOLERANCE = 1e-9


class StepMetrics(BaseModel):
    step: int
    loss: float
    lm_loss: float
    balance_loss: float
    groups_active: int = 0


class MetricsReport(BaseModel):
    """Training and evaluation metrics of one run."""

    steps: List[StepMetrics] = Field(default_factory=list)
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    eval_loss: Optional[float] = None
    perplexity: Optional[float] = None
    exact_match: Optional[float] = None
    num_groups: int = 1
    num_experts: int = 1
    total_tokens: int = 0
    group_token_counts: List[int] = Field(default_factory=list)
    load_fractions: Dict[str, List[float]] = Field(default_factory=dict)
    active_experts_per_token: float = 0.0
    expert_forwards_per_token: float = 0.0

    @model_validator(mode="after")
    def check_conservation(self) -> "MetricsReport":
        if self.group_token_counts and sum(self.group_token_counts) != self.total_tokens:
            raise ValueError(
                f"Per-group token counts sum to {sum(self.group_token_counts)}, "
                f"expected {self.total_tokens}"
            )
        for router, fractions in self.load_fractions.items():
            if fractions and not math.isclose(sum(fractions), 1.0, abs_tol=CONSERVATION_TOLERANCE):
                raise ValueError(f"Load fractions of router {router} sum to {sum(fractions)}")
        return self


class RouteStatsReport(BaseModel):
    num_groups: int
    total_sequences: int
    histogram: List[int]
    per_source: Dict[str, List[int]] = Field(default_factory=dict)
    load_fractions: Dict[str, List[float]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_histogram(self) -> "RouteStatsReport":
        if sum(self.histogram) != self.total_sequences:
            raise ValueError(f"Histogram sums to {sum(self.histogram)}, expected {self.total_sequences}")
        return self

    def fractions(self) -> List[float]:
        total = max(self.total_sequences, 1)
        return [count / total for count in self.histogram]


class AblationRow(BaseModel):
    table: str  # "routing" or "expert_scaling" or "cluster_sweep"
    label: str
    top_k: int
    mode: str
    clustering: bool
    token_routing: bool
    num_groups: int
    num_experts: int
    seed: int
    heldout_loss: float
    exact_match: float
    final_train_loss: float
    active_experts_per_token: float
    expert_forwards_per_token: float
