import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..engine.tensor import Tensor
from ..utils.exceptions import ConfigurationError, ShapeError
from .feed_forward import FeedForward

GENERAL = "general"


@dataclass
class AdapterExpert:
    """Bottleneck adapter: down-projection d→r, activation, up-projection r→d."""

    w_down: Tensor
    w_up: Tensor
    calls: int = 0
    tokens_processed: int = 0

    def __post_init__(self):
        d_model, rank = self.w_down.shape
        if self.w_up.shape != (rank, d_model):
            raise ShapeError(f"Adapter up-projection {self.w_up.shape} does not match down-projection {self.w_down.shape}")

    @classmethod
    def initialize(cls, d_model: int, rank: int, rng: np.random.Generator, std: float) -> "AdapterExpert":
        # W_up starts at zero so a fresh adapter contributes nothing beyond its residual.
        return cls(
            w_down=Tensor(rng.normal(0.0, std, (d_model, rank)), requires_grad=True),
            w_up=Tensor(np.zeros((rank, d_model)), requires_grad=True),
        )

    @property
    def d_model(self) -> int:
        return self.w_down.shape[0]

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    def reset_counters(self) -> None:
        self.calls = 0
        self.tokens_processed = 0

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w_down": self.w_down, f"{prefix}.w_up": self.w_up}


@dataclass
class ExpertGroup:
    """N adapters sharing one token router W_G (d_model × N)."""

    experts: List[AdapterExpert]
    router: Tensor

    def __post_init__(self):
        if not self.experts:
            raise ConfigurationError("An expert group needs at least one expert")
        expected = (self.experts[0].d_model, len(self.experts))
        if self.router.shape != expected:
            raise ShapeError(f"Router of shape {self.router.shape} does not match {expected}")

    @classmethod
    def initialize(cls, d_model: int, rank: int, num_experts: int, rng: np.random.Generator, std: float) -> "ExpertGroup":
        router = Tensor(rng.normal(0.0, std, (d_model, num_experts)), requires_grad=True)
        experts = [AdapterExpert.initialize(d_model, rank, rng, std) for _ in range(num_experts)]
        return cls(experts=experts, router=router)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        params = {f"{prefix}.router": self.router}
        for index, expert in enumerate(self.experts):
            params.update(expert.parameters(f"{prefix}.experts.{index}"))
        return params


@dataclass
class MoCELayer:
    """Clustered expert groups sharing the frozen base FFN of one transformer block."""

    groups: List[ExpertGroup]
    base_ffn: FeedForward
    top_k: int = 2
    mode: str = "topk"
    renormalize: bool = False
    activation: str = "gelu"
    moe_scaling: float = 1.0
    general_group: Optional[ExpertGroup] = None

    def __post_init__(self):
        if not self.groups:
            raise ConfigurationError("A MoCE layer needs at least one expert group")
        shapes = {(g.num_experts, g.experts[0].d_model) for g in self.groups}
        if self.general_group is not None:
            shapes.add((self.general_group.num_experts, self.general_group.experts[0].d_model))
        if len(shapes) != 1:
            raise ConfigurationError(f"Expert groups disagree on (num_experts, d_model): {sorted(shapes)}")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_experts(self) -> int:
        return self.groups[0].num_experts

    @property
    def variant(self) -> bool:
        return self.general_group is not None

    def all_experts(self) -> List[AdapterExpert]:
        experts = [e for g in self.groups for e in g.experts]
        if self.general_group is not None:
            experts.extend(self.general_group.experts)
        return experts

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for index, group in enumerate(self.groups):
            params.update(group.parameters(f"{prefix}.groups.{index}"))
        if self.general_group is not None:
            params.update(self.general_group.parameters(f"{prefix}.{GENERAL}"))
        return params


@dataclass
class RouteEntry:
    """Routing decisions of one router over the tokens of one sequence."""

    layer: int
    router: str
    group: int
    sequence_id: int
    token_start: int
    selected: np.ndarray  # T × k expert indices
    weights: np.ndarray  # T × k gate weights after truncation
    top1: np.ndarray  # T, argmax of the untruncated gate


@dataclass
class RouterTrace:
    num_experts: int
    gates: List[Tensor] = field(default_factory=list)
    top1: List[np.ndarray] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return int(np.sum([t.size for t in self.top1])) if self.top1 else 0


class RoutingRecord:
    """Per-token routing log; also carries the gate tensors the balance loss needs."""

    def __init__(self, keep_gates: bool = True):
        self.keep_gates = keep_gates
        self.entries: List[RouteEntry] = []
        self.traces: Dict[Tuple[int, str], RouterTrace] = {}
        self._offsets: Dict[Tuple[int, str], int] = defaultdict(int)

    def log(
        self,
        layer: int,
        router: str,
        group: int,
        gates: Tensor,
        selected: np.ndarray,
        weights: np.ndarray,
        sequence_id: int = 0,
    ) -> None:
        top1 = np.argmax(gates.data, axis=1)
        path = GENERAL if router == GENERAL else "groups"
        start = self._offsets[(layer, path)]
        self._offsets[(layer, path)] += gates.shape[0]
        self.entries.append(
            RouteEntry(layer, router, group, sequence_id, start, np.asarray(selected), np.asarray(weights), top1)
        )
        trace = self.traces.setdefault((layer, router), RouterTrace(num_experts=gates.shape[1]))
        if self.keep_gates:
            trace.gates.append(gates)
        trace.top1.append(top1)

    def __len__(self) -> int:
        return len(self.entries)

    def extend(self, other: "RoutingRecord") -> None:
        """Append another record's entries, re-basing its token indices after ours."""
        shift: Dict[Tuple[int, str], int] = dict(self._offsets)
        for entry in other.entries:
            path = GENERAL if entry.router == GENERAL else "groups"
            base = shift.get((entry.layer, path), 0)
            moved = RouteEntry(
                entry.layer, entry.router, entry.group, entry.sequence_id,
                base + entry.token_start, entry.selected, entry.weights, entry.top1,
            )
            self.entries.append(moved)
            self._offsets[(entry.layer, path)] = max(
                self._offsets[(entry.layer, path)], moved.token_start + entry.top1.size
            )
        for key, trace in other.traces.items():
            mine = self.traces.setdefault(key, RouterTrace(num_experts=trace.num_experts))
            mine.gates.extend(trace.gates if self.keep_gates else [])
            mine.top1.extend(trace.top1)

    def router_keys(self) -> List[Tuple[int, str]]:
        return sorted(self.traces)

    def load_fractions(self, key: Tuple[int, str]) -> np.ndarray:
        """Share of tokens whose top-1 expert (before truncation) is each expert."""
        trace = self.traces[key]
        top1 = np.concatenate(trace.top1)
        return np.bincount(top1, minlength=trace.num_experts) / top1.size

    def load_fraction_report(self) -> Dict[str, List[float]]:
        return {f"layer{layer}/{router}": self.load_fractions((layer, router)).tolist() for layer, router in self.router_keys()}

    def group_token_counts(self, num_groups: int, layer: int = 0) -> List[int]:
        counts = [0] * num_groups
        for entry in self.entries:
            if entry.layer == layer and entry.router != GENERAL:
                counts[entry.group] += entry.top1.size
        return counts

    def total_tokens(self, layer: int = 0) -> int:
        return sum(e.top1.size for e in self.entries if e.layer == layer and e.router != GENERAL)

    def to_csv(self, path: Union[str, Path], layer: int = 0) -> int:
        """Write ``token_idx,group,expert,weight`` rows for one layer; returns the row count."""
        rows = 0
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["token_idx", "group", "expert", "weight"])
            for entry in self.entries:
                if entry.layer != layer:
                    continue
                group = GENERAL if entry.router == GENERAL else entry.group
                for t in range(entry.selected.shape[0]):
                    for expert, weight in zip(entry.selected[t], entry.weights[t]):
                        writer.writerow([entry.token_start + t, group, int(expert), repr(float(weight))])
                        rows += 1
        return rows
