import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np


@dataclass
class KMeansModel:
    """Centroid matrix of a fitted k-means model; cluster c routes to expert group c."""

    centroids: np.ndarray
    seed: int = 0
    final_sse: float = 0.0
    iterations_run: int = 0
    sse_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.centroids.shape[1])


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray, k: int) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels=labels, counts=np.bincount(labels, minlength=k))


@dataclass
class ElbowReport:
    ks: List[int]
    sse_curve: List[float]
    curvature: Dict[int, float]
    selected_k: int
    monotonic: bool = True

    def rows(self) -> List[Dict[str, Union[int, float, str]]]:
        return [
            {"k": k, "sse": sse, "curvature": self.curvature.get(k, "")}
            for k, sse in zip(self.ks, self.sse_curve)
        ]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=["k", "sse", "curvature"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({key: (repr(v) if isinstance(v, float) else v) for key, v in row.items()})
