from dataclasses import dataclass
from typing import List

import numpy as np


@dataclass
class EncodedSequence:
    """``[BOS] instruction [SEP] response [EOS]`` shifted into model inputs and targets."""

    record_id: str
    input_ids: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray  # True on response-span positions
    prompt_ids: List[int]
    response_ids: List[int]
    source: str = ""

    @property
    def length(self) -> int:
        return int(self.input_ids.size)

    @property
    def supervised_tokens(self) -> int:
        return int(self.loss_mask.sum())
