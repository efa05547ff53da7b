"""Working memory for reflection-on-action."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ExecFeedback, Intervention, Observation


@dataclass
class StepRecord:
    """One executed decision: (o_t, a_t*, f_t^e, e_t) plus what the update needs."""

    t: int
    obs: Observation
    action: Intervention
    template_index: int
    context: np.ndarray
    logprob: float
    external_score: float
    external_feedback: str
    feedback: ExecFeedback
    next_obs: Observation


@dataclass
class HindsightBuffer:
    capacity: int
    records: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("buffer capacity K must be >= 1")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> StepRecord:
        return self.records[i]

    @property
    def full(self) -> bool:
        return len(self.records) >= self.capacity

    def add(self, record: StepRecord) -> None:
        if self.full:
            raise OverflowError("hindsight buffer is full; flush before adding")
        if self.records and record.t <= self.records[-1].t:
            raise ValueError("records must be added in step order")
        self.records.append(record)

    def flush(self) -> list[StepRecord]:
        out, self.records = self.records, []
        return out
