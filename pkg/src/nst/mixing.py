"""Training-stream composition from supervised and pseudo-labeled datasets.

Batchwise mixing emits batches with an exact supervised/semi-supervised
split; uniform mixing draws single examples equiprobably from the combined
pool. Sampling multiplicities are materialized here: a multiplicity-m
utterance contributes m pool entries.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np

from .corpus import Dataset, Utterance
from .errors import NstError

SUPERVISED = "sup"
SEMI = "semi"

BATCHWISE = "batchwise"
UNIFORM = "uniform"


class MixingError(NstError):
    pass


class IndivisibleRatioError(MixingError):
    pass


@dataclass(frozen=True)
class MixPlan:
    """How to compose training batches.

    In batchwise mode the ratio terms must divide the batch size exactly so
    each batch's composition is exact, not just in expectation. A ratio
    schedule, when present, overrides ``ratio`` per generation.
    """

    mode: str = BATCHWISE
    ratio: tuple[int, int] = (1, 1)
    batch_size: int = 2
    ratio_schedule: tuple[tuple[int, tuple[int, int]], ...] | None = None

    def __post_init__(self):
        if self.mode not in (BATCHWISE, UNIFORM):
            raise MixingError(f"unknown mixing mode: {self.mode!r}")
        sup, semi = (int(self.ratio[0]), int(self.ratio[1]))
        object.__setattr__(self, "ratio", (sup, semi))
        if self.mode == BATCHWISE:
            self._check_ratio(self.ratio)
            if self.ratio_schedule is not None:
                for _, ratio in self.ratio_schedule:
                    self._check_ratio(ratio)

    def _check_ratio(self, ratio: tuple[int, int]) -> None:
        sup, semi = ratio
        if sup < 1 or semi < 1:
            raise MixingError("ratio terms must be positive")
        if self.batch_size < 1:
            raise MixingError("batch_size must be >= 1")
        if self.batch_size % (sup + semi) != 0:
            raise IndivisibleRatioError(
                f"ratio {sup}:{semi} does not divide batch size {self.batch_size}"
            )

    def ratio_for(self, generation: int) -> tuple[int, int]:
        if self.ratio_schedule is not None:
            for gen, ratio in self.ratio_schedule:
                if gen == generation:
                    return ratio
        return self.ratio

    def for_generation(self, generation: int) -> "MixPlan":
        return replace(self, ratio=self.ratio_for(generation), ratio_schedule=None)

    def batch_composition(self) -> tuple[int, int]:
        """(supervised, semi-supervised) example counts per batch."""
        sup, semi = self.ratio
        unit = self.batch_size // (sup + semi)
        return sup * unit, semi * unit

    @classmethod
    def from_dict(cls, record: Mapping) -> "MixPlan":
        schedule = record.get("ratio_schedule")
        parsed_schedule = None
        if schedule is not None:
            parsed_schedule = tuple(
                (int(gen), (int(r[0]), int(r[1]))) for gen, r in sorted(schedule.items(), key=lambda kv: int(kv[0]))
            ) if isinstance(schedule, Mapping) else tuple(
                (int(gen), (int(r[0]), int(r[1]))) for gen, r in schedule
            )
        ratio = record.get("ratio", (1, 1))
        return cls(
            mode=str(record.get("mode", BATCHWISE)),
            ratio=(int(ratio[0]), int(ratio[1])),
            batch_size=int(record.get("batch_size", 2)),
            ratio_schedule=parsed_schedule,
        )

    def to_dict(self) -> dict:
        record: dict[str, object] = {"mode": self.mode}
        if self.mode == BATCHWISE:
            record["ratio"] = list(self.ratio)
            record["batch_size"] = self.batch_size
            if self.ratio_schedule is not None:
                record["ratio_schedule"] = {
                    str(gen): list(ratio) for gen, ratio in self.ratio_schedule
                }
        return record


def materialize(dataset: Dataset, origin: str) -> list[tuple[Utterance, str]]:
    """Duplicate each utterance by its multiplicity and tag it with ``origin``."""
    pool = []
    for u in dataset:
        pool.extend([(u, origin)] * u.multiplicity)
    return pool


class _EpochSampler:
    """Uniform sampling without replacement within an epoch, reshuffling on exhaustion."""

    def __init__(self, pool: list, rng: np.random.Generator):
        if not pool:
            raise MixingError("cannot sample from an empty pool")
        self._pool = pool
        self._rng = rng
        self._order: np.ndarray = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def take(self, count: int) -> list:
        taken = []
        while len(taken) < count:
            if self._cursor >= len(self._order):
                self._order = self._rng.permutation(len(self._pool))
                self._cursor = 0
            taken.append(self._pool[int(self._order[self._cursor])])
            self._cursor += 1
        return taken


def mix_batchwise(
    sup: Dataset,
    semi: Dataset,
    plan: MixPlan,
    rng: np.random.Generator,
) -> Iterator[list[tuple[Utterance, str]]]:
    """Endless stream of batches with the plan's exact per-batch composition."""
    if plan.mode != BATCHWISE:
        raise MixingError(f"plan mode is {plan.mode!r}, expected {BATCHWISE!r}")
    if len(sup) == 0 or len(semi) == 0:
        raise MixingError("batchwise mixing needs nonempty supervised and semi sets")
    n_sup, n_semi = plan.batch_composition()
    sup_sampler = _EpochSampler(materialize(sup, SUPERVISED), rng)
    semi_sampler = _EpochSampler(materialize(semi, SEMI), rng)
    while True:
        yield sup_sampler.take(n_sup) + semi_sampler.take(n_semi)


def mix_uniform(
    sup: Dataset,
    semi: Dataset,
    rng: np.random.Generator,
) -> Iterator[tuple[Utterance, str]]:
    """Endless stream drawing each combined-pool entry with equal probability."""
    pool = materialize(sup, SUPERVISED) + materialize(semi, SEMI)
    if not pool:
        raise MixingError("combined pool is empty")
    size = len(pool)
    while True:
        yield pool[int(rng.integers(0, size))]
