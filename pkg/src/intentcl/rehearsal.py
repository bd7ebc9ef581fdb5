"""Fixed-capacity rehearsal memory with pre-allocated per-class slots.

Every class gets the same number of slots (capacity // total_classes, the
remainder stays unused) so early and late tasks are equally represented.
Slots are filled once, right after the task introducing the class finishes,
using one of three selection strategies over encoder embeddings.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

from .scenario import Sample, TaskSpec

__all__ = [
    "SELECTION_STRATEGIES",
    "RehearsalMemory",
    "allocate",
    "select_exemplars",
    "update_after_task",
    "rehearsal_dataset",
]

SELECTION_STRATEGIES = ("random", "closest_to_mean", "icarl_herding")

# Maps a batch of samples to an [n, dim] embedding matrix.
EmbedFn = Callable[[Sequence[Sample]], np.ndarray]


class RehearsalMemory:
    """Exemplar store: class id -> selected samples plus their source task."""

    def __init__(self, capacity: int, total_classes: int):
        if capacity < total_classes:
            raise ValueError(
                f"capacity {capacity} cannot give every one of "
                f"{total_classes} classes a slot"
            )
        self.capacity = capacity
        self.total_classes = total_classes
        self.slots_per_class = capacity // total_classes
        self._store: dict[int, list[Sample]] = {}
        self._source_task: dict[int, int] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._store.values())

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._store

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self._store))

    def samples_of(self, class_id: int) -> tuple[Sample, ...]:
        return tuple(self._store[class_id])

    def source_task_of(self, class_id: int) -> int:
        return self._source_task[class_id]

    def by_source_task(self) -> dict[int, list[Sample]]:
        """Stored samples grouped by the task that contributed them."""
        groups: dict[int, list[Sample]] = {}
        for c in self.classes:
            groups.setdefault(self._source_task[c], []).extend(self._store[c])
        return groups

    def to_json(self) -> str:
        doc = {
            "capacity": self.capacity,
            "total_classes": self.total_classes,
            "slots_per_class": self.slots_per_class,
            "classes": {
                str(c): {
                    "source_task": self._source_task[c],
                    "sample_ids": [s.id for s in self._store[c]],
                }
                for c in self.classes
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def allocate(capacity: int, total_classes: int) -> RehearsalMemory:
    """Pre-allocate equal per-class slots; leftover capacity is unused."""
    return RehearsalMemory(capacity, total_classes)


def _sorted_by_id(samples: Sequence[Sample]) -> list[Sample]:
    return sorted(samples, key=lambda s: s.id)


def select_exemplars(
    strategy: str,
    class_samples: Sequence[Sample],
    k: int,
    embed: EmbedFn | None = None,
    seed: int = 0,
) -> list[Sample]:
    """Pick min(k, n) exemplars of one class.

    random: seeded uniform draw without replacement.
    closest_to_mean: the k samples nearest the class-mean embedding.
    icarl_herding: greedy picks keeping the mean of chosen embeddings
      close to the class mean; at step j the sample minimizing
      ||mean - (chosen_sum + e) / j|| is added.

    Candidates are canonicalized by sample id first, so results do not
    depend on input order; distance ties also break by ascending id.
    """
    if not class_samples:
        raise ValueError("cannot select exemplars from an empty class")
    if k < 1:
        raise ValueError("k must be >= 1")
    if strategy not in SELECTION_STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")

    candidates = _sorted_by_id(class_samples)
    if k >= len(candidates):
        return list(candidates)

    if strategy == "random":
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[i] for i in sorted(picks)]

    if embed is None:
        raise ValueError(f"strategy {strategy!r} needs an embedding function")
    emb = np.asarray(embed(candidates), dtype=np.float64)
    mean = emb.mean(axis=0)

    if strategy == "closest_to_mean":
        dist = np.linalg.norm(emb - mean, axis=1)
        order = np.lexsort((np.arange(len(candidates)), dist))
        return [candidates[i] for i in order[:k]]

    # icarl_herding
    chosen: list[int] = []
    chosen_sum = np.zeros_like(mean)
    remaining = list(range(len(candidates)))
    for step in range(1, k + 1):
        running = (chosen_sum[None, :] + emb[remaining]) / step
        dist = np.linalg.norm(mean[None, :] - running, axis=1)
        best = remaining[int(np.argmin(dist))]  # argmin takes first, ids pre-sorted
        chosen.append(best)
        chosen_sum += emb[best]
        remaining.remove(best)
    return [candidates[i] for i in chosen]


def update_after_task(
    memory: RehearsalMemory,
    task: TaskSpec,
    strategy: str,
    samples_by_class: dict[int, Sequence[Sample]],
    embed: EmbedFn | None = None,
    seed: int = 0,
) -> RehearsalMemory:
    """Fill the slots of every class the finished task introduced.

    ``samples_by_class`` holds the task's train samples keyed by class id.
    Previously stored classes are untouched; re-adding a class is an error.
    """
    for class_id in task.classes:
        if class_id in memory:
            raise ValueError(f"class {class_id} already stored in memory")
    for class_id in task.classes:
        picked = select_exemplars(
            strategy,
            samples_by_class[class_id],
            memory.slots_per_class,
            embed=embed,
            seed=seed + class_id,
        )
        memory._store[class_id] = picked
        memory._source_task[class_id] = task.index
    return memory


def rehearsal_dataset(memory: RehearsalMemory) -> list[Sample]:
    """All stored samples, ordered by class id then insertion order."""
    out: list[Sample] = []
    for c in memory.classes:
        out.extend(memory.samples_of(c))
    return out
