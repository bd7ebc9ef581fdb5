"""Class-incremental task streams.

A scenario is an ordered sequence of tasks with pairwise-disjoint class sets.
Each task carries train/val/test sample ids; the samples themselves live in a
registry on the scenario so downstream code can fetch features by id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Sample",
    "TaskSpec",
    "Scenario",
    "ConfigurationError",
    "DataError",
    "build_cil_scenario",
    "synthetic_scenario",
    "seen_classes",
]


class ConfigurationError(ValueError):
    """Inconsistent scenario configuration (e.g. task sizes vs class count)."""


class DataError(ValueError):
    """Input data violates a scenario precondition."""


@dataclass(frozen=True)
class Sample:
    """One utterance: feature matrix [n_mels x n_frames] and its class label."""

    id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise DataError(f"sample {self.id!r}: label must be >= 0")
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise DataError(f"sample {self.id!r}: features must be [n_mels x n_frames]")


@dataclass(frozen=True)
class TaskSpec:
    """One task: its class ids (ordered) and per-split sample ids."""

    index: int
    classes: tuple[int, ...]
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class Scenario:
    """An ordered task stream plus the sample registry backing it."""

    tasks: tuple[TaskSpec, ...]
    class_order_seed: int
    total_classes: int
    samples: Mapping[str, Sample] = field(repr=False)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def get(self, sample_id: str) -> Sample:
        return self.samples[sample_id]

    def to_json(self) -> str:
        """Serialize task structure (ids only, no features) for provenance."""
        doc = {
            "class_order_seed": self.class_order_seed,
            "total_classes": self.total_classes,
            "tasks": [
                {
                    "index": t.index,
                    "classes": list(t.classes),
                    "train": list(t.train),
                    "val": list(t.val),
                    "test": list(t.test),
                }
                for t in self.tasks
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def build_cil_scenario(
    samples: Sequence[Sample],
    task_sizes: Sequence[int],
    seed: int,
    split_of: Mapping[str, str] | None = None,
) -> Scenario:
    """Partition classes into tasks by a seeded shuffle.

    Class ids are sorted, shuffled with ``seed``, and split into consecutive
    groups of ``task_sizes``. Every sample lands in the task owning its label.
    ``split_of`` maps sample id to ``train``/``val``/``test``; ids not listed
    default to ``train``.

    Raises:
        ConfigurationError: sum(task_sizes) != number of distinct labels.
        DataError: a class has no train sample, or an unknown split name.
    """
    if split_of is None:
        split_of = {}
    labels = sorted({s.label for s in samples})
    if sum(task_sizes) != len(labels):
        raise ConfigurationError(
            f"task_sizes sum to {sum(task_sizes)} but there are {len(labels)} classes"
        )
    if any(size < 1 for size in task_sizes):
        raise ConfigurationError("every task must contain at least one class")

    rng = np.random.default_rng(seed)
    order = [labels[i] for i in rng.permutation(len(labels))]

    by_class: dict[int, dict[str, list[str]]] = {
        c: {"train": [], "val": [], "test": []} for c in labels
    }
    registry: dict[str, Sample] = {}
    for s in samples:
        if s.id in registry:
            raise DataError(f"duplicate sample id {s.id!r}")
        registry[s.id] = s
        split = split_of.get(s.id, "train")
        if split not in ("train", "val", "test"):
            raise DataError(f"sample {s.id!r}: unknown split {split!r}")
        by_class[s.label][split].append(s.id)
    for c in labels:
        if not by_class[c]["train"]:
            raise DataError(f"class {c} has no train sample")

    tasks = []
    cursor = 0
    for t, size in enumerate(task_sizes):
        classes = tuple(order[cursor : cursor + size])
        cursor += size
        tasks.append(
            TaskSpec(
                index=t,
                classes=classes,
                train=tuple(sid for c in classes for sid in by_class[c]["train"]),
                val=tuple(sid for c in classes for sid in by_class[c]["val"]),
                test=tuple(sid for c in classes for sid in by_class[c]["test"]),
            )
        )
    return Scenario(
        tasks=tuple(tasks),
        class_order_seed=seed,
        total_classes=len(labels),
        samples=registry,
    )


def synthetic_scenario(
    n_tasks: int,
    classes_per_task: int,
    samples_per_class: int,
    feat_dim: int,
    n_frames: int,
    cluster_std: float,
    seed: int,
) -> Scenario:
    """Generate a desk-scale stream of Gaussian class clusters.

    Each class is an isotropic cluster around a distinct random mean in
    feature space; the per-sample vector is replicated across frames with
    additional noise, all scaled by ``cluster_std``. Samples are split
    80:10:10 per class.
    """
    if min(n_tasks, classes_per_task, samples_per_class, feat_dim, n_frames) < 1:
        raise ConfigurationError("all synthetic scenario counts must be >= 1")
    if cluster_std < 0:
        raise ConfigurationError("cluster_std must be >= 0")

    rng = np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    means = rng.normal(0.0, 1.0, size=(n_classes, feat_dim))

    samples: list[Sample] = []
    split_of: dict[str, str] = {}
    n_train = max(1, int(samples_per_class * 0.8))
    n_val = int(samples_per_class * 0.1)
    for c in range(n_classes):
        for i in range(samples_per_class):
            center = means[c] + cluster_std * rng.normal(size=feat_dim)
            frame_noise = cluster_std * rng.normal(size=(feat_dim, n_frames))
            feats = center[:, None] + frame_noise
            sid = f"syn-{c:03d}-{i:04d}"
            samples.append(Sample(id=sid, features=feats.astype(np.float64), label=c))
            if i < n_train:
                split_of[sid] = "train"
            elif i < n_train + n_val:
                split_of[sid] = "val"
            else:
                split_of[sid] = "test"
    return build_cil_scenario(samples, [classes_per_task] * n_tasks, seed, split_of)


def seen_classes(scenario: Scenario, t: int) -> tuple[int, ...]:
    """Classes of tasks 0..t in task order (the classifier row order)."""
    if not 0 <= t < scenario.n_tasks:
        raise IndexError(f"task index {t} out of range [0, {scenario.n_tasks})")
    out: list[int] = []
    for task in scenario.tasks[: t + 1]:
        out.extend(task.classes)
    return tuple(out)
