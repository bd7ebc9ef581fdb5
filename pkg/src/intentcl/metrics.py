"""Accuracy bookkeeping for class-incremental runs.

After finishing task t the model is evaluated on the test sets of tasks
0..t, predicting with an argmax over every class seen so far (no task
identity at test time). Per-task results form a lower-triangular matrix;
the two headline numbers are the mean of the post-task pooled accuracies
(avg acc) and the final one (last acc), each smoothed over the last five
epochs of its task.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import torch

from .model import pad_features
from .scenario import Scenario, seen_classes

__all__ = [
    "TaskEvaluation",
    "AccuracyMatrix",
    "evaluate",
    "task_accuracy_smoothed",
    "avg_and_last",
]

SMOOTHING_WINDOW = 5


@dataclass(frozen=True)
class TaskEvaluation:
    """Accuracies on each seen task's test set plus the pooled accuracy."""

    per_task: tuple[float, ...]
    pooled: float


def evaluate(model, scenario: Scenario, t: int, batch_size: int = 256) -> TaskEvaluation:
    """Test-set accuracies after training task ``t``.

    ``model`` is called as model(feats, lengths) and must emit one logit per
    seen class, in the seen-class order of the scenario.
    """
    seen = seen_classes(scenario, t)
    per_task = []
    correct_total = 0
    count_total = 0
    for task in scenario.tasks[: t + 1]:
        ids = task.test
        if not ids:
            raise ValueError(f"task {task.index} has an empty test set")
        correct = 0
        for start in range(0, len(ids), batch_size):
            chunk = [scenario.get(i) for i in ids[start : start + batch_size]]
            feats, lengths = pad_features([s.features for s in chunk])
            with torch.no_grad():
                logits = model(feats, lengths)
            pred_rows = logits.argmax(dim=1).tolist()
            correct += sum(
                seen[row] == s.label for row, s in zip(pred_rows, chunk)
            )
        per_task.append(correct / len(ids))
        correct_total += correct
        count_total += len(ids)
    return TaskEvaluation(per_task=tuple(per_task), pooled=correct_total / count_total)


def task_accuracy_smoothed(epoch_history: Sequence[float], window: int = SMOOTHING_WINDOW) -> float:
    """Mean of the last ``window`` epoch-end accuracies (fewer if short)."""
    if not epoch_history:
        raise ValueError("no epochs recorded")
    tail = epoch_history[-window:]
    return sum(tail) / len(tail)


def avg_and_last(summaries: Sequence[float]) -> tuple[float, float]:
    """(mean over tasks, final value) of the post-task accuracy summaries."""
    if not summaries:
        raise ValueError("no task summaries")
    return sum(summaries) / len(summaries), summaries[-1]


class AccuracyMatrix:
    """Lower-triangular accuracy records plus per-epoch histories."""

    def __init__(self):
        self.per_task_rows: list[tuple[float, ...]] = []
        self.epoch_pooled: list[list[float]] = []

    @property
    def n_tasks(self) -> int:
        return len(self.per_task_rows)

    def add_task(self, evaluation: TaskEvaluation, epoch_pooled_history: Sequence[float]) -> None:
        if len(evaluation.per_task) != self.n_tasks + 1:
            raise ValueError("row length must equal the number of tasks trained so far")
        self.per_task_rows.append(evaluation.per_task)
        self.epoch_pooled.append(list(epoch_pooled_history))

    def smoothed_summaries(self, window: int = SMOOTHING_WINDOW) -> list[float]:
        return [task_accuracy_smoothed(h, window) for h in self.epoch_pooled]

    def avg_and_last(self, window: int = SMOOTHING_WINDOW) -> tuple[float, float]:
        return avg_and_last(self.smoothed_summaries(window))

    def forgetting(self) -> list[float]:
        """Per eval task: best accuracy ever seen minus the final accuracy."""
        T = self.n_tasks
        out = []
        for tau in range(T):
            column = [self.per_task_rows[t][tau] for t in range(tau, T)]
            out.append(max(column) - column[-1])
        return out

    def to_csv(self, path, window: int = SMOOTHING_WINDOW) -> None:
        T = self.n_tasks
        summaries = self.smoothed_summaries(window)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["trained_task"] + [f"eval_task_{i}" for i in range(T)] + ["pooled_smoothed"]
            )
            for t, row in enumerate(self.per_task_rows):
                cells = [f"{a:.6f}" for a in row] + [""] * (T - len(row))
                writer.writerow([t] + cells + [f"{summaries[t]:.6f}"])
            writer.writerow(["forgetting"] + [f"{f:.6f}" for f in self.forgetting()] + [""])
