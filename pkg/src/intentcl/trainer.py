"""Per-task training loop and experiment runner.

Each task: snapshot the teacher (when distillation is on), grow the head,
run Adam over shuffled current-plus-rehearsal data for a fixed number of
epochs, evaluate at every epoch end, and finally fill the rehearsal slots
of the new classes. The GEM strategy additionally projects the gradient
at every step so it cannot increase the loss on any past task's memory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import gem as gem_mod
from .distill import KDConfig, total_loss
from .distill import ce_loss
from .metrics import AccuracyMatrix, evaluate
from .model import (
    IntentModel,
    TCNConfig,
    expand_head,
    init_model,
    pad_features,
    save_checkpoint,
    snapshot,
)
from .rehearsal import RehearsalMemory, allocate, rehearsal_dataset, update_after_task
from .scenario import Sample, Scenario, seen_classes

__all__ = ["STRATEGIES", "TrainConfig", "RunState", "ExperimentResult", "train_task", "run_experiment"]

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "rehearsal_random", "rehearsal_closest", "rehearsal_icarl", "gem")

_SELECTION_OF = {
    "rehearsal_random": "random",
    "rehearsal_closest": "closest_to_mean",
    "rehearsal_icarl": "icarl_herding",
    "gem": "random",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 50
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    strategy: str = "finetune"
    kd: KDConfig = field(default_factory=KDConfig)
    memory_capacity: int = 0
    gem_margin: float = 0.0

    def __post_init__(self):
        if self.epochs_per_task < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("need epochs_per_task >= 1, lr > 0, batch_size >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @property
    def uses_memory(self) -> bool:
        return self.strategy != "finetune"


@dataclass
class RunState:
    model: IntentModel
    memory: RehearsalMemory | None
    matrix: AccuracyMatrix
    next_task: int = 0
    teacher: IntentModel | None = None
    step_rows: list[dict] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _batch_tensors(samples: Sequence[Sample], row_of: dict[int, int]):
    feats, lengths = pad_features([s.features for s in samples])
    labels = torch.tensor([row_of[s.label] for s in samples], dtype=torch.long)
    return feats, lengths, labels


def _memory_ce(model: IntentModel, samples: Sequence[Sample], row_of: dict[int, int]):
    feats, lengths, labels = _batch_tensors(samples, row_of)
    return ce_loss(model(feats, lengths), labels)


def _embed_fn(model: IntentModel):
    def embed(samples: Sequence[Sample]) -> np.ndarray:
        feats, lengths = pad_features([s.features for s in samples])
        with torch.no_grad():
            return model.encode(feats, lengths).numpy()

    return embed


def train_task(state: RunState, scenario: Scenario, cfg: TrainConfig) -> RunState:
    """Train the next task in the stream, updating the state in place."""
    t = state.next_task
    if t >= scenario.n_tasks:
        raise IndexError(f"no task {t} in a {scenario.n_tasks}-task scenario")
    task = scenario.tasks[t]
    n_new = len(task.classes)
    n_old = len(seen_classes(scenario, t - 1)) if t > 0 else 0

    if t > 0:
        if cfg.kd.any_active:
            state.teacher = snapshot(state.model)  # covers exactly the old classes
        expand_head(state.model, n_new, seed=_derive_seed(cfg.seed, "head", t))

    seen = seen_classes(scenario, t)
    row_of = {c: i for i, c in enumerate(seen)}
    teacher = state.teacher if cfg.kd.any_active else None

    current = [(scenario.get(sid), False) for sid in task.train]
    replay = []
    if state.memory is not None:
        replay = [(s, True) for s in rehearsal_dataset(state.memory)]
    epoch_data = current + replay

    optimizer = torch.optim.Adam(
        state.model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps
    )
    epoch_pooled: list[float] = []
    last_eval = None
    for epoch in range(cfg.epochs_per_task):
        rng = np.random.default_rng([cfg.seed, t, epoch])
        order = rng.permutation(len(epoch_data))
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [epoch_data[i] for i in order[start : start + cfg.batch_size]]
            samples = [s for s, _ in batch]
            feats, lengths, labels = _batch_tensors(samples, row_of)
            rehearsal_mask = torch.tensor([flag for _, flag in batch], dtype=torch.bool)

            emb = state.model.encode(feats, lengths)
            logits = state.model.classify(emb)
            teacher_logits = teacher_emb = None
            if teacher is not None and t > 0:
                with torch.no_grad():
                    teacher_emb = teacher.encode(feats, lengths)
                    teacher_logits = teacher.classify(teacher_emb)
            breakdown = total_loss(
                cfg.kd,
                logits,
                labels,
                n_old=n_old,
                n_new=n_new,
                rehearsal_mask=rehearsal_mask,
                student_emb=emb,
                teacher_logits=teacher_logits,
                teacher_emb=teacher_emb,
            )
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()

            gem_violations = ""
            gem_delta = ""
            if cfg.strategy == "gem" and state.memory is not None and len(state.memory):
                g = gem_mod.flat_grad(state.model)
                groups = state.memory.by_source_task()
                G = gem_mod.reference_gradients(
                    state.model, groups, lambda mdl, ss: _memory_ce(mdl, ss, row_of)
                )
                solution = gem_mod.project(g, G, margin=cfg.gem_margin)
                gem_violations = int((G @ g < -cfg.gem_margin).sum())
                gem_delta = float(np.linalg.norm(solution.g_proj - g))
                gem_mod.assign_flat_grad(state.model, solution.g_proj)
            optimizer.step()

            state.step_rows.append(
                {
                    "task": t,
                    "epoch": epoch,
                    "step": step,
                    "ce": breakdown.ce,
                    "kld": breakdown.kld,
                    "mse": breakdown.mse,
                    "total": breakdown.total_value,
                    "lambda_ce": breakdown.weights.lambda_ce,
                    "lambda_feat": breakdown.weights.lambda_feat,
                    "lambda_pred": breakdown.weights.lambda_pred,
                    "gem_violations": gem_violations,
                    "gem_proj_delta": gem_delta,
                }
            )

        last_eval = evaluate(state.model, scenario, t)
        epoch_pooled.append(last_eval.pooled)
        state.eval_rows.append({"task": t, "epoch": epoch, "accuracy": last_eval.pooled})

    state.matrix.add_task(last_eval, epoch_pooled)
    log.info("task %d done: pooled accuracy %.4f", t, last_eval.pooled)

    if state.memory is not None:
        samples_by_class = {c: [] for c in task.classes}
        for sid in task.train:
            s = scenario.get(sid)
            samples_by_class[s.label].append(s)
        update_after_task(
            state.memory,
            task,
            _SELECTION_OF[cfg.strategy],
            samples_by_class,
            embed=_embed_fn(state.model),
            seed=_derive_seed(cfg.seed, "memory", t),
        )
    state.next_task = t + 1
    return state


@dataclass
class ExperimentResult:
    config: dict
    matrix: AccuracyMatrix
    step_rows: list[dict]
    eval_rows: list[dict]
    memory_json: str | None
    checkpoints: list[tuple[IntentModel, list[int]]]

    @property
    def avg_acc(self) -> float:
        return self.matrix.avg_and_last()[0]

    @property
    def last_acc(self) -> float:
        return self.matrix.avg_and_last()[1]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True))
        self.matrix.to_csv(out / "accuracy_matrix.csv")
        _write_csv(
            out / "epoch_log.csv",
            [
                "task", "epoch", "step", "ce", "kld", "mse", "total",
                "lambda_ce", "lambda_feat", "lambda_pred",
                "gem_violations", "gem_proj_delta",
            ],
            self.step_rows,
        )
        _write_csv(out / "eval_log.csv", ["task", "epoch", "accuracy"], self.eval_rows)
        if self.memory_json is not None:
            (out / "memory_dump.json").write_text(self.memory_json)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for t, (mdl, classes) in enumerate(self.checkpoints):
            save_checkpoint(ckpt_dir / f"task_{t}.npz", mdl, classes)
        return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _write_csv(path, columns: list[str], rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def run_experiment(
    scenario: Scenario,
    cfg: TrainConfig,
    model_cfg: TCNConfig | None = None,
    save_checkpoints: bool = True,
) -> ExperimentResult:
    """Train the full task stream and collect metrics and logs.

    Deterministic for fixed (scenario, cfg, model_cfg): the model init,
    shuffles, selection and optimizer all derive from cfg.seed, and torch
    runs single-threaded to keep reductions bit-stable.
    """
    if model_cfg is None:
        model_cfg = TCNConfig()
    torch.set_num_threads(1)

    memory = None
    if cfg.uses_memory:
        if cfg.memory_capacity < scenario.total_classes:
            raise ValueError(
                f"strategy {cfg.strategy!r} needs memory_capacity >= total classes "
                f"({scenario.total_classes}), got {cfg.memory_capacity}"
            )
        memory = allocate(cfg.memory_capacity, scenario.total_classes)

    state = RunState(
        model=init_model(model_cfg, len(scenario.tasks[0].classes), cfg.seed),
        memory=memory,
        matrix=AccuracyMatrix(),
    )
    checkpoints: list[tuple[IntentModel, list[int]]] = []
    for t in range(scenario.n_tasks):
        train_task(state, scenario, cfg)
        if save_checkpoints:
            checkpoints.append((snapshot(state.model), list(seen_classes(scenario, t))))

    from dataclasses import asdict

    config_echo = {
        "train": asdict(cfg),
        "model": asdict(model_cfg),
        "scenario": {
            "class_order_seed": scenario.class_order_seed,
            "total_classes": scenario.total_classes,
            "n_tasks": scenario.n_tasks,
            "task_sizes": [len(task.classes) for task in scenario.tasks],
        },
    }
    return ExperimentResult(
        config=config_echo,
        matrix=state.matrix,
        step_rows=state.step_rows,
        eval_rows=state.eval_rows,
        memory_json=state.memory.to_json() if state.memory is not None else None,
        checkpoints=checkpoints,
    )
