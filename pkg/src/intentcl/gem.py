"""Gradient episodic memory: per-past-task constraints and projection.

Before each optimizer step the current gradient g is tested against one
constraint per completed task: the inner product with that task's memory
gradient must not be negative. On violation, g is replaced by the closest
feasible vector, obtained from the dual problem

    min_v  0.5 * ||g + G^T v||^2   s.t.  v >= 0,

solved by projected coordinate descent (the number of constraints is tiny),
with g_proj = g + G^T v.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .scenario import Sample

__all__ = ["QPSolution", "project", "reference_gradients", "flat_grad", "assign_flat_grad"]


@dataclass(frozen=True)
class QPSolution:
    v: np.ndarray
    g_proj: np.ndarray
    violated: bool


def project(
    g: np.ndarray,
    G: np.ndarray,
    margin: float = 0.0,
    tol: float = 1e-10,
) -> QPSolution:
    """Project g so every constraint row satisfies G @ g_proj >= -tol.

    Returns g unchanged when G @ g >= -margin holds elementwise. The dual
    coordinate descent sweeps until the largest coordinate update drops
    below ``tol``, capped at 1000 * k^2 sweeps (ill-conditioned constraint
    sets have needed several hundred).
    """
    g = np.asarray(g, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64).reshape(-1, g.shape[0]) if np.size(G) else np.zeros((0, g.shape[0]))
    if not (np.isfinite(g).all() and np.isfinite(G).all()):
        raise ValueError("non-finite gradient input")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    k = G.shape[0]
    if k == 0 or np.all(G @ g >= -margin):
        return QPSolution(v=np.zeros(k), g_proj=g.copy(), violated=False)

    gram = G @ G.T
    q = G @ g
    diag = np.diag(gram)
    v = np.zeros(k)
    for _ in range(max(1, 1000 * k * k)):
        delta = 0.0
        for i in range(k):
            if diag[i] <= 0.0:
                continue  # zero constraint row, always feasible
            step = (q[i] + gram[i] @ v) / diag[i]
            new = max(0.0, v[i] - step)
            delta = max(delta, abs(new - v[i]))
            v[i] = new
        if delta < tol:
            break
    return QPSolution(v=v, g_proj=g + G.T @ v, violated=True)


def flat_grad(model: torch.nn.Module) -> np.ndarray:
    """Concatenate the .grad of every parameter into one float64 vector."""
    parts = []
    for p in model.parameters():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        parts.append(grad.detach().reshape(-1).numpy())
    return np.concatenate(parts)


def assign_flat_grad(model: torch.nn.Module, flat: np.ndarray) -> None:
    """Write a flat vector back into the parameters' .grad slots."""
    offset = 0
    for p in model.parameters():
        n = p.numel()
        chunk = torch.as_tensor(flat[offset : offset + n], dtype=p.dtype)
        p.grad = chunk.reshape(p.shape).clone()
        offset += n
    if offset != flat.size:
        raise ValueError(f"gradient size mismatch: model has {offset}, vector has {flat.size}")


def reference_gradients(
    model: torch.nn.Module,
    groups: dict[int, Sequence[Sample]],
    loss_fn,
) -> np.ndarray:
    """One constraint row per past task: the gradient of ``loss_fn`` over
    that task's stored exemplars at the current parameters.

    ``loss_fn(model, samples)`` must return a scalar loss averaged over the
    samples. Rows are ordered by task index; an empty memory yields a
    (0, n_params) matrix.
    """
    n_params = sum(p.numel() for p in model.parameters())
    if not groups:
        return np.zeros((0, n_params))
    rows = []
    for task_index in sorted(groups):
        model.zero_grad(set_to_none=True)
        loss = loss_fn(model, groups[task_index])
        loss.backward()
        rows.append(flat_grad(model))
    model.zero_grad(set_to_none=True)
    return np.stack(rows)
