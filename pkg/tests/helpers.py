"""Finite-difference gradient checking used by the module and acceptance tests."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def sample_coordinates(tensor: torch.Tensor, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    flat = rng.choice(tensor.numel(), size=min(count, tensor.numel()), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, tuple(tensor.shape))) for f in flat]


def max_relative_error(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    per_param: int,
    rng: np.random.Generator,
    h: float = 1e-6,
    floor: float = 1e-8,
) -> tuple[float, int]:
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over a
    random sample of coordinates of each tensor in ``params`` (central differences).

    Returns the error and the number of coordinates checked.
    """
    grads = torch.autograd.grad(loss_fn(), list(params))
    worst, checked = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            for idx in sample_coordinates(p, per_param, rng):
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_fn().item()
                p[idx] = orig - h
                down = loss_fn().item()
                p[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = g[idx].item()
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, err)
                checked += 1
    return worst, checked
