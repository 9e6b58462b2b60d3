"""Gated EMA recurrence around the encoder stack.

One step::

    u     = f(h + s)
    gamma = sigmoid(W [h; s])
    h'    = h + gamma * u
    s'    = alpha * s + (1 - alpha) * h'

starting from ``s = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite recurrent state at step {step}")
        self.step = step


def gate(h: torch.Tensor, s: torch.Tensor, w: nn.Linear) -> torch.Tensor:
    if h.shape != s.shape:
        raise ValueError(f"state shapes differ: {tuple(h.shape)} vs {tuple(s.shape)}")
    return torch.sigmoid(w(torch.cat([h, s], dim=-1)))


def default_mid_step(k_steps: int) -> int:
    return math.ceil(k_steps / 2)


@dataclass
class RecurrentResult:
    h: torch.Tensor
    s: torch.Tensor
    taps: dict[int, torch.Tensor]


def recur_forward(
    h0: torch.Tensor,
    encoder: Callable[[torch.Tensor], torch.Tensor],
    k_steps: int,
    alpha: float,
    w: nn.Linear,
    tap_steps: tuple[int, ...] = (),
) -> RecurrentResult:
    """Unroll ``k_steps`` refinement steps; ``taps[k]`` holds ``h`` after step k."""
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    h = h0
    s = torch.zeros_like(h0)
    taps: dict[int, torch.Tensor] = {}
    for k in range(k_steps):
        u = encoder(h + s)
        g = gate(h, s, w)
        h = h + g * u
        s = alpha * s + (1.0 - alpha) * h
        if not bool(torch.isfinite(h).all()):
            raise NonFiniteState(k + 1)
        if k + 1 in tap_steps:
            taps[k + 1] = h
    return RecurrentResult(h, s, taps)


class RecurrentWrapper(nn.Module):
    def __init__(self, dim: int, k_steps: int, alpha: float):
        super().__init__()
        self.k_steps = k_steps
        self.alpha = alpha
        self.gate = nn.Linear(2 * dim, dim)
        nn.init.normal_(self.gate.weight, std=0.02)
        nn.init.zeros_(self.gate.bias)

    def mid_step(self) -> int | None:
        return default_mid_step(self.k_steps) if self.k_steps > 2 else None

    def forward(self, h0: torch.Tensor, encoder: Callable[[torch.Tensor], torch.Tensor]) -> RecurrentResult:
        mid = self.mid_step()
        return recur_forward(h0, encoder, self.k_steps, self.alpha, self.gate, () if mid is None else (mid,))
