"""Numeric core on top of torch autograd.

torch supplies tensors and reverse-mode accumulation. Attention with an
explicit allow-mask, the weighted cross-entropy, the central-difference
gradient checker, the Adam update and the checkpoint format live here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F


class NumericsError(RuntimeError):
    pass


class EmptyRow(NumericsError):
    pass


class ClassOutOfRange(NumericsError):
    pass


class NonFiniteGradient(NumericsError):
    pass


class CheckpointError(NumericsError):
    pass


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention restricted to ``mask``.

    q, k, v: ``[..., S, Dh]``; mask: ``[S, S]`` bool (True = may attend) or
    None for dense. Returns ``(output, weights)``. Disallowed entries get
    exactly zero weight.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape != scores.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape)} vs scores {tuple(scores.shape[-2:])}")
        if not bool(mask.any(dim=-1).all()):
            row = int((~mask.any(dim=-1)).nonzero()[0])
            raise EmptyRow(f"token {row} has no attention targets")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted mean of per-position negative log-likelihood.

    logits ``[N, C]``, targets ``[N]``, weights ``[N]`` (default ones). A fully
    masked input gives 0.
    """
    n_cls = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= n_cls):
        raise ClassOutOfRange(f"targets must lie in 0..{n_cls - 1}")
    nll = per_position_ce(logits, targets)
    if weights is None:
        weights = torch.ones_like(nll)
    total = weights.sum()
    if float(total) == 0.0:
        return (nll * 0).sum()
    return (nll * weights).sum() / total


def per_position_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


@dataclass
class ParamStore:
    """Named parameters plus Adam moments and a step counter."""

    params: dict[str, torch.nn.Parameter]
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, torch.zeros_like(p.detach()))
            self.exp_avg_sq.setdefault(name, torch.zeros_like(p.detach()))

    @classmethod
    def from_module(cls, module: torch.nn.Module, exclude: Iterable[str] = ()) -> "ParamStore":
        skip = set(exclude)
        return cls({n: p for n, p in module.named_parameters() if n not in skip})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_optimizer(self) -> None:
        for name in self.params:
            self.exp_avg[name].zero_()
            self.exp_avg_sq[name].zero_()
        self.step = 0


def adam_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> ParamStore:
    """Adam with decoupled weight decay; leaves ``.grad`` untouched.

    All gradients are checked before any parameter moves, so a non-finite
    gradient aborts the whole update.
    """
    for name, p in store.params.items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(name)
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    with torch.no_grad():
        for name, p in store.params.items():
            if p.grad is None:
                continue
            m, v = store.exp_avg[name], store.exp_avg_sq[name]
            m.mul_(b1).add_(p.grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
            update = (m / c1) / ((v / c2).sqrt() + eps)
            if weight_decay:
                update = update + weight_decay * p
            p.sub_(lr * update)
    return store


def grad_check(
    forward: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-4,
    sample: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``sample`` coordinates are drawn uniformly over all parameter entries.
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if sample <= 0:
        return 0.0
    store.zero_grad()
    loss = forward(store)
    loss.backward()
    names = list(store.params)
    sizes = np.array([store.params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.integers(sizes.sum(), size=sample)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for idx in flat:
            i = int(np.searchsorted(bounds, idx, side="right"))
            name = names[i]
            j = int(idx - (bounds[i - 1] if i else 0))
            p = store.params[name]
            g = p.grad
            analytic = float(g.reshape(-1)[j]) if g is not None else 0.0
            view = p.data.view(-1)
            orig = float(view[j])
            view[j] = orig + h
            fp = float(forward(store))
            view[j] = orig - h
            fm = float(forward(store))
            view[j] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    store.zero_grad()
    return worst


# --- checkpoint format ---------------------------------------------------
#
#   magic  b"RSCK"  | u32 version | u32 meta_len | meta (utf-8 json)
#   u32 n_params, then per parameter:
#   u16 name_len | name | u8 ndim | u32 * ndim shape | float32 little-endian data

MAGIC = b"RSCK"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        nb = name.encode()
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: dict[str, torch.Tensor] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", buf, off)
        off += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        out[name] = torch.from_numpy(arr.copy())
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out, meta
