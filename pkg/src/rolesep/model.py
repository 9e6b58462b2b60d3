"""Role-separated transformer: controller tokens + workspace patch tokens.

Variants (per block):

* a: structured pass only; workspace rows see the controller only.
* b: structured pass only; workspace rows see controller + own 3x3 patch neighborhood.
* c: dense pass, then the structured pass of a.
* d: dense pass, then the structured pass of b.

Controller rows always see every token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import N_CLASSES, N_SYMBOLS
from .numerics import load_checkpoint, masked_attention, save_checkpoint
from .recurrence import RecurrentResult, RecurrentWrapper

VARIANTS = ("a", "b", "c", "d")


class ModelError(ValueError):
    pass


class TaskIndexOutOfRange(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    depth: int = 2
    canvas: int = 16
    patch: int = 2
    variant: str = "d"
    recur_steps: int = 1
    ema_alpha: float = 0.9
    max_demos: int = 4
    n_task_embeddings: int = 1
    heads: int | None = 2
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}")
        if self.canvas % self.patch:
            raise ModelError("canvas must be divisible by patch")
        if self.embed_dim % self.n_heads:
            raise ModelError("embed_dim must be divisible by the head count")
        if self.recur_steps < 1 or not 0.0 <= self.ema_alpha < 1.0:
            raise ModelError("need recur_steps >= 1 and 0 <= ema_alpha < 1")
        if self.max_demos < 1 or self.n_task_embeddings < 1:
            raise ModelError("need max_demos >= 1 and n_task_embeddings >= 1")

    @property
    def n_heads(self) -> int:
        return self.heads if self.heads else max(1, self.embed_dim // 64)

    @property
    def grid_side(self) -> int:
        return self.canvas // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def full_size_config(**overrides) -> ModelConfig:
    base = ModelConfig(embed_dim=512, depth=10, canvas=64, patch=2, heads=None, n_task_embeddings=400)
    return replace(base, **overrides)


# --- masks ---------------------------------------------------------------


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray = field(repr=False)
    variant: str
    n_controller: int
    grid_side: int

    def tensor(self, device=None) -> torch.Tensor:
        return torch.from_numpy(self.allow).to(device)


def build_mask(variant: str, n_controller: int, grid_side: int) -> AttentionMask:
    """Allow-matrix of the structured pass over ``P + G*G`` tokens."""
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}")
    if n_controller < 1 or grid_side < 1:
        raise ModelError("need P >= 1 and G >= 1")
    return AttentionMask(_mask_array(variant, n_controller, grid_side), variant, n_controller, grid_side)


@lru_cache(maxsize=64)
def _mask_array(variant: str, P: int, G: int) -> np.ndarray:
    S = P + G * G
    allow = np.zeros((S, S), dtype=bool)
    allow[:P, :] = True
    allow[P:, :P] = True
    if variant in ("b", "d"):
        r, c = np.divmod(np.arange(G * G), G)
        near = (np.abs(r[:, None] - r[None, :]) <= 1) & (np.abs(c[:, None] - c[None, :]) <= 1)
        allow[P:, P:] = near
    allow.setflags(write=False)
    return allow


@lru_cache(maxsize=64)
def _mask_tensor(variant: str, P: int, G: int) -> torch.Tensor:
    return torch.from_numpy(_mask_array(variant, P, G).copy())


# --- layers --------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        B, S, D = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out, w = masked_attention(q, k, v, mask)
        return self.proj(out.transpose(1, 2).reshape(B, S, D)), w


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class RoleSeparatedBlock(nn.Module):
    """Pre-norm block: [dense attention], structured attention, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, dense: bool):
        super().__init__()
        if dense:
            self.norm_dense = nn.LayerNorm(dim)
            self.dense = Attention(dim, heads)
        else:
            self.dense = None
        self.norm_struct = nn.LayerNorm(dim)
        self.struct = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, h: torch.Tensor, mask: torch.Tensor, record: list | None = None) -> torch.Tensor:
        if self.dense is not None:
            out, w = self.dense(self.norm_dense(h), None)
            h = h + out
            if record is not None:
                record.append(("dense", w.detach()))
        out, w = self.struct(self.norm_struct(h), mask)
        h = h + out
        if record is not None:
            record.append(("structured", w.detach()))
        return h + self.mlp(self.norm_mlp(h))


@dataclass
class ModelOutput:
    logits: torch.Tensor  # [B, canvas*canvas, N_CLASSES]
    correctness: torch.Tensor  # [B]
    mid_logits: torch.Tensor | None = None
    workspace: torch.Tensor | None = None
    attention: list[dict] | None = None


class RoleSeparatedTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant
        D, G, p = cfg.embed_dim, cfg.grid_side, cfg.patch
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(2**31, (1,), generator=gen)))
            self.patch_embed = nn.Linear(p * p * N_SYMBOLS, D)
            self.row_pos = nn.Parameter(0.02 * torch.randn(G, D))
            self.col_pos = nn.Parameter(0.02 * torch.randn(G, D))
            self.context_mlp = MLP(D, 2 * D)
            self.task_embed = nn.Parameter(0.02 * torch.randn(cfg.n_task_embeddings, D))
            self.ttt_token = nn.Parameter(self.task_embed.detach().mean(0).clone())
            self.role_embed = nn.Parameter(0.02 * torch.randn(cfg.max_demos + 1, D))
            dense = cfg.variant in ("c", "d")
            self.blocks = nn.ModuleList(
                RoleSeparatedBlock(D, cfg.n_heads, cfg.mlp_ratio, dense) for _ in range(cfg.depth)
            )
            self.recurrence = RecurrentWrapper(D, cfg.recur_steps, cfg.ema_alpha)
            self.norm_out = nn.LayerNorm(D)
            self.head = nn.Linear(D, p * p * N_CLASSES)
            self.correct_head = nn.Linear(D, 1)

    # -- embeddings -------------------------------------------------------

    def patchify(self, canvases: torch.Tensor) -> torch.Tensor:
        """``[..., C, C]`` symbols -> ``[..., L, p*p*N_SYMBOLS]`` one-hot patches."""
        C, p, G = self.cfg.canvas, self.cfg.patch, self.cfg.grid_side
        if canvases.shape[-2:] != (C, C):
            raise ShapeMismatch(f"expected {C}x{C} canvases, got {tuple(canvases.shape[-2:])}")
        lead = canvases.shape[:-2]
        x = F.one_hot(canvases.long(), N_SYMBOLS).to(self.patch_embed.weight.dtype)
        x = x.reshape(*lead, G, p, G, p, N_SYMBOLS).movedim(-4, -3)
        return x.reshape(*lead, G * G, p * p * N_SYMBOLS)

    def pos_embed(self) -> torch.Tensor:
        G = self.cfg.grid_side
        return (self.row_pos[:, None, :] + self.col_pos[None, :, :]).reshape(G * G, -1)

    def embed_workspace(self, canvases: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(self.patchify(canvases)) + self.pos_embed()

    def context_tokens(self, demo_x: torch.Tensor, demo_y: torch.Tensor) -> torch.Tensor:
        """``[..., C, C]`` demo canvases -> ``[..., D]`` context tokens."""
        if demo_x.shape != demo_y.shape:
            raise ShapeMismatch(f"demo canvases differ: {tuple(demo_x.shape)} vs {tuple(demo_y.shape)}")
        delta = self.embed_workspace(demo_y) - self.embed_workspace(demo_x)
        return self.context_mlp(delta.mean(dim=-2))

    def task_token(self, task_index: torch.Tensor | None, batch: int) -> torch.Tensor:
        if task_index is None:
            return self.ttt_token.expand(batch, -1)
        if int(task_index.min()) < 0 or int(task_index.max()) >= self.cfg.n_task_embeddings:
            raise TaskIndexOutOfRange(f"task index outside 0..{self.cfg.n_task_embeddings - 1}")
        return self.task_embed[task_index]

    def build_controller(
        self, task_index: torch.Tensor | None, demo_x: torch.Tensor, demo_y: torch.Tensor
    ) -> torch.Tensor:
        """``[B, m, C, C]`` demos -> controller ``[B, m + 1, D]``."""
        B, m = demo_x.shape[:2]
        if m < 1:
            raise ModelError("at least one demonstration is required")
        if m > self.cfg.max_demos:
            raise ModelError(f"{m} demonstrations exceed max_demos={self.cfg.max_demos}")
        tau = self.task_token(task_index, B)
        g = torch.cat([tau[:, None, :], self.context_tokens(demo_x, demo_y)], dim=1)
        return g + self.role_embed[: m + 1]

    @torch.no_grad()
    def reset_ttt_token(self) -> None:
        self.ttt_token.copy_(self.task_embed.mean(0))

    # -- heads --------------------------------------------------------------

    def output_head(self, workspace: torch.Tensor) -> torch.Tensor:
        """``[B, L, D]`` -> per-cell logits ``[B, C*C, N_CLASSES]``."""
        B = workspace.shape[0]
        G, p = self.cfg.grid_side, self.cfg.patch
        x = self.head(workspace).reshape(B, G, G, p, p, N_CLASSES).movedim(3, 2)
        return x.reshape(B, (G * p) ** 2, N_CLASSES)

    def correctness_head(self, workspace: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.correct_head(workspace.mean(dim=1))).squeeze(-1)

    # -- encoder ------------------------------------------------------------

    def structured_mask(self, n_controller: int) -> torch.Tensor:
        return _mask_tensor(self.variant, n_controller, self.cfg.grid_side)

    def encoder(self, h: torch.Tensor, mask: torch.Tensor, record: list | None = None) -> torch.Tensor:
        for blk in self.blocks:
            h = blk(h, mask, record)
        return h

    def forward(
        self,
        query: torch.Tensor,
        demo_x: torch.Tensor,
        demo_y: torch.Tensor,
        task_index: torch.Tensor | None = None,
        record_attention: bool = False,
    ) -> ModelOutput:
        if self.variant in ("c", "d") and self.blocks[0].dense is None:
            raise ModelError(f"variant {self.variant} needs dense-pass weights this model was built without")
        g = self.build_controller(task_index, demo_x, demo_y)
        w = self.embed_workspace(query)
        P = g.shape[1]
        h0 = torch.cat([g, w], dim=1)
        mask = self.structured_mask(P)
        records: list[dict] | None = [] if record_attention else None

        def f(x: torch.Tensor) -> torch.Tensor:
            raw: list | None = [] if records is not None else None
            out = self.encoder(x, mask, raw)
            if records is not None:
                step = sum(1 for r in records if r["layer"] == 0 and r["pass"] == "structured")
                per_layer = 2 if self.blocks[0].dense is not None else 1
                for i, (kind, wts) in enumerate(raw):
                    records.append({"step": step, "layer": i // per_layer, "pass": kind, "weights": wts})
            return out

        res: RecurrentResult = self.recurrence(h0, f)
        ws = self.norm_out(res.h[:, P:])
        mid = None
        if res.taps:
            (tap,) = res.taps.values()
            mid = self.output_head(self.norm_out(tap[:, P:]))
        return ModelOutput(
            logits=self.output_head(ws),
            correctness=self.correctness_head(ws),
            mid_logits=mid,
            workspace=ws,
            attention=records,
        )

    def set_variant(self, variant: str) -> None:
        """Swap the structured-pass mask (used by staged c -> d training)."""
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}")
        if (variant in ("c", "d")) != (self.blocks[0].dense is not None):
            raise ModelError(f"cannot switch {self.variant} -> {variant}: dense-pass presence differs")
        self.variant = variant
        self.cfg = replace(self.cfg, variant=variant)


# --- checkpoints -----------------------------------------------------------


def save_model(path: str | Path, model: RoleSeparatedTransformer, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "variant": model.variant, **(extra or {})}
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path: str | Path) -> tuple[RoleSeparatedTransformer, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["config"])
    model = RoleSeparatedTransformer(cfg)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
