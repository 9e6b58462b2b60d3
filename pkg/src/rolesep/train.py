"""Offline multi-task training, staged c -> d training and test-time training."""

from __future__ import annotations

import copy
import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .arcdata import Grid, Pair, Task, grid_equal
from .model import RoleSeparatedTransformer
from .numerics import ParamStore, adam_step, cross_entropy, per_position_ce

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class ConfigViolation(TrainError):
    pass


class NonFiniteLoss(TrainError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class VariantMismatch(TrainError):
    pass


# --- configs -------------------------------------------------------------


@dataclass(frozen=True)
class TTT3Weights:
    correctness_weight: float = 0.1
    wrong_pixel_weight: float = 1.0
    correct_pixel_weight: float = 0.1
    exact_match_ce_scale: float = 0.1


@dataclass(frozen=True)
class LossConfig:
    mid_loss_weight: float = 0.5
    use_mid_loss: bool = False
    ttt3: TTT3Weights | None = None

    def __post_init__(self) -> None:
        ws = [self.mid_loss_weight] + ([] if self.ttt3 is None else list(asdict(self.ttt3).values()))
        if any(w < 0 for w in ws):
            raise ConfigViolation("loss weights must be >= 0")

    def check(self, recur_steps: int) -> None:
        if self.use_mid_loss and recur_steps in (1, 2):
            raise ConfigViolation(f"mid-loss is disabled for r={recur_steps}")

    @classmethod
    def for_recurrence(cls, recur_steps: int, **kw) -> "LossConfig":
        return cls(use_mid_loss=recur_steps > 2, **kw)


class TTTKind(str, enum.Enum):
    TTT1 = "ttt1"
    TTT2 = "ttt2"
    TTT3 = "ttt3"


@dataclass(frozen=True)
class TTTStrategy:
    kind: TTTKind
    epochs: int
    lr_scale: float
    early_stop_streak: int = 0  # 0 disables early stopping
    aux: TTT3Weights | None = None

    @classmethod
    def ttt1(cls) -> "TTTStrategy":
        return cls(TTTKind.TTT1, 100, 1.0)

    @classmethod
    def ttt2(cls) -> "TTTStrategy":
        return cls(TTTKind.TTT2, 300, 1.0 / 3.0, 3)

    @classmethod
    def ttt3(cls, weights: TTT3Weights | None = None) -> "TTTStrategy":
        return cls(TTTKind.TTT3, 300, 1.0 / 3.0, 3, weights or TTT3Weights())

    @classmethod
    def named(cls, name: str | int) -> "TTTStrategy":
        key = str(name).lower().removeprefix("ttt")
        return {"1": cls.ttt1, "2": cls.ttt2, "3": cls.ttt3}[key]()


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    min_lr_ratio: float = 0.0
    warmup_steps: int = 20
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    border_weight: float = 1.0
    align: int = 2
    ttt_lr: float = 1e-3
    ttt_copies: int = 2  # augmented copies of every demo per TTT epoch
    loss: LossConfig = field(default_factory=LossConfig)


# --- samples -------------------------------------------------------------


@dataclass
class Sample:
    query: np.ndarray  # [C, C] symbols
    target: np.ndarray  # [C, C] classes
    weights: np.ndarray  # [C, C]
    demo_x: np.ndarray  # [n_ctx, C, C]
    demo_y: np.ndarray
    params: aug.AugParams
    answer: Grid
    task_index: int | None = None


def make_sample(
    target: Pair,
    context: Sequence[Pair],
    params: aug.AugParams,
    border_weight: float = 1.0,
    task_index: int | None = None,
) -> Sample:
    q = aug.apply(target.input, params)
    y = aug.apply(target.output, params)
    w = np.ones(y.shape, dtype=np.float64)
    w[y == aug.BORDER] = border_weight
    return Sample(
        query=q,
        target=aug.target_classes(y),
        weights=w,
        demo_x=np.stack([aug.apply(p.input, params) for p in context]),
        demo_y=np.stack([aug.apply(p.output, params) for p in context]),
        params=params,
        answer=target.output,
        task_index=task_index,
    )


def pair_bounds(pairs: Sequence[Pair]) -> tuple[int, int]:
    grids = [g for p in pairs for g in (p.input, p.output) if g is not None]
    return aug.bounding_dims(grids)


def collate(samples: Sequence[Sample], dtype: torch.dtype) -> dict:
    t = lambda xs, dt: torch.as_tensor(np.stack(xs), dtype=dt)  # noqa: E731
    idx = [s.task_index for s in samples]
    if any(i is None for i in idx) and not all(i is None for i in idx):
        raise TrainError("cannot mix indexed and TTT task tokens in one batch")
    return {
        "query": t([s.query for s in samples], torch.long),
        "demo_x": t([s.demo_x for s in samples], torch.long),
        "demo_y": t([s.demo_y for s in samples], torch.long),
        "target": t([s.target.ravel() for s in samples], torch.long),
        "weights": t([s.weights.ravel() for s in samples], dtype),
        "task_index": None if idx[0] is None else torch.as_tensor(idx, dtype=torch.long),
    }


def exact_matches(logits: torch.Tensor, samples: Sequence[Sample]) -> list[bool]:
    C = samples[0].params.canvas
    arr = logits.detach().cpu().numpy().reshape(len(samples), C, C, -1)
    out = []
    for a, s in zip(arr, samples):
        g = aug.decode_logits(a, s.params)
        out.append(g is not None and grid_equal(g, s.answer))
    return out


# --- loss ----------------------------------------------------------------


def compute_loss(
    cell_logits: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor,
    cfg: LossConfig,
    mid_logits: torch.Tensor | None = None,
    correctness_prob: torch.Tensor | None = None,
    exact_match: torch.Tensor | Sequence[bool] | None = None,
    recur_steps: int | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Per-sample loss averaged over the batch.

    Shapes: logits ``[B, N, K]``, target/weights ``[B, N]``. Returns the total
    and a dict of batch-mean components (``ce``, ``mid``, ``correctness``).
    """
    if recur_steps is not None:
        cfg.check(recur_steps)
    B = cell_logits.shape[0]
    if exact_match is None:
        exact = torch.zeros(B, dtype=torch.bool)
    else:
        exact = torch.as_tensor(exact_match, dtype=torch.bool).reshape(B)
    zero = cell_logits.sum() * 0

    ce = []
    for b in range(B):
        if cfg.ttt3 is None:
            ce.append(cross_entropy(cell_logits[b], target[b], weights[b]))
            continue
        nll = per_position_ce(cell_logits[b], target[b])
        active = weights[b] > 0
        wrong = (cell_logits[b].argmax(-1) != target[b]) & active
        right = ~wrong & active
        term = zero
        if wrong.any():
            term = term + cfg.ttt3.wrong_pixel_weight * (nll * weights[b])[wrong].sum() / weights[b][wrong].sum()
        if right.any():
            term = term + cfg.ttt3.correct_pixel_weight * (nll * weights[b])[right].sum() / weights[b][right].sum()
        if exact[b]:
            term = term * cfg.ttt3.exact_match_ce_scale
        ce.append(term)
    ce_t = torch.stack(ce)

    mid_t = torch.zeros_like(ce_t)
    if cfg.use_mid_loss and mid_logits is not None:
        mids = []
        for b in range(B):
            if cfg.ttt3 is not None and exact[b]:
                mids.append(zero)
            else:
                mids.append(cfg.mid_loss_weight * cross_entropy(mid_logits[b], target[b], weights[b]))
        mid_t = torch.stack(mids)

    corr_t = torch.zeros_like(ce_t)
    if cfg.ttt3 is not None and correctness_prob is not None:
        p = correctness_prob.reshape(B)
        corr_t = cfg.ttt3.correctness_weight * F.binary_cross_entropy(
            p, exact.to(p.dtype), reduction="none"
        )

    total = (ce_t + mid_t + corr_t).mean()
    parts = {
        "ce": float(ce_t.detach().mean()),
        "mid": float(mid_t.detach().mean()),
        "correctness": float(corr_t.detach().mean()),
    }
    return total, parts


# --- loops ---------------------------------------------------------------


def model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    lo = cfg.lr * cfg.min_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * min(1.0, t)))


def _choose_context(rng: np.random.Generator, demos: Sequence[Pair], j: int, n_ctx: int) -> list[Pair]:
    others = [i for i in range(len(demos)) if i != j]
    if not others:
        # a single-demo task can only condition on itself
        return [demos[j]]
    pick = rng.choice(len(others), size=min(n_ctx, len(others)), replace=False)
    return [demos[others[int(i)]] for i in sorted(pick)]


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    steps: int = 0

    def write_csv(self, path: str | Path) -> None:
        if not self.history:
            Path(path).write_text("step\n")
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.history[0]))
            w.writeheader()
            w.writerows(self.history)


def train_step(
    model: RoleSeparatedTransformer,
    store: ParamStore,
    samples: Sequence[Sample],
    loss_cfg: LossConfig,
    lr: float,
    tcfg: TrainConfig,
    step: int,
) -> dict:
    batch = collate(samples, model_dtype(model))
    out = model(batch["query"], batch["demo_x"], batch["demo_y"], batch["task_index"])
    exact = exact_matches(out.logits, samples)
    loss, parts = compute_loss(
        out.logits,
        batch["target"],
        batch["weights"],
        loss_cfg,
        mid_logits=out.mid_logits,
        correctness_prob=out.correctness,
        exact_match=exact,
        recur_steps=model.cfg.recur_steps,
    )
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLoss(step)
    store.zero_grad()
    loss.backward()
    adam_step(store, lr, tcfg.betas, tcfg.weight_decay)
    return {"step": step, "loss": float(loss.detach()), **parts, "accuracy": float(np.mean(exact)), "lr": lr}


def train_offline(
    model: RoleSeparatedTransformer,
    tasks: Sequence[Task],
    cfg: TrainConfig,
    steps: int,
    seed: int,
    task_indices: Sequence[int] | None = None,
    store: ParamStore | None = None,
    step_offset: int = 0,
    total_steps: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Joint training over the demonstration sets of ``tasks``.

    Each sample picks a task, a target demo, a leave-one-out context of
    ``1..max_demos`` other demos (one size per batch) and one augmentation
    shared by all grids of the sample. Inference pairs are never read.
    """
    if task_indices is None:
        task_indices = list(range(len(tasks)))
    if max(task_indices, default=0) >= model.cfg.n_task_embeddings:
        raise TrainError("task index exceeds the task-embedding table")
    cfg.loss.check(model.cfg.recur_steps)
    model.train()
    store = store or ParamStore.from_module(model, exclude=("ttt_token",))
    rng = np.random.default_rng(seed)
    res = TrainResult()
    total = total_steps or steps
    demo_sets = [t.demos for t in tasks]
    for i in range(steps):
        step = step_offset + i
        min_m = min(len(demo_sets[k]) for k in range(len(tasks)))
        cap = max(1, min(model.cfg.max_demos, min_m - 1))
        n_ctx = int(rng.integers(1, cap + 1))
        samples = []
        for _ in range(cfg.batch_size):
            k = int(rng.integers(len(tasks)))
            demos = demo_sets[k]
            j = int(rng.integers(len(demos)))
            ctx = _choose_context(rng, demos, j, n_ctx)
            params = aug.sample_aug(rng, pair_bounds([demos[j], *ctx]), model.cfg.canvas, cfg.align)
            samples.append(make_sample(demos[j], ctx, params, cfg.border_weight, task_indices[k]))
        row = train_step(model, store, samples, cfg.loss, lr_at(step, total, cfg), cfg, step)
        res.history.append(row)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f acc %.3f", step + 1, row["loss"], row["accuracy"])
    res.steps = steps
    return res


def staged_c_to_d(
    model: RoleSeparatedTransformer,
    tasks: Sequence[Task],
    cfg: TrainConfig,
    extra_steps: int,
    seed: int,
    task_indices: Sequence[int] | None = None,
) -> TrainResult:
    """Continue a variant-c model under variant-d masks; parameters carry over."""
    if model.variant != "c":
        raise VariantMismatch(f"staged training starts from variant c, got {model.variant}")
    model.set_variant("d")
    return train_offline(model, tasks, cfg, extra_steps, seed, task_indices)


# --- evaluation on demonstrations ------------------------------------------


@torch.no_grad()
def demo_accuracy(
    model: RoleSeparatedTransformer,
    tasks: Sequence[Task],
    n_views: int,
    seed: int,
    align: int = 2,
    task_indices: Sequence[int] | None = None,
) -> float:
    """Exact-match rate over leave-one-out demo predictions under ``n_views`` views."""
    model.eval()
    hits = []
    for k, task in enumerate(tasks):
        idx = None if task_indices is None else task_indices[k]
        for j, target in enumerate(task.demos):
            ctx = [p for i, p in enumerate(task.demos) if i != j][: model.cfg.max_demos] or [target]
            views = aug.enumerate_views(n_views, seed + j, pair_bounds([target, *ctx]), model.cfg.canvas, align)
            samples = [make_sample(target, ctx, v, task_index=idx) for v in views]
            batch = collate(samples, model_dtype(model))
            out = model(batch["query"], batch["demo_x"], batch["demo_y"], batch["task_index"])
            hits += exact_matches(out.logits, samples)
    return float(np.mean(hits)) if hits else 0.0


# --- test-time training ------------------------------------------------------


@dataclass
class TTTResult:
    model: RoleSeparatedTransformer
    epochs_run: int
    stopped_early: bool
    history: list[dict] = field(default_factory=list)


def ttt_adapt(
    model: RoleSeparatedTransformer,
    task: Task,
    strategy: TTTStrategy,
    seed: int,
    cfg: TrainConfig = TrainConfig(),
    epochs: int | None = None,
) -> TTTResult:
    """Adapt a copy of ``model`` to ``task.demos``.

    A fresh task token (mean of the trained task embeddings) and fresh
    optimizer state are used; the trained task-embedding table is frozen.
    ``epochs`` overrides the strategy budget (desk-scale runs).
    """
    if not task.demos:
        raise TrainError("task has no demonstrations")
    model = copy.deepcopy(model)
    model.reset_ttt_token()
    model.train()
    store = ParamStore.from_module(model, exclude=("task_embed",))
    loss_cfg = replace(cfg.loss, ttt3=strategy.aux)
    lr = cfg.ttt_lr * strategy.lr_scale
    rng = np.random.default_rng(seed)
    demos = task.demos
    n_epochs = strategy.epochs if epochs is None else epochs
    history: list[dict] = []
    streak = 0
    stopped = False
    epoch = 0
    for epoch in range(1, n_epochs + 1):
        samples = []
        for _ in range(cfg.ttt_copies):
            for j, target in enumerate(demos):
                ctx = _choose_context(rng, demos, j, model.cfg.max_demos)
                params = aug.sample_aug(rng, pair_bounds([target, *ctx]), model.cfg.canvas, cfg.align)
                samples.append(make_sample(target, ctx, params, cfg.border_weight))
        row = train_step(model, store, samples, loss_cfg, lr, cfg, epoch)
        row["epoch"] = epoch
        history.append(row)
        streak = streak + 1 if row["accuracy"] == 1.0 else 0
        if strategy.early_stop_streak and streak >= strategy.early_stop_streak:
            stopped = True
            break
    model.eval()
    return TTTResult(model, epoch if n_epochs else 0, stopped, history)
