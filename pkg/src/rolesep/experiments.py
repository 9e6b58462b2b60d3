"""Desk-scale experiment harnesses shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .arcdata import FamilyKind, SynthFamily, Task, family_suite, synth_task
from .infer import EvalReport, evaluate
from .model import ModelConfig, RoleSeparatedTransformer, desk_config
from .numerics import ParamStore
from .train import TrainConfig, TTTStrategy, demo_accuracy, train_offline

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SuiteConfig:
    n_tasks: int = 20
    demo_pool: int = 32  # demonstrations per training task (stand-in for corpus expansion)
    sizes: tuple[int, int] = (2, 4)
    family_seed: int = 0
    task_seed: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: desk_config(canvas=12))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-3, batch_size=16))
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    steps: int = 3000
    n_views: int = 30


def training_suite(cfg: SuiteConfig) -> list[Task]:
    fams = family_suite(cfg.n_tasks, cfg.family_seed, cfg.sizes)
    return [synth_task(f, cfg.task_seed + i, cfg.demo_pool, 1) for i, f in enumerate(fams)]


def heldout_suite(n_tasks: int = 20, m: int = 3, sizes: tuple[int, int] = (2, 4), seed: int = 1) -> list[Task]:
    """Fresh family parameters and fresh grids; ``m`` demonstrations each, like a corpus task."""
    fams = family_suite(n_tasks, seed, sizes)
    return [synth_task(f, 50_000 + 97 * seed + i, m, 1, task_id=f"heldout{i}_{f.describe()}") for i, f in enumerate(fams)]


def recolor_task(seed: int = 7, m: int = 3) -> Task:
    return synth_task(SynthFamily(FamilyKind.RECOLOR, {"src": 2, "dst": 5}), seed, m, 1)


def pretrain(
    variant: str, seed: int, exp: ExperimentConfig, tasks: list[Task] | None = None
) -> tuple[RoleSeparatedTransformer, list[Task]]:
    tasks = tasks if tasks is not None else training_suite(exp.suite)
    cfg = replace(exp.model, variant=variant, n_task_embeddings=len(tasks))
    model = RoleSeparatedTransformer(cfg, seed=seed)
    t0 = time.time()
    res = train_offline(model, tasks, exp.train, exp.steps, seed)
    tail = np.mean([h["accuracy"] for h in res.history[-100:]]) if res.history else 0.0
    log.info("pretrain %s seed %d: %.0fs, final batch accuracy %.3f", variant, seed, time.time() - t0, tail)
    return model, tasks


@dataclass
class AblationResult:
    variants: dict[str, list[float]]  # variant -> per-seed pass@2
    reports: dict[tuple[str, int], EvalReport]

    def mean(self, variant: str) -> float:
        return float(np.mean(self.variants[variant]))


def run_ablation(
    variants: tuple[str, ...] = ("a", "d"),
    seeds: tuple[int, ...] = (0, 1, 2),
    exp: ExperimentConfig = ExperimentConfig(),
    models: dict[tuple[str, int], RoleSeparatedTransformer] | None = None,
) -> AblationResult:
    """Train each variant on the suite's demonstrations, score its held-out inference pairs."""
    tasks = training_suite(exp.suite)
    out: dict[str, list[float]] = {v: [] for v in variants}
    reports = {}
    for v in variants:
        for s in seeds:
            model = models[(v, s)] if models and (v, s) in models else pretrain(v, s, exp, tasks)[0]
            rep = evaluate(model, tasks, None, exp.n_views, [s], exp.train, task_indices=list(range(len(tasks))))
            out[v].append(rep.mean)
            reports[(v, s)] = rep
            log.info("variant %s seed %d: pass@2 %.3f", v, s, rep.mean)
    return AblationResult(out, reports)


@dataclass
class TTTEfficacyResult:
    pre: list[float]
    post: list[float]
    epochs: list[list[int]]
    accuracy: list[list[list[float]]]  # seed -> task -> per-epoch TTT batch accuracy


def run_ttt_efficacy(
    models: dict[int, RoleSeparatedTransformer],
    tasks: list[Task],
    strategy: TTTStrategy = TTTStrategy.ttt2(),
    exp: ExperimentConfig = ExperimentConfig(),
) -> TTTEfficacyResult:
    """pass@2 on held-out tasks before and after TTT, per seed."""
    pre, post, epochs, accs = [], [], [], []
    for s, model in sorted(models.items()):
        before = evaluate(model, tasks, None, exp.n_views, [s], exp.train)
        after = evaluate(model, tasks, strategy, exp.n_views, [s], exp.train)
        pre.append(before.mean)
        post.append(after.mean)
        epochs.append([r.ttt_epochs for r in after.rows])
        accs.append([r.ttt_accuracy for r in after.rows])
        log.info("seed %d: pass@2 %.3f -> %.3f", s, before.mean, after.mean)
    return TTTEfficacyResult(pre, post, epochs, accs)


def overfit_steps(seed: int, max_steps: int = 500, check_every: int = 25, n_views: int = 4) -> int | None:
    """Steps until the desk model is exact on every demo view of one Recolor task; None if never."""
    task = recolor_task()
    model = RoleSeparatedTransformer(desk_config(variant="d"), seed=seed)
    cfg = TrainConfig()
    store = ParamStore.from_module(model, exclude=("ttt_token",))
    done = 0
    while done < max_steps:
        n = min(check_every, max_steps - done)
        train_offline(model, [task], cfg, n, seed * 7919 + done, store=store, step_offset=done, total_steps=max_steps)
        done += n
        if demo_accuracy(model, [task], n_views, seed) == 1.0:
            return done
    return None


def config_record(exp: ExperimentConfig) -> dict:
    return asdict(exp)
