"""Multi-view voting, pass@2 scoring, corpus evaluation and attention-map export."""

from __future__ import annotations

import copy
import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import augment as aug
from .arcdata import Grid, Pair, Task, grid_equal
from .model import RoleSeparatedTransformer, build_mask
from .train import TrainConfig, TTTStrategy, collate, make_sample, model_dtype, pair_bounds, ttt_adapt


class InferError(RuntimeError):
    pass


class EmptyVotes(InferError):
    pass


class MissingGroundTruth(InferError):
    pass


class GridTooLargeForScale2(InferError):
    pass


@dataclass
class VoteTable:
    counts: dict[Grid, int] = field(default_factory=dict)
    total_views: int = 0
    skipped: int = 0

    def add(self, grid: Grid | None) -> None:
        self.total_views += 1
        if grid is None:
            self.skipped += 1
        else:
            self.counts[grid] = self.counts.get(grid, 0) + 1

    def merge(self, other: "VoteTable") -> "VoteTable":
        out = VoteTable(dict(self.counts), self.total_views + other.total_views, self.skipped + other.skipped)
        for g, c in other.counts.items():
            out.counts[g] = out.counts.get(g, 0) + c
        return out

    def ranked(self) -> list[tuple[Grid, int]]:
        # Grid orders by (height, width, cells)
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))


def pass_at_2(votes: VoteTable) -> tuple[Grid, Grid | None]:
    ranked = votes.ranked()
    if not ranked:
        raise EmptyVotes("no decodable view")
    return ranked[0][0], ranked[1][0] if len(ranked) > 1 else None


def context_for_inference(demos: Sequence[Pair], max_demos: int) -> list[Pair]:
    return list(demos[:max_demos])


@torch.no_grad()
def predict_votes(
    model: RoleSeparatedTransformer,
    x_infer: Grid,
    demos: Sequence[Pair],
    n_views: int,
    seed: int,
    task_index: int | None = None,
    align: int = 2,
    batch_size: int = 64,
) -> VoteTable:
    """Vote over ``n_views`` augmented views of ``x_infer``.

    Each view re-places the query and the demonstrations with the same
    parameters; predictions are mapped back through that view's inverse.
    """
    model.eval()
    ctx = context_for_inference(demos, model.cfg.max_demos)
    bounds = aug.bounding_dims([x_infer, *(g for p in ctx for g in (p.input, p.output))])
    views = aug.enumerate_views(n_views, seed, bounds, model.cfg.canvas, align)
    C = model.cfg.canvas
    dtype = model_dtype(model)
    table = VoteTable()
    for start in range(0, len(views), batch_size):
        chunk = views[start : start + batch_size]
        q = np.stack([aug.apply(x_infer, v) for v in chunk])
        dx = np.stack([np.stack([aug.apply(p.input, v) for p in ctx]) for v in chunk])
        dy = np.stack([np.stack([aug.apply(p.output, v) for p in ctx]) for v in chunk])
        idx = None if task_index is None else torch.full((len(chunk),), task_index, dtype=torch.long)
        out = model(torch.from_numpy(q), torch.from_numpy(dx), torch.from_numpy(dy), idx)
        logits = out.logits.cpu().numpy().reshape(len(chunk), C, C, -1)
        for lg, v in zip(logits, chunk):
            table.add(aug.decode_logits(lg, v))
    return table


# --- evaluation ------------------------------------------------------------


@dataclass
class TaskResult:
    seed: int
    task_id: str
    solved: bool
    top2: list[tuple[Grid | None, Grid | None]]
    margin: int
    ttt_epochs: int | None = None
    ttt_accuracy: list[float] = field(default_factory=list)  # per-epoch batch exact-match rate


@dataclass
class EvalReport:
    rows: list[TaskResult]
    seeds: list[int]
    strategy: str
    n_views: int

    @property
    def per_seed(self) -> dict[int, float]:
        out = {}
        for s in self.seeds:
            rs = [r.solved for r in self.rows if r.seed == s]
            out[s] = float(np.mean(rs)) if rs else float("nan")
        return out

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values())))

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows_path, seeds_path, summary_path = out / "report.csv", out / "per_seed.csv", out / "summary.txt"
        with open(rows_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "task_id", "solved", "margin", "ttt_epochs", "top1", "top2"])
            for r in self.rows:
                first, second = r.top2[0] if r.top2 else (None, None)
                w.writerow([r.seed, r.task_id, int(r.solved), r.margin, r.ttt_epochs, _grid_str(first), _grid_str(second)])
        with open(seeds_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "pass_at_2"])
            for s, v in self.per_seed.items():
                w.writerow([s, f"{v:.6f}"])
        n_tasks = len({r.task_id for r in self.rows})
        lines = [
            f"strategy: {self.strategy}",
            f"views: {self.n_views}",
            f"tasks: {n_tasks}",
            *(f"seed {s}: pass@2 = {v:.4f}" for s, v in self.per_seed.items()),
            f"mean pass@2 = {self.mean:.4f}",
        ]
        summary_path.write_text("\n".join(lines) + "\n")
        return [rows_path, seeds_path, summary_path]


def _grid_str(g: Grid | None) -> str:
    return "" if g is None else json.dumps(g.to_rows(), separators=(",", ":"))


def solve_task(
    model: RoleSeparatedTransformer,
    task: Task,
    n_views: int,
    seed: int,
    strategy: TTTStrategy | None = None,
    cfg: TrainConfig = TrainConfig(),
    task_index: int | None = None,
    ttt_epochs: int | None = None,
) -> TaskResult:
    """TTT (optional) plus voting on every inference input of ``task``.

    The task counts as solved when every inference input is matched by one of
    its two retained candidates.
    """
    if any(p.output is None for p in task.infer):
        raise MissingGroundTruth(task.task_id)
    answers = [p.output for p in task.infer]
    public = task.without_answers()
    epochs, accs = None, []
    if strategy is not None:
        res = ttt_adapt(model, public, strategy, seed, cfg, epochs=ttt_epochs)
        m, epochs, task_index = res.model, res.epochs_run, None
        accs = [h["accuracy"] for h in res.history]
    elif task_index is None:
        m = copy.deepcopy(model)
        m.reset_ttt_token()
    else:
        m = model
    solved, top2, margin = True, [], None
    for k, (pair, truth) in enumerate(zip(public.infer, answers)):
        votes = predict_votes(m, pair.input, public.demos, n_views, seed * 1000 + k, task_index, cfg.align)
        ranked = votes.ranked()
        if not ranked:
            solved = False
            top2.append((None, None))
            margin = 0
            continue
        first, second = pass_at_2(votes)
        top2.append((first, second))
        hit = grid_equal(first, truth) or (second is not None and grid_equal(second, truth))
        solved = solved and hit
        pair_margin = ranked[0][1] - (ranked[1][1] if len(ranked) > 1 else 0)
        margin = pair_margin if margin is None else min(margin, pair_margin)
    return TaskResult(seed, task.task_id, solved, top2, margin or 0, epochs, accs)


def _solve_job(args: tuple) -> TaskResult:
    torch.set_num_threads(1)
    return solve_task(*args)


def evaluate(
    model: RoleSeparatedTransformer,
    tasks: Sequence[Task],
    strategy: TTTStrategy | None,
    n_views: int,
    seeds: Iterable[int],
    cfg: TrainConfig = TrainConfig(),
    task_indices: Sequence[int] | None = None,
    ttt_epochs: int | None = None,
    workers: int = 1,
) -> EvalReport:
    """pass@2 over ``tasks`` for each seed.

    ``task_indices`` evaluates tasks seen in offline training with their
    learned task tokens (no TTT); otherwise a fresh token is used.
    """
    seeds = list(seeds)
    if not tasks:
        raise InferError("no tasks to evaluate: pass@2 is undefined")
    if not seeds:
        raise InferError("at least one seed is required")
    for t in tasks:
        if any(p.output is None for p in t.infer):
            raise MissingGroundTruth(t.task_id)
    jobs = [
        (model, t, n_views, s, strategy, cfg, None if task_indices is None else task_indices[i], ttt_epochs)
        for s in seeds
        for i, t in enumerate(tasks)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_solve_job, jobs))
    else:
        rows = [solve_task(*j) for j in jobs]
    name = "none" if strategy is None else strategy.kind.value
    return EvalReport(rows, seeds, name, n_views)


# --- attention export ----------------------------------------------------------


@dataclass
class AttentionMap:
    layer: int
    kind: str  # "dense" | "structured"
    query: int  # workspace token index
    row: np.ndarray  # raw weights over all S tokens, head-averaged
    image: np.ndarray  # rendered map in [0, 1] (before upsampling)
    path: Path | None = None


def scale2_view(model: RoleSeparatedTransformer, grids: Sequence[Grid]) -> aug.AugParams:
    """Identity rotation, scale 2, patch-aligned: one grid cell per patch."""
    C, p = model.cfg.canvas, model.cfg.patch
    view = aug.AugParams(0, p, p, 2, C, 0)
    dims = aug.bounding_dims(list(grids))
    if not view.fits(dims):
        raise GridTooLargeForScale2(f"{dims[0]}x{dims[1]} grid does not fit canvas {C} at scale 2")
    return view


def render_row(row: np.ndarray, n_controller: int, grid_side: int) -> np.ndarray:
    """Workspace lattice on the left, a one-column controller strip on the right."""
    peak = row.max()
    norm = row / peak if peak > 0 else row
    G, P = grid_side, n_controller
    img = np.zeros((max(G, P), G + 2))
    img[:G, :G] = norm[P:].reshape(G, G)
    img[:P, G + 1] = norm[:P]
    return np.rint(img * 255.0) / 255.0


@torch.no_grad()
def export_attention(
    model: RoleSeparatedTransformer,
    task: Task,
    layer_range: tuple[int, int] | None = None,
    out_dir: str | Path | None = None,
    query_tokens: Sequence[int] | None = None,
    infer_index: int = 0,
    upscale: int = 8,
    task_index: int | None = None,
) -> list[AttentionMap]:
    """Per-layer, per-pass attention maps of selected workspace query tokens.

    Layers are numbered by effective depth (``step * depth + block``);
    ``layer_range`` is inclusive. Images are written as
    ``{task}_{layer}_{pass}_q{token}.pgm`` plus ``manifest.json``.
    """
    model.eval()
    x = task.infer[infer_index].input
    ctx = context_for_inference(task.demos, model.cfg.max_demos)
    view = scale2_view(model, [x, *(g for p in ctx for g in (p.input, p.output))])
    s = make_sample(Pair(x, x), ctx, view)
    batch = collate([s], model_dtype(model))
    idx = None if task_index is None else torch.tensor([task_index])
    out = model(batch["query"], batch["demo_x"], batch["demo_y"], idx, record_attention=True)
    P = len(ctx) + 1
    G = model.cfg.grid_side
    if query_tokens is None:
        r, c = x.height // 2, x.width // 2
        query_tokens = [(view.translate_y // model.cfg.patch + r) * G + view.translate_x // model.cfg.patch + c]
    lo, hi = layer_range if layer_range is not None else (0, model.cfg.depth * model.cfg.recur_steps - 1)
    dest = None if out_dir is None else Path(out_dir)
    if dest is not None:
        dest.mkdir(parents=True, exist_ok=True)
    maps: list[AttentionMap] = []
    for rec in out.attention or []:
        layer = rec["step"] * model.cfg.depth + rec["layer"]
        if not lo <= layer <= hi:
            continue
        w = rec["weights"][0].mean(dim=0).to(torch.float64).numpy()  # [S, S]
        for q in query_tokens:
            row = w[P + q]
            am = AttentionMap(layer, rec["pass"], q, row, render_row(row, P, G))
            if dest is not None:
                am.path = dest / f"{task.task_id}_{layer}_{rec['pass']}_q{q}.pgm"
                aug.write_pgm(am.path, np.kron(am.image, np.ones((upscale, upscale))))
            maps.append(am)
    if dest is not None:
        manifest = {
            "task": task.task_id,
            "variant": model.variant,
            "n_controller": P,
            "grid_side": G,
            "view": view.to_record(),
            "files": [
                {"layer": m.layer, "pass": m.kind, "query": m.query, "file": m.path.name} for m in maps
            ],
        }
        (dest / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return maps


def support_within_mask(am: AttentionMap, variant: str, n_controller: int, grid_side: int) -> bool:
    """Nonzero rendered pixels of a structured map lie inside the allow-set."""
    allow = build_mask(variant, n_controller, grid_side).allow[n_controller + am.query]
    G, P = grid_side, n_controller
    work = am.image[:G, :G].ravel() > 0
    ctrl = am.image[:P, G + 1] > 0
    return bool(np.all(allow[P:][work]) and np.all(allow[:P][ctrl]))
