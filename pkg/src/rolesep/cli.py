"""Command-line entry point: ``rolesep {train,eval,viz,synth}``.

A JSON config file (``--config``) supplies defaults; explicit flags override
it. The fully resolved config is written to the run directory before any
work starts. Exit codes: 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Any, Sequence

import torch

from . import __version__
from .arcdata import ArcDataError, FamilyKind, SynthFamily, Task, load_tasks, save_task, synth_task
from .experiments import SuiteConfig, heldout_suite, recolor_task, training_suite
from .infer import GridTooLargeForScale2, evaluate, export_attention
from .model import ModelConfig, ModelError, RoleSeparatedTransformer, load_model, save_model
from .numerics import CheckpointError, NonFiniteGradient
from .recurrence import NonFiniteState
from .train import (
    LossConfig,
    NonFiniteLoss,
    TrainConfig,
    TrainError,
    TTT3Weights,
    TTTStrategy,
    VariantMismatch,
    staged_c_to_d,
    train_offline,
)

log = logging.getLogger("rolesep")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SYNTHETIC_SETS = ("recolor", "suite", "heldout")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# --- config resolution -------------------------------------------------------------


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def model_config(values: dict) -> ModelConfig:
    return _build(ModelConfig, dict(values), "model")


def train_config(values: dict) -> TrainConfig:
    v = dict(values)
    if "betas" in v:
        v["betas"] = tuple(v["betas"])
    loss = dict(v.pop("loss", {}) or {})
    if loss.get("ttt3") is not None:
        loss["ttt3"] = _build(TTT3Weights, loss["ttt3"], "loss.ttt3")
    v["loss"] = _build(LossConfig, loss, "loss")
    return _build(TrainConfig, v, "train")


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def _override(cfg: dict, key: str, value: Any) -> None:
    if value is not None:
        cfg[key] = value


def parse_layers(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        lo, _, hi = text.partition("..")
        a, b = int(lo), int(hi or lo)
    except ValueError as e:
        raise ConfigError(f"--layers expects a..b, got {text!r}") from e
    if a < 0 or b < a:
        raise ConfigError(f"bad layer range {text!r}")
    return a, b


def write_resolved(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# --- data -------------------------------------------------------------------------


def resolve_tasks(data: str | None, synthetic: str | None) -> list[Task]:
    if (data is None) == (synthetic is None):
        raise ConfigError("give exactly one of --data or --synthetic")
    if synthetic is not None:
        if synthetic == "recolor":
            return [recolor_task()]
        if synthetic == "suite":
            return training_suite(SuiteConfig())
        if synthetic == "heldout":
            return heldout_suite()
        raise ConfigError(f"--synthetic must be one of {SYNTHETIC_SETS}")
    p = Path(data)
    if not p.exists():
        raise DataError(f"data path does not exist: {data}")
    tasks = load_tasks(p)
    if not tasks:
        raise DataError(f"no *.json tasks under {data}")
    return tasks


def _load_checkpoint(path: str) -> tuple[RoleSeparatedTransformer, dict]:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    return load_model(path)


# --- commands -----------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = read_config(args.config)
    cfg: dict[str, Any] = {
        "data": file_cfg.get("data"),
        "synthetic": file_cfg.get("synthetic"),
        "steps": file_cfg.get("steps", 500),
        "stage2_steps": file_cfg.get("stage2_steps"),
        "seed": file_cfg.get("seed", 0),
        "dtype": file_cfg.get("dtype", "float32"),
        "model": dict(file_cfg.get("model", {})),
        "train": dict(file_cfg.get("train", {})),
    }
    for key in ("data", "synthetic", "steps", "stage2_steps", "seed", "dtype"):
        _override(cfg, key, getattr(args, key))
    m = cfg["model"]
    _override(m, "variant", args.variant)
    _override(m, "embed_dim", args.embed_dim)
    _override(m, "depth", args.depth)
    _override(m, "canvas", args.canvas)
    _override(m, "recur_steps", args.recur_steps)
    _override(cfg["train"], "lr", args.lr)
    _override(cfg["train"], "batch_size", args.batch_size)

    staged = m.get("variant") == "c-d"
    if staged:
        m["variant"] = "c"
        if cfg["stage2_steps"] is None:
            cfg["stage2_steps"] = max(1, round(0.3 * cfg["steps"]))
    cfg["schedule"] = (
        {"stage1": {"variant": "c", "steps": cfg["steps"]}, "stage2": {"variant": "d", "steps": cfg["stage2_steps"]}}
        if staged
        else {"stage1": {"variant": m.get("variant", "d"), "steps": cfg["steps"]}}
    )
    if cfg["steps"] < 0 or (cfg["stage2_steps"] or 0) < 0:
        raise ConfigError("step counts must be >= 0")

    tasks = resolve_tasks(cfg["data"], cfg["synthetic"])
    m["n_task_embeddings"] = len(tasks)
    mcfg = model_config(m)
    tcfg = train_config(cfg["train"])
    cfg["model"], cfg["train"] = mcfg.to_dict(), asdict(tcfg)
    cfg["task_ids"] = [t.task_id for t in tasks]
    out = Path(args.out)
    write_resolved(out, cfg)

    torch.manual_seed(cfg["seed"])
    model = RoleSeparatedTransformer(mcfg, seed=cfg["seed"])
    if cfg["dtype"] == "float64":
        model = model.double()
    elif cfg["dtype"] != "float32":
        raise ConfigError("dtype must be float32 or float64")
    res = train_offline(model, tasks, tcfg, cfg["steps"], cfg["seed"], log_every=args.log_every)
    history = res.history
    if staged:
        res2 = staged_c_to_d(model, tasks, tcfg, cfg["stage2_steps"], cfg["seed"] + 1)
        history += [{**row, "step": row["step"] + cfg["steps"]} for row in res2.history]
    res.history = history
    res.write_csv(out / "metrics.csv")
    save_model(out / "model.ck", model, {"task_ids": cfg["task_ids"], "seed": cfg["seed"]})
    last = history[-1] if history else {}
    print(f"trained {len(history)} steps; final batch accuracy {last.get('accuracy', float('nan')):.3f}")
    print(f"wrote {out / 'model.ck'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    file_cfg = read_config(args.config)
    cfg: dict[str, Any] = {
        "checkpoint": file_cfg.get("checkpoint"),
        "data": file_cfg.get("data"),
        "synthetic": file_cfg.get("synthetic"),
        "ttt": file_cfg.get("ttt", 0),
        "ttt_epochs": file_cfg.get("ttt_epochs"),
        "views": file_cfg.get("views", 30),
        "seeds": file_cfg.get("seeds", 1),
        "workers": file_cfg.get("workers", 1),
        "train": dict(file_cfg.get("train", {})),
    }
    for key in ("checkpoint", "data", "synthetic", "ttt", "ttt_epochs", "views", "seeds", "workers"):
        _override(cfg, key, getattr(args, key))
    if cfg["checkpoint"] is None:
        raise ConfigError("--checkpoint is required")
    if cfg["views"] < 1 or cfg["seeds"] < 1 or cfg["workers"] < 1:
        raise ConfigError("--views, --seeds and --workers must be >= 1")
    if cfg["ttt"] not in (0, 1, 2, 3):
        raise ConfigError("--ttt must be 0, 1, 2 or 3")
    tcfg = train_config(cfg["train"])
    cfg["train"] = asdict(tcfg)
    out = Path(args.out)
    write_resolved(out, cfg)

    model, meta = _load_checkpoint(cfg["checkpoint"])
    tasks = resolve_tasks(cfg["data"], cfg["synthetic"])
    strategy = None if cfg["ttt"] == 0 else TTTStrategy.named(cfg["ttt"])
    seeds = list(range(cfg["seeds"]))
    known = {tid: i for i, tid in enumerate(meta.get("task_ids", []))}
    indices = None
    if strategy is None and tasks and all(t.task_id in known for t in tasks):
        indices = [known[t.task_id] for t in tasks]  # tasks seen offline keep their learned token
    rep = evaluate(model, tasks, strategy, cfg["views"], seeds, tcfg, indices, cfg["ttt_epochs"], cfg["workers"])
    rep.write(out)
    if strategy is not None:
        with open(out / "ttt.log", "w") as fh:
            budget = cfg["ttt_epochs"] or strategy.epochs
            for r in rep.rows:
                stop = "early stop" if r.ttt_epochs < budget else "full budget"
                fh.write(f"seed {r.seed} task {r.task_id}: {r.ttt_epochs} epochs ({stop})\n")
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    cfg = {
        "checkpoint": args.checkpoint,
        "data": args.data,
        "synthetic": args.synthetic,
        "task_id": args.task_id,
        "layers": args.layers,
        "query": args.query,
        "infer_index": args.infer_index,
        "upscale": args.upscale,
    }
    layers = parse_layers(args.layers)
    out = Path(args.out)
    write_resolved(out, cfg)
    model, meta = _load_checkpoint(args.checkpoint)
    tasks = resolve_tasks(args.data, args.synthetic)
    if args.task_id is not None:
        tasks = [t for t in tasks if t.task_id == args.task_id]
        if not tasks:
            raise DataError(f"task {args.task_id!r} not found")
    task = tasks[0]
    known = meta.get("task_ids", [])
    index = known.index(task.task_id) if task.task_id in known else None
    maps = export_attention(
        model, task, layers, out, args.query, args.infer_index, args.upscale, task_index=index
    )
    print(f"wrote {len(maps)} attention maps and manifest.json to {out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.family in ("suite", "heldout"):
        tasks = training_suite(replace(SuiteConfig(), n_tasks=args.n)) if args.family == "suite" else heldout_suite(args.n, args.m, seed=args.seed)
    else:
        try:
            kind = FamilyKind(args.family)
        except ValueError as e:
            raise ConfigError(f"unknown family {args.family!r}") from e
        params: dict[str, Any] = json.loads(args.params) if args.params else {}
        fam = SynthFamily(kind, params)
        tasks = [synth_task(fam, args.seed + i, args.m, args.n_infer) for i in range(args.n)]
    for t in tasks:
        save_task(t, out / f"{t.task_id}.json")
    print(f"wrote {len(tasks)} tasks to {out}")
    return 0


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rolesep", description="Role-separated transformer for ARC-style grid tasks.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="offline training (optionally staged c -> d)")
    t.add_argument("--config")
    t.add_argument("--data", help="task JSON file or directory")
    t.add_argument("--synthetic", choices=SYNTHETIC_SETS)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--stage2-steps", "--stage2-epochs", dest="stage2_steps", type=int,
                   help="extra steps under d masks when --variant c-d")
    t.add_argument("--variant", choices=["a", "b", "c", "d", "c-d"])
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--canvas", type=int)
    t.add_argument("--recur-steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="TTT plus multi-view voting, pass@2 report")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--synthetic", choices=SYNTHETIC_SETS)
    e.add_argument("--out", required=True)
    e.add_argument("--ttt", type=int, choices=[0, 1, 2, 3])
    e.add_argument("--ttt-epochs", type=int, help="override the strategy epoch budget")
    e.add_argument("--views", type=int)
    e.add_argument("--seeds", type=int, help="number of seeds (0..k-1)")
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="export per-layer attention maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data")
    v.add_argument("--synthetic", choices=SYNTHETIC_SETS)
    v.add_argument("--task-id")
    v.add_argument("--layers", help="inclusive range a..b over effective depth")
    v.add_argument("--query", type=int, nargs="*", help="workspace token indices")
    v.add_argument("--infer-index", type=int, default=0)
    v.add_argument("--upscale", type=int, default=8)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)

    s = sub.add_parser("synth", help="write synthetic tasks as JSON")
    s.add_argument("--family", required=True, help=f"one of {[k.value for k in FamilyKind]}, suite, heldout")
    s.add_argument("--params", help="family parameters as JSON")
    s.add_argument("--n", type=int, default=1, help="number of tasks")
    s.add_argument("--m", type=int, default=3, help="demonstrations per task")
    s.add_argument("--n-infer", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelError, VariantMismatch, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainError as e:
        if isinstance(e, NonFiniteLoss):
            print(f"numeric abort: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ArcDataError, CheckpointError, GridTooLargeForScale2) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradient, NonFiniteState) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
