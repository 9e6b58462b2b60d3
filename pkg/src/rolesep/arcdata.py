"""ARC grids and tasks: the data model, JSON interchange, synthetic task families."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

N_COLORS = 10
MAX_SIDE = 30


class ArcDataError(ValueError):
    pass


class MalformedJson(ArcDataError):
    pass


class GridTooLarge(ArcDataError):
    pass


class ColorOutOfRange(ArcDataError):
    pass


class RaggedRows(ArcDataError):
    pass


@dataclass(frozen=True, order=True)
class Grid:
    """Immutable H x W array of colors 0..9.

    Ordering and hashing follow ``(height, width, cells)``, so equal grids hash
    equal and sorting is the lexicographic tie-break used by the vote table.
    """

    height: int
    width: int
    cells: tuple[int, ...]

    def __post_init__(self) -> None:
        if not (1 <= self.height <= MAX_SIDE and 1 <= self.width <= MAX_SIDE):
            raise GridTooLarge(f"grid {self.height}x{self.width} outside 1..{MAX_SIDE}")
        if len(self.cells) != self.height * self.width:
            raise RaggedRows(f"{len(self.cells)} cells for a {self.height}x{self.width} grid")
        for c in self.cells:
            if not 0 <= c < N_COLORS:
                raise ColorOutOfRange(f"color {c} outside 0..{N_COLORS - 1}")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "Grid":
        if not isinstance(rows, (list, tuple)) or not rows:
            raise MalformedJson("grid must be a non-empty 2D array")
        for r in rows:
            if not isinstance(r, (list, tuple)) or not r:
                raise MalformedJson("grid rows must be non-empty arrays")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise RaggedRows("rows have different lengths")
        if len(rows) > MAX_SIDE or width > MAX_SIDE:
            raise GridTooLarge(f"grid {len(rows)}x{width} exceeds {MAX_SIDE}")
        cells = []
        for r in rows:
            for v in r:
                if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                    raise MalformedJson(f"non-integer cell {v!r}")
                cells.append(int(v))
        return cls(len(rows), width, tuple(cells))

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Grid":
        a = np.asarray(a)
        if a.ndim != 2:
            raise MalformedJson(f"expected a 2D array, got shape {a.shape}")
        return cls(int(a.shape[0]), int(a.shape[1]), tuple(int(v) for v in a.ravel()))

    def to_array(self) -> np.ndarray:
        return np.asarray(self.cells, dtype=np.int64).reshape(self.height, self.width)

    def to_rows(self) -> list[list[int]]:
        return self.to_array().tolist()

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width


def grid_equal(a: Grid, b: Grid) -> bool:
    return a.height == b.height and a.width == b.width and a.cells == b.cells


@dataclass(frozen=True)
class Pair:
    input: Grid
    output: Grid | None = None


@dataclass(frozen=True)
class Task:
    task_id: str
    demos: tuple[Pair, ...]
    infer: tuple[Pair, ...]

    def __post_init__(self) -> None:
        if len(self.demos) < 1:
            raise ArcDataError(f"task {self.task_id}: needs at least one demonstration")
        if len(self.infer) < 1:
            raise ArcDataError(f"task {self.task_id}: needs at least one inference input")
        for p in self.demos:
            if p.output is None:
                raise ArcDataError(f"task {self.task_id}: demonstration without output")

    def without_answers(self) -> "Task":
        return Task(self.task_id, self.demos, tuple(Pair(p.input) for p in self.infer))


def _pair_from_json(obj: Any, need_output: bool) -> Pair:
    if not isinstance(obj, dict) or "input" not in obj:
        raise MalformedJson("pair must be an object with an 'input' grid")
    x = Grid.from_rows(obj["input"])
    if "output" in obj and obj["output"] is not None:
        return Pair(x, Grid.from_rows(obj["output"]))
    if need_output:
        raise MalformedJson("train pair without 'output'")
    return Pair(x)


def parse_task(json_text: str, task_id: str) -> Task:
    try:
        obj = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedJson("task must be a JSON object")
    train, test = obj.get("train"), obj.get("test")
    if not isinstance(train, list) or not isinstance(test, list) or not train or not test:
        raise MalformedJson("task needs non-empty 'train' and 'test' arrays")
    demos = tuple(_pair_from_json(p, need_output=True) for p in train)
    infer = tuple(_pair_from_json(p, need_output=False) for p in test)
    return Task(task_id, demos, infer)


def task_to_json(task: Task) -> str:
    def pair(p: Pair) -> dict:
        d: dict[str, Any] = {"input": p.input.to_rows()}
        if p.output is not None:
            d["output"] = p.output.to_rows()
        return d

    return json.dumps(
        {"train": [pair(p) for p in task.demos], "test": [pair(p) for p in task.infer]},
        separators=(",", ":"),
    )


def load_tasks(path: str | Path) -> list[Task]:
    """Load one task file, or every ``*.json`` in a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
    elif path.is_file():
        files = [path]
    else:
        raise FileNotFoundError(path)
    return [parse_task(f.read_text(), f.stem) for f in files]


def save_task(task: Task, path: str | Path) -> None:
    Path(path).write_text(task_to_json(task))


# --- synthetic families -------------------------------------------------


class FamilyKind(str, enum.Enum):
    RECOLOR = "recolor"
    MIRROR_H = "mirror_h"
    MIRROR_V = "mirror_v"
    ROTATE90 = "rotate90"
    TRANSLATE = "translate"
    UPSCALE2 = "upscale2"


@dataclass(frozen=True)
class SynthFamily:
    """A deterministic grid -> grid rule.

    ``params``: Recolor takes ``{"src": int, "dst": int}``; Translate takes
    ``{"dy": int, "dx": int}`` (vacated cells become color 0). Rotate90 turns
    clockwise. MirrorH reverses row order, MirrorV reverses column order.
    Grid sides are drawn from ``params.get("sizes", (3, 5))`` inclusive.
    """

    kind: FamilyKind
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __call__(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a)
        k = self.kind
        if k is FamilyKind.RECOLOR:
            out = a.copy()
            out[a == self.params["src"]] = self.params["dst"]
            return out
        if k is FamilyKind.MIRROR_H:
            return a[::-1, :].copy()
        if k is FamilyKind.MIRROR_V:
            return a[:, ::-1].copy()
        if k is FamilyKind.ROTATE90:
            return np.rot90(a, -1).copy()
        if k is FamilyKind.TRANSLATE:
            dy, dx = self.params.get("dy", 0), self.params.get("dx", 1)
            out = np.zeros_like(a)
            h, w = a.shape
            src = a[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
            out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
            return out
        if k is FamilyKind.UPSCALE2:
            return np.kron(a, np.ones((2, 2), dtype=a.dtype))
        raise ValueError(f"unknown family {k}")

    def sample_input(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.params.get("sizes", (3, 5))
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        a = rng.integers(1, N_COLORS, size=(h, w))
        a[rng.random((h, w)) < 0.5] = 0
        if self.kind is FamilyKind.RECOLOR:
            # make sure the rule is visible in every pair
            a[rng.integers(h), rng.integers(w)] = self.params["src"]
        return a

    def describe(self) -> str:
        extra = {k: v for k, v in self.params.items() if k != "sizes"}
        return self.kind.value + ("" if not extra else "".join(f"_{k}{v}" for k, v in sorted(extra.items())))


def synth_task(family: SynthFamily, seed: int, m: int, n: int, task_id: str | None = None) -> Task:
    """Sample ``m`` demonstration and ``n`` inference pairs of ``family``.

    Inference outputs are populated; callers hide them with
    :meth:`Task.without_answers` where needed.
    """
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(m + n):
        x = family.sample_input(rng)
        pairs.append(Pair(Grid.from_array(x), Grid.from_array(family(x))))
    tid = task_id if task_id is not None else f"{family.describe()}_s{seed}"
    return Task(tid, tuple(pairs[:m]), tuple(pairs[m:]))


def family_suite(n_tasks: int, seed: int, sizes: tuple[int, int] = (3, 5)) -> list[SynthFamily]:
    """A deterministic mix of families covering every kind, with varied parameters."""
    rng = np.random.default_rng(seed)
    kinds = list(FamilyKind)
    out = []
    for i in range(n_tasks):
        kind = kinds[i % len(kinds)]
        params: dict = {"sizes": sizes}
        if kind is FamilyKind.RECOLOR:
            src, dst = rng.choice(np.arange(1, N_COLORS), size=2, replace=False)
            params.update(src=int(src), dst=int(dst))
        elif kind is FamilyKind.TRANSLATE:
            dy, dx = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1)][int(rng.integers(5))]
            params.update(dy=dy, dx=dx)
        elif kind is FamilyKind.UPSCALE2:
            params["sizes"] = (max(1, sizes[0] - 1), max(1, sizes[1] - 1))
        out.append(SynthFamily(kind, params))
    return out


def iter_grids(task: Task, include_infer_outputs: bool = False) -> Iterable[Grid]:
    for p in task.demos:
        yield p.input
        yield p.output  # type: ignore[misc]
    for p in task.infer:
        yield p.input
        if include_infer_outputs and p.output is not None:
            yield p.output
