"""Canvas embedding of grids and the invertible rotation/scale/translation family.

Placement convention: the grid is rotated counter-clockwise by
``rotation * 90`` degrees (``np.rot90``), each cell is replicated into a
``scale x scale`` block, and the block's top-left cell lands at canvas
position ``(translate_y, translate_x)``. A one-cell BORDER ring surrounds the
placed block; every other cell is BACKGROUND.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .arcdata import N_COLORS, Grid

BACKGROUND = 10
BORDER = 11
N_SYMBOLS = 12  # input vocabulary
N_CLASSES = 11  # output vocabulary: colors + BACKGROUND
SCALES = (1, 2, 3)


class AugmentError(ValueError):
    pass


class CanvasTooSmall(AugmentError):
    pass


class InvalidParams(AugmentError):
    pass


class DimensionMismatch(AugmentError):
    pass


@dataclass(frozen=True)
class AugParams:
    rotation: int  # quarter turns, 0..3
    translate_x: int
    translate_y: int
    scale: int
    canvas: int = 64
    seed_tag: int = 0

    def placed_dims(self, dims: tuple[int, int]) -> tuple[int, int]:
        h, w = dims
        if self.rotation % 2:
            h, w = w, h
        return h * self.scale, w * self.scale

    def fits(self, dims: tuple[int, int]) -> bool:
        ph, pw = self.placed_dims(dims)
        return (
            self.rotation in (0, 1, 2, 3)
            and self.scale in SCALES
            and self.translate_y >= 1
            and self.translate_x >= 1
            and self.translate_y + ph + 1 <= self.canvas
            and self.translate_x + pw + 1 <= self.canvas
        )

    def to_record(self) -> dict:
        return asdict(self)


def _as_dims(g: Grid | tuple[int, int]) -> tuple[int, int]:
    return g.dims if isinstance(g, Grid) else (int(g[0]), int(g[1]))


def bounding_dims(grids: Sequence[Grid | tuple[int, int]]) -> tuple[int, int]:
    dims = [_as_dims(g) for g in grids]
    return max(d[0] for d in dims), max(d[1] for d in dims)


def _offsets(extent: int, canvas: int, align: int) -> range:
    # first grid cell at o >= 1, last border cell at o + extent <= canvas - 1
    first = align if align > 1 else 1
    return range(first, canvas - extent, align)


def feasible_set(
    grid: Grid | tuple[int, int], canvas_size: int, align: int = 2
) -> list[tuple[int, int, int, int]]:
    """All ``(rotation, scale, ty, tx)`` placements valid for ``grid`` dims."""
    h, w = _as_dims(grid)
    out = []
    for rot in range(4):
        rh, rw = (w, h) if rot % 2 else (h, w)
        for s in SCALES:
            for ty in _offsets(s * rh, canvas_size, align):
                for tx in _offsets(s * rw, canvas_size, align):
                    out.append((rot, s, ty, tx))
    return out


def _check_canvas_size(dims: tuple[int, int], canvas_size: int) -> None:
    if canvas_size < max(dims) + 2:
        raise CanvasTooSmall(f"canvas {canvas_size} cannot hold a {dims[0]}x{dims[1]} grid with border")


def sample_aug(
    rng_seed: int | np.random.Generator,
    grid: Grid | tuple[int, int],
    canvas_size: int = 64,
    align: int = 2,
) -> AugParams:
    """Draw uniformly from the feasible placements of ``grid``.

    ``grid`` may be a bounding ``(H, W)`` so that one draw fits every grid of a
    task (inputs and outputs share the placement).
    """
    dims = _as_dims(grid)
    _check_canvas_size(dims, canvas_size)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h, w = dims
    # counts per (rotation, scale) let us draw uniformly without materializing the set
    blocks = []
    for rot in range(4):
        rh, rw = (w, h) if rot % 2 else (h, w)
        for s in SCALES:
            ny = len(_offsets(s * rh, canvas_size, align))
            nx = len(_offsets(s * rw, canvas_size, align))
            if ny and nx:
                blocks.append((rot, s, ny, nx))
    if not blocks:
        raise CanvasTooSmall(f"no aligned placement for {dims} on canvas {canvas_size}")
    sizes = np.array([b[2] * b[3] for b in blocks])
    k = int(rng.integers(sizes.sum()))
    i = int(np.searchsorted(np.cumsum(sizes), k, side="right"))
    rot, s, ny, nx = blocks[i]
    k -= int(sizes[:i].sum())
    rh, rw = (w, h) if rot % 2 else (h, w)
    ty = _offsets(s * rh, canvas_size, align)[k // nx]
    tx = _offsets(s * rw, canvas_size, align)[k % nx]
    tag = int(rng.integers(2**31))
    return AugParams(rot, tx, ty, s, canvas_size, tag)


def identity_params(grid: Grid | tuple[int, int], canvas_size: int = 64, align: int = 2) -> AugParams:
    dims = _as_dims(grid)
    _check_canvas_size(dims, canvas_size)
    o = align if align > 1 else 1
    p = AugParams(0, o, o, 1, canvas_size, 0)
    if not p.fits(dims):
        raise CanvasTooSmall(f"no aligned identity placement for {dims} on canvas {canvas_size}")
    return p


def enumerate_views(
    n_views: int, rng_seed: int, grid: Grid | tuple[int, int], canvas_size: int = 64, align: int = 2
) -> list[AugParams]:
    """Identity view first, then ``n_views - 1`` uniform draws."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(rng_seed)
    views = [identity_params(grid, canvas_size, align)]
    views += [sample_aug(rng, grid, canvas_size, align) for _ in range(n_views - 1)]
    return views


def apply(grid: Grid | np.ndarray, p: AugParams) -> np.ndarray:
    a = grid.to_array() if isinstance(grid, Grid) else np.asarray(grid)
    if not p.fits(a.shape):
        raise InvalidParams(f"{p} does not fit a {a.shape[0]}x{a.shape[1]} grid")
    r = np.rot90(a, p.rotation)
    r = np.repeat(np.repeat(r, p.scale, axis=0), p.scale, axis=1)
    ph, pw = r.shape
    ty, tx = p.translate_y, p.translate_x
    canvas = np.full((p.canvas, p.canvas), BACKGROUND, dtype=np.int64)
    canvas[ty - 1 : ty + ph + 1, tx - 1 : tx + pw + 1] = BORDER
    canvas[ty : ty + ph, tx : tx + pw] = r
    return canvas


def check_canvas(canvas: np.ndarray, grid_dims: tuple[int, int], p: AugParams) -> None:
    """Structural validation of an ``apply`` result; raises InvalidParams."""
    if canvas.shape != (p.canvas, p.canvas):
        raise InvalidParams(f"canvas shape {canvas.shape}")
    ph, pw = p.placed_dims(grid_dims)
    ty, tx = p.translate_y, p.translate_x
    ring = np.zeros_like(canvas, dtype=bool)
    ring[ty - 1 : ty + ph + 1, tx - 1 : tx + pw + 1] = True
    inner = np.zeros_like(ring)
    inner[ty : ty + ph, tx : tx + pw] = True
    ring &= ~inner
    if not np.all(canvas[ring] == BORDER):
        raise InvalidParams("border ring incomplete")
    if not np.all(canvas[inner] < N_COLORS):
        raise InvalidParams("non-color symbol inside the grid region")
    if not np.all(canvas[~(ring | inner)] == BACKGROUND):
        raise InvalidParams("stray symbol outside the bordered region")


def invert(canvas_pred: np.ndarray, p: AugParams, out_dims: tuple[int, int]) -> np.ndarray:
    """Map a canvas prediction back to an ``out_dims`` grid.

    ``canvas_pred`` is either a ``(canvas, canvas)`` symbol map (hard mode:
    majority vote per scale block, ties to the lowest symbol) or a
    ``(canvas, canvas, K)`` logit map (block logits are summed).
    """
    pred = np.asarray(canvas_pred)
    if pred.shape[:2] != (p.canvas, p.canvas) or pred.ndim not in (2, 3):
        raise DimensionMismatch(f"prediction shape {pred.shape} vs canvas {p.canvas}")
    if not p.fits(out_dims):
        raise DimensionMismatch(f"{out_dims} does not fit {p}")
    ph, pw = p.placed_dims(out_dims)
    s = p.scale
    region = pred[p.translate_y : p.translate_y + ph, p.translate_x : p.translate_x + pw]
    bh, bw = ph // s, pw // s
    if pred.ndim == 3:
        pooled = region.reshape(bh, s, bw, s, -1).sum(axis=(1, 3))
    else:
        blocks = region.reshape(bh, s, bw, s).transpose(0, 2, 1, 3).reshape(bh, bw, s * s)
        n_sym = int(max(pred.max(), N_SYMBOLS - 1)) + 1
        counts = (blocks[..., None] == np.arange(n_sym)).sum(axis=2)
        pooled = counts.argmax(axis=-1)  # first max -> lowest symbol
    return np.rot90(pooled, -p.rotation).copy()


def decoded_dims(symbols: np.ndarray, p: AugParams) -> tuple[int, int] | None:
    """Infer original output dims from a hard canvas prediction.

    Scans right and down from the placement anchor until the first
    non-color cell. Returns ``None`` when the extent is empty, not a multiple
    of the scale, or too large.
    """
    ty, tx, s = p.translate_y, p.translate_x, p.scale
    row = symbols[ty, tx:]
    col = symbols[ty:, tx]
    pw = int(np.argmax(row >= N_COLORS)) if np.any(row >= N_COLORS) else row.size
    ph = int(np.argmax(col >= N_COLORS)) if np.any(col >= N_COLORS) else col.size
    if ph == 0 or pw == 0 or ph % s or pw % s:
        return None
    h, w = ph // s, pw // s
    if p.rotation % 2:
        h, w = w, h
    if max(h, w) > 30 or not p.fits((h, w)):
        return None
    return h, w


def decode_logits(logits: np.ndarray, p: AugParams) -> Grid | None:
    """Canvas logits ``(C, C, N_CLASSES)`` -> grid, or None if undecodable.

    Dims come from the hard prediction; cell colors from block-summed logits,
    argmax over the ten colors only.
    """
    logits = np.asarray(logits)
    dims = decoded_dims(logits.argmax(axis=-1), p)
    if dims is None:
        return None
    pooled = invert(logits, p, dims)
    return Grid.from_array(pooled[..., :N_COLORS].argmax(axis=-1))


def target_classes(canvas: np.ndarray) -> np.ndarray:
    """Output-vocabulary targets for an ``apply`` canvas (BORDER -> BACKGROUND)."""
    t = canvas.copy()
    t[t == BORDER] = BACKGROUND
    return t


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM; ``img`` in [0, 1]."""
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + a.tobytes())


def canvas_to_pgm(path: str | Path, canvas: np.ndarray, upscale: int = 4) -> None:
    """Debug dump: symbols mapped onto evenly spaced gray levels."""
    img = np.asarray(canvas, dtype=np.float64) / (N_SYMBOLS - 1)
    write_pgm(path, np.kron(img, np.ones((upscale, upscale))))
