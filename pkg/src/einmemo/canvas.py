"""Four-cell prompt canvas: composition, cell extraction and token geometry.

Layout (111-pixel cells, 2-pixel gap)::

    rows [0, 111)   | tl: pair image   | gap | tr: pair label |
    rows 111, 112   | ------------------ gap ----------------- |
    rows [113, 224) | bl: query        | gap | br: region r   |

Each cell owns one gap pixel on its seam side, so every quadrant is
``(cell_h + 1) x (cell_w + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

CELLS = ("tl", "tr", "bl", "br")


@dataclass(frozen=True)
class CanvasSpec:
    cell_h: int = 111
    cell_w: int = 111
    gap: int = 2
    fill: float = 0.0

    def __post_init__(self):
        if self.gap != 2:
            raise ValueError("only a 2-pixel gap (1 pixel per seam side) is supported")
        if self.cell_h < 1 or self.cell_w < 1:
            raise ValueError("cells must be at least 1x1")

    @property
    def canvas_h(self) -> int:
        return 2 * (self.cell_h + 1)

    @property
    def canvas_w(self) -> int:
        return 2 * (self.cell_w + 1)

    @property
    def quadrant(self) -> tuple[int, int]:
        return self.cell_h + 1, self.cell_w + 1

    def cell_rect(self, cell: str) -> tuple[int, int, int, int]:
        """Half-open pixel rectangle ``(row0, row1, col0, col1)`` of a cell."""
        h, w = self.cell_h, self.cell_w
        top, bottom = 0, h + 2
        left, right = 0, w + 2
        rects = {
            "tl": (top, top + h, left, left + w),
            "tr": (top, top + h, right, right + w),
            "bl": (bottom, bottom + h, left, left + w),
            "br": (bottom, bottom + h, right, right + w),
        }
        try:
            return rects[cell]
        except KeyError:
            raise ValueError(f"unknown cell {cell!r}; expected one of {CELLS}") from None

    def quadrant_rect(self, cell: str) -> tuple[int, int, int, int]:
        """Cell rectangle grown by its seam-side gap pixel."""
        qh, qw = self.quadrant
        r = 0 if cell in ("tl", "tr") else qh
        c = 0 if cell in ("tl", "bl") else qw
        if cell not in CELLS:
            raise ValueError(f"unknown cell {cell!r}")
        return r, r + qh, c, c + qw

    def region_map(self) -> dict[str, tuple[int, int, int, int]]:
        return {c: self.cell_rect(c) for c in CELLS}


@dataclass(frozen=True, eq=False)
class Canvas:
    pixels: torch.Tensor  # (3, canvas_h, canvas_w)
    spec: CanvasSpec
    kind: Literal["query_canvas", "gt_canvas"]

    @property
    def region_map(self) -> dict[str, tuple[int, int, int, int]]:
        return self.spec.region_map()


def as_image(x, dtype=torch.float32) -> torch.Tensor:
    """Tensor view of a (3, H, W) image; masks (H, W) are broadcast to 3 channels."""
    t = x if torch.is_tensor(x) else torch.from_numpy(np.array(x))
    if t.ndim == 2:
        t = t.unsqueeze(0).expand(3, -1, -1)
    return t.to(dtype)


def _place(canvas: torch.Tensor, spec: CanvasSpec, cell: str, image: torch.Tensor):
    r0, r1, c0, c1 = spec.cell_rect(cell)
    if tuple(image.shape) != (3, r1 - r0, c1 - c0):
        raise ValueError(
            f"{cell} image has shape {tuple(image.shape)}, expected {(3, r1 - r0, c1 - c0)}"
        )
    canvas[:, r0:r1, c0:c1] = image


def blank_canvas(spec: CanvasSpec, dtype=torch.float32) -> torch.Tensor:
    return torch.full((3, spec.canvas_h, spec.canvas_w), spec.fill, dtype=dtype)


def compose_canvas(pair_image, pair_label, query, spec: CanvasSpec = CanvasSpec()) -> Canvas:
    """Query canvas ``[x, y, x_q, r]`` with r left at the fill value."""
    imgs = [as_image(a) for a in (pair_image, pair_label, query)]
    dtype = imgs[0].dtype
    pixels = blank_canvas(spec, dtype)
    for cell, img in zip(("tl", "tr", "bl"), imgs):
        _place(pixels, spec, cell, img.to(dtype))
    return Canvas(pixels, spec, "query_canvas")


def compose_gt_canvas(
    pair_image, pair_label, query, query_label, spec: CanvasSpec = CanvasSpec()
) -> Canvas:
    """Ground-truth canvas ``[x, y, x_q, y_q]``."""
    base = compose_canvas(pair_image, pair_label, query, spec)
    pixels = base.pixels.clone()
    _place(pixels, spec, "br", as_image(query_label).to(pixels.dtype))
    return Canvas(pixels, spec, "gt_canvas")


def extract_cell(c: Canvas | torch.Tensor, cell: str, spec: CanvasSpec | None = None) -> torch.Tensor:
    """Copy of one cell; accepts a Canvas or a raw (…, 3, H, W) pixel tensor."""
    if isinstance(c, Canvas):
        pixels, spec = c.pixels, c.spec
    else:
        pixels, spec = c, spec or CanvasSpec()
    r0, r1, c0, c1 = spec.cell_rect(cell)
    return pixels[..., r0:r1, c0:c1].clone()


def masked_token_indices(spec: CanvasSpec, token_grid_side: int) -> list[int]:
    """Row-major token positions whose patch centre lies inside the ``br`` cell."""
    if spec.canvas_h != spec.canvas_w:
        raise ValueError("square token grid requested for a non-square canvas")
    if token_grid_side < 1 or spec.canvas_h % token_grid_side:
        raise ValueError(
            f"token grid side {token_grid_side} does not divide canvas size {spec.canvas_h}"
        )
    return cell_token_indices(spec, token_grid_side, "br")


def cell_token_indices(spec: CanvasSpec, token_grid_side: int, cell: str) -> list[int]:
    patch = spec.canvas_h / token_grid_side
    r0, r1, c0, c1 = spec.cell_rect(cell)
    out = []
    for i in range(token_grid_side):
        cy = (i + 0.5) * patch
        for j in range(token_grid_side):
            cx = (j + 0.5) * patch
            if r0 <= cy < r1 and c0 <= cx < c1:
                out.append(i * token_grid_side + j)
    return out
