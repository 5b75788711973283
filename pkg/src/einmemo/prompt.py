"""Learnable border prompt added to the in-context pair in pixel space."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .canvas import CanvasSpec

VARIANTS = ("I", "L", "IL", "Q", "IQ")

# quadrants each variant perturbs; IL uses one frame spanning tl+tr
_TARGETS = {
    "I": ("tl",),
    "L": ("tr",),
    "Q": ("bl",),
    "IQ": ("tl", "bl"),
    "IL": ("tl",),
}

_MAGIC = b"EINMEMOP"


class CheckpointError(ValueError):
    pass


def param_count(pad: int, region_h: int, region_w: int, channels: int = 3) -> int:
    """Number of pixels in a ``pad``-thick frame of a region, times channels."""
    if pad < 0 or 2 * pad >= min(region_h, region_w):
        raise ValueError(f"pad {pad} does not fit a {region_h}x{region_w} region")
    return channels * (2 * pad * (region_h + region_w) - 4 * pad * pad)


@dataclass(frozen=True)
class PromptGeometry:
    region_h: int
    region_w: int
    pad: int = 15
    channels: int = 3

    def __post_init__(self):
        if self.pad < 1:
            raise ValueError("pad must be at least 1")
        param_count(self.pad, self.region_h, self.region_w, self.channels)

    @property
    def n_params(self) -> int:
        return param_count(self.pad, self.region_h, self.region_w, self.channels)

    @classmethod
    def for_variant(cls, variant: str, spec: CanvasSpec = CanvasSpec(), pad: int = 15) -> "PromptGeometry":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        qh, qw = spec.quadrant
        if variant == "IL":
            return cls(qh, 2 * qw, pad)
        return cls(qh, qw, pad)


class BorderPrompt(nn.Module):
    """Frame of trainable pixels, stored as four packed edge strips.

    Packing order: top strip ``(C, pad, W)``, bottom strip ``(C, pad, W)``,
    left strip ``(C, H - 2 pad, pad)``, right strip ``(C, H - 2 pad, pad)``.
    """

    def __init__(
        self,
        geometry: PromptGeometry,
        values: torch.Tensor | None = None,
        delta: float = 1.0,
        variant: str = "IL",
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.geometry = geometry
        self.variant = variant
        self.delta = float(delta)
        if values is None:
            values = torch.zeros(geometry.n_params)
        values = torch.as_tensor(values).flatten()
        if values.numel() != geometry.n_params:
            raise ValueError(f"expected {geometry.n_params} values, got {values.numel()}")
        self.values = nn.Parameter(values.clone())

    def extra_repr(self) -> str:
        g = self.geometry
        return f"region={g.region_h}x{g.region_w}, pad={g.pad}, variant={self.variant}, delta={self.delta}"

    def strips(self):
        g = self.geometry
        c, h, w, p = g.channels, g.region_h, g.region_w, g.pad
        sizes = [c * p * w, c * p * w, c * (h - 2 * p) * p, c * (h - 2 * p) * p]
        top, bottom, left, right = torch.split(self.values, sizes)
        return (
            top.view(c, p, w),
            bottom.view(c, p, w),
            left.view(c, h - 2 * p, p),
            right.view(c, h - 2 * p, p),
        )

    def materialize(self) -> torch.Tensor:
        """Full ``(C, H, W)`` region; zero everywhere inside the frame."""
        g = self.geometry
        top, bottom, left, right = self.strips()
        interior = self.values.new_zeros(g.channels, g.region_h - 2 * g.pad, g.region_w - 2 * g.pad)
        middle = torch.cat([left, interior, right], dim=2)
        return torch.cat([top, middle, bottom], dim=1)

    def position_of(self, k: int) -> tuple[int, int, int]:
        """Region coordinates ``(channel, row, col)`` of packed parameter ``k``."""
        g = self.geometry
        c, h, w, p = g.channels, g.region_h, g.region_w, g.pad
        idx = torch.zeros(g.n_params, dtype=torch.float64)
        idx[k] = 1.0
        probe = BorderPrompt(g, idx, 1.0, self.variant).materialize()
        ch, r, col = (probe == 1).nonzero()[0].tolist()
        return ch, r, col

    def canvas_delta(self, spec: CanvasSpec = CanvasSpec()) -> torch.Tensor:
        """Additive ``delta * t`` laid out on a full canvas."""
        region = self.materialize()
        g = self.geometry
        expected = PromptGeometry.for_variant(self.variant, spec, g.pad)
        if (g.region_h, g.region_w) != (expected.region_h, expected.region_w):
            raise ValueError(
                f"prompt region {g.region_h}x{g.region_w} does not fit variant "
                f"{self.variant} on a {spec.canvas_h}x{spec.canvas_w} canvas"
            )
        out = None
        for cell in _TARGETS[self.variant]:
            r0, _, c0, _ = spec.quadrant_rect(cell)
            placed = F.pad(
                region,
                (c0, spec.canvas_w - c0 - g.region_w, r0, spec.canvas_h - r0 - g.region_h),
            )
            out = placed if out is None else out + placed
        return self.delta * out

    def apply_canvas(self, pixels: torch.Tensor, spec: CanvasSpec = CanvasSpec()) -> torch.Tensor:
        """Add the prompt to canvas pixels of shape ``(..., 3, H, W)``; no clamping."""
        return pixels + self.canvas_delta(spec).to(pixels.dtype)

    def digest(self) -> str:
        return hashlib.sha256(self.values.detach().cpu().float().numpy().tobytes()).hexdigest()


def init_prompt(
    geometry: PromptGeometry,
    mode: str = "zeros",
    seed: int = 0,
    delta: float = 1.0,
    variant: str = "IL",
    std: float = 0.02,
) -> BorderPrompt:
    if mode == "zeros":
        values = torch.zeros(geometry.n_params)
    elif mode == "gaussian":
        gen = torch.Generator().manual_seed(seed)
        values = torch.randn(geometry.n_params, generator=gen) * std
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return BorderPrompt(geometry, values, delta, variant)


def materialize(p: BorderPrompt) -> torch.Tensor:
    return p.materialize()


def apply(pair_image, pair_label, query, p: BorderPrompt, spec: CanvasSpec | None = None):
    """Perturb the images the prompt's variant targets; others pass through untouched.

    Each cell receives the part of the canvas-level prompt that overlaps it,
    so ``compose(apply(...))`` and ``apply_canvas(compose(...))`` agree on
    every cell pixel.
    """
    if spec is None:
        qh, qw = p.geometry.region_h, p.geometry.region_w
        if p.variant == "IL":
            qw //= 2
        spec = CanvasSpec(qh - 1, qw - 1)
    delta = p.canvas_delta(spec)
    touched = {"I": ("tl",), "L": ("tr",), "Q": ("bl",), "IQ": ("tl", "bl"), "IL": ("tl", "tr")}[
        p.variant
    ]
    out = []
    for cell, img in zip(("tl", "tr", "bl"), (pair_image, pair_label, query)):
        r0, r1, c0, c1 = spec.cell_rect(cell)
        if tuple(np.shape(img))[-2:] != (r1 - r0, c1 - c0):
            raise ValueError(f"{cell} image shape {tuple(np.shape(img))} does not match the prompt geometry")
        if cell in touched:
            t = torch.as_tensor(img)
            out.append(t + delta[:, r0:r1, c0:c1].to(t.dtype))
        else:
            out.append(img)
    return tuple(out)


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(p: BorderPrompt, path: str | Path, metadata: dict | None = None) -> None:
    """Geometry, variant, delta and metadata as JSON, then raw float32 parameters."""
    header = {
        "geometry": asdict(p.geometry),
        "variant": p.variant,
        "delta": p.delta,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = p.values.detach().cpu().numpy().astype("<f4").tobytes()
    blob = _MAGIC + struct.pack("<I", len(head)) + head + body
    Path(path).write_bytes(blob + hashlib.sha256(blob).digest())


def load_checkpoint(path: str | Path) -> tuple[BorderPrompt, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC) or len(data) < len(_MAGIC) + 4 + 32:
        raise CheckpointError(f"{path} is not a prompt checkpoint")
    blob, digest = data[:-32], data[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path} failed its integrity check")
    (head_len,) = struct.unpack_from("<I", blob, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(blob[start : start + head_len])
    geometry = PromptGeometry(**header["geometry"])
    values = np.frombuffer(blob[start + head_len :], dtype="<f4")
    if values.size != geometry.n_params:
        raise CheckpointError(f"{path}: parameter block has {values.size} values, expected {geometry.n_params}")
    prompt = BorderPrompt(geometry, torch.from_numpy(values.copy()), header["delta"], header["variant"])
    return prompt, header["metadata"]
