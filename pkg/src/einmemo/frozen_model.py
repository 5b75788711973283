"""Frozen inpainting model: interface, toy VQ inpainter and external adapter.

A frozen inpainter exposes three maps over canvases:

* token scores of the masked token predictor for every grid position,
* encoder scores of the tokenizer (negative squared distance to each code,
  so that argmax is nearest-neighbour quantisation),
* a decoder from a full token grid back to pixels in [0, 1].

The toy realisation is patch-local in its tokenizer: each 16x16 patch is
encoded and decoded independently, which makes decode/encode round trips
exact per patch.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .canvas import Canvas, CanvasSpec, masked_token_indices
from .dataset import TaskDataset, mask_to_bbox, render_bbox_mask

log = logging.getLogger(__name__)

DESCRIPTOR = "descriptor.json"


class ModelError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during optimisation."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TokenGrid:
    side: int
    tokens: torch.Tensor  # (side, side) int64

    def flat(self) -> torch.Tensor:
        return self.tokens.reshape(-1)


class FrozenInpainter(nn.Module):
    """Base class; subclasses implement the three score/decoder maps."""

    token_grid_side: int
    codebook_size: int
    canvas_size: int

    def token_logits(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S) -> (B, side*side, |V|)`` predictor scores."""
        raise NotImplementedError

    def encoder_scores(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S) -> (B, side*side, |V|)`` tokenizer scores."""
        raise NotImplementedError

    def decode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, side*side) -> (B, 3, S, S)`` pixels in [0, 1]."""
        raise NotImplementedError

    def cell_features(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError(f"{type(self).__name__} has no cell feature extractor")

    def freeze(self) -> "FrozenInpainter":
        self.eval()
        self.requires_grad_(False)
        for p in self.parameters():
            p.grad = None
        return self

    def digest(self) -> str:
        return weight_digest(self)


def weight_digest(model: nn.Module) -> str:
    """sha256 over every parameter and buffer, keyed and ordered by name."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ inference


def _batch(canvas) -> tuple[torch.Tensor, bool]:
    pixels = canvas.pixels if isinstance(canvas, Canvas) else torch.as_tensor(canvas)
    single = pixels.ndim == 3
    return (pixels[None] if single else pixels), single


def _check_size(model: FrozenInpainter, pixels: torch.Tensor):
    size = model.canvas_size
    if tuple(pixels.shape[-3:]) != (3, size, size):
        raise ModelError(
            f"canvas shape {tuple(pixels.shape[-3:])} does not match model input (3, {size}, {size})"
        )


def _positions(model: FrozenInpainter, positions) -> torch.Tensor:
    pos = torch.as_tensor(list(positions), dtype=torch.long)
    n = model.token_grid_side**2
    if pos.numel() and (pos.min() < 0 or pos.max() >= n):
        raise ModelError(f"positions outside the {model.token_grid_side}x{model.token_grid_side} grid")
    return pos


def predict_logits(model: FrozenInpainter, canvas, positions) -> torch.Tensor:
    """Predictor scores at ``positions``: ``(L, |V|)`` or ``(B, L, |V|)``."""
    pixels, single = _batch(canvas)
    _check_size(model, pixels)
    pos = _positions(model, positions)
    out = model.token_logits(pixels.to(_dtype(model)))[:, pos]
    return out[0] if single else out


def first_argmax(scores: torch.Tensor) -> torch.Tensor:
    """Argmax over the last axis, lowest index on ties."""
    best = scores.max(dim=-1, keepdim=True).values
    idx = torch.arange(scores.shape[-1], device=scores.device).expand_as(scores)
    return torch.where(scores == best, idx, scores.shape[-1]).min(dim=-1).values


@torch.no_grad()
def encode_token_ids(model: FrozenInpainter, pixels: torch.Tensor) -> torch.Tensor:
    """``(B, 3, S, S) -> (B, side*side)`` nearest-code token ids."""
    return first_argmax(model.encoder_scores(pixels.to(_dtype(model))))


def encode_tokens(model: FrozenInpainter, canvas) -> TokenGrid:
    pixels, single = _batch(canvas)
    if not single:
        raise ModelError("encode_tokens takes one canvas; use encode_token_ids for batches")
    _check_size(model, pixels)
    side = model.token_grid_side
    return TokenGrid(side, encode_token_ids(model, pixels)[0].view(side, side))


def predict_tokens(model: FrozenInpainter, canvas, positions) -> TokenGrid:
    """Predicted tokens at ``positions``; every other cell keeps its encoded token."""
    pixels, single = _batch(canvas)
    if not single:
        raise ModelError("predict_tokens takes one canvas")
    _check_size(model, pixels)
    pos = _positions(model, positions)
    with torch.no_grad():
        pred = first_argmax(predict_logits(model, pixels[0], pos))
        grid = encode_token_ids(model, pixels)[0].clone()
    grid[pos] = pred
    side = model.token_grid_side
    return TokenGrid(side, grid.view(side, side))


@torch.no_grad()
def decode(model: FrozenInpainter, tokens: TokenGrid | torch.Tensor) -> torch.Tensor:
    """Full canvas pixels for a token grid (or a ``(B, side*side)`` batch)."""
    single = isinstance(tokens, TokenGrid)
    t = tokens.flat()[None] if single else torch.as_tensor(tokens)
    t = t.reshape(t.shape[0], -1).long()
    if t.shape[1] != model.token_grid_side**2:
        raise ModelError(f"expected {model.token_grid_side**2} tokens per grid, got {t.shape[1]}")
    if t.min() < 0 or t.max() >= model.codebook_size:
        raise ModelError(f"token ids must lie in [0, {model.codebook_size})")
    out = model.decode_tokens(t).clamp(0, 1)
    return out[0] if single else out


@torch.no_grad()
def infer_region(model: FrozenInpainter, pixels: torch.Tensor, positions) -> torch.Tensor:
    """Batched inpainting: predict tokens at ``positions`` and decode full canvases."""
    _check_size(model, pixels)
    pos = _positions(model, positions)
    grid = encode_token_ids(model, pixels).clone()
    grid[:, pos] = first_argmax(model.token_logits(pixels.to(_dtype(model)))[:, pos])
    return model.decode_tokens(grid).clamp(0, 1)


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


# ------------------------------------------------------------------- toy model


@dataclass
class ToyConfig:
    canvas_size: int = 224
    patch: int = 16
    codebook_size: int = 64
    d_code: int = 16
    enc_width: int = 48
    dim: int = 96
    depth: int = 3
    heads: int = 4
    # hidden width of the predictor's two-layer patch stem; 0 = single linear patch embedding
    stem_width: int = 32
    # label renderings seen in pretraining ("mask", "invert", "bbox"); with
    # several, the pair is the only task cue
    tasks: tuple[str, ...] = ("mask",)
    vq_epochs: int = 24
    vq_steps: int = 40
    vq_batch: int = 8
    vq_lr: float = 2e-3
    commitment: float = 0.25
    # reconstruction weight on the label quadrants relative to image quadrants
    label_weight: float = 4.0
    pred_epochs: int = 20
    pred_steps: int = 40
    pred_batch: int = 16
    pred_lr: float = 1e-3
    # share of pretraining pairs that are FMLR neighbours rather than random
    retrieved_pair_rate: float = 0.5

    @property
    def grid_side(self) -> int:
        return self.canvas_size // self.patch

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        d = dict(d)
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelError(f"unknown toy config keys {sorted(unknown)}")
        return cls(**d)


class PatchTokenizer(nn.Module):
    """Patch-local convolutional VQ autoencoder."""

    def __init__(self, cfg: ToyConfig):
        super().__init__()
        w, p = cfg.enc_width, cfg.patch
        if p != 16:
            raise ModelError("the toy tokenizer is built for 16-pixel patches")
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w // 2, 4, 4),
            nn.GELU(),
            nn.Conv2d(w // 2, w, 4, 4),
            nn.GELU(),
            nn.Conv2d(w, cfg.d_code, 1),
        )
        self.codebook = nn.Parameter(torch.randn(cfg.codebook_size, cfg.d_code) * 0.1)
        self.decoder = nn.Sequential(
            nn.Conv2d(cfg.d_code, w, 1),
            nn.GELU(),
            nn.ConvTranspose2d(w, w // 2, 4, 4),
            nn.GELU(),
            nn.ConvTranspose2d(w // 2, 3, 4, 4),
        )

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S) -> (B, N, d)`` continuous latents."""
        z = self.encoder(pixels)
        return z.flatten(2).transpose(1, 2)

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        # negative squared distance, exact in the difference form
        return -((z[..., None, :] - self.codebook) ** 2).sum(-1)

    def decode(self, codes: torch.Tensor, side: int) -> torch.Tensor:
        """``(B, N, d) -> (B, 3, S, S)``."""
        b, n, d = codes.shape
        x = codes.transpose(1, 2).reshape(b, d, side, side)
        return torch.sigmoid(self.decoder(x))

    def code_roundtrip(self) -> torch.Tensor:
        """Latent of each decoded code patch, ``(|V|, d)``."""
        patches = torch.sigmoid(self.decoder(self.codebook[:, :, None, None]))
        return self.encoder(patches)[:, :, 0, 0]

    @torch.no_grad()
    def stabilize(self) -> int:
        """Make every code survive decode then encode; returns codes merged away.

        A code whose decoded patch re-encodes elsewhere is overwritten (with
        all its duplicates) by that target, so it decodes identically and
        ties resolve to the lowest id. Each round removes one distinct
        embedding, so this terminates. With a patch-local tokenizer the result
        satisfies encode(decode(encode(c))) == encode(c) for every canvas.
        """
        merged = 0
        for _ in range(len(self.codebook) + 1):
            back = first_argmax(self.scores(self.code_roundtrip()))
            same = (self.codebook[:, None] == self.codebook[None]).all(-1)
            canon = first_argmax(same.to(torch.int8))
            bad = (back != canon).nonzero().flatten()
            if len(bad) == 0:
                return merged
            v = int(bad[0])
            group = same[v].nonzero().flatten()
            self.codebook[group] = self.codebook[int(back[v])].clone()
            merged += len(group)
        raise ModelError("codebook did not stabilise")


class MaskedTokenPredictor(nn.Module):
    """Bidirectional transformer over patch embeddings with a learned mask token at r."""

    def __init__(self, cfg: ToyConfig, masked: Sequence[int]):
        super().__init__()
        n = cfg.grid_side**2
        if cfg.stem_width:
            q = cfg.patch // 4
            self.embed = nn.Sequential(
                nn.Conv2d(3, cfg.stem_width, 4, 4),
                nn.GELU(),
                nn.Conv2d(cfg.stem_width, cfg.dim, q, q),
            )
        else:
            self.embed = nn.Conv2d(3, cfg.dim, cfg.patch, cfg.patch)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos = nn.Parameter(torch.randn(n, cfg.dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            cfg.dim,
            cfg.heads,
            dim_feedforward=2 * cfg.dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.codebook_size)
        is_masked = torch.zeros(n, dtype=torch.bool)
        is_masked[list(masked)] = True
        self.register_buffer("is_masked", is_masked)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.embed(pixels).flatten(2).transpose(1, 2)
        m = self.is_masked[None, :, None]
        x = torch.where(m, self.mask_token.to(x.dtype), x) + self.pos
        return self.head(self.norm(self.blocks(x)))


class ToyInpainter(FrozenInpainter):
    def __init__(self, cfg: ToyConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ToyConfig()
        self.token_grid_side = cfg.grid_side
        self.codebook_size = cfg.codebook_size
        self.canvas_size = cfg.canvas_size
        spec = canvas_spec_for(cfg.canvas_size)
        self.masked = masked_token_indices(spec, cfg.grid_side)
        self.tokenizer = PatchTokenizer(cfg)
        self.predictor = MaskedTokenPredictor(cfg, self.masked)

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "ToyInpainter":
        return cls(ToyConfig.from_dict(descriptor.get("config", {})))

    def descriptor(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["tasks"] = list(cfg["tasks"])
        return {
            "factory": "einmemo.frozen_model:ToyInpainter.from_descriptor",
            "token_grid_side": self.token_grid_side,
            "codebook_size": self.codebook_size,
            "d_code": self.cfg.d_code,
            "canvas_size": self.canvas_size,
            "config": cfg,
        }

    def token_logits(self, pixels):
        return self.predictor(pixels)

    def encoder_scores(self, pixels):
        return self.tokenizer.scores(self.tokenizer.encode(pixels))

    def decode_tokens(self, tokens):
        return self.tokenizer.decode(self.tokenizer.codebook[tokens], self.token_grid_side)

    def cell_features(self, image):
        # pad a cell up to the patch multiple and keep the latent map
        p = self.cfg.patch
        h, w = image.shape[-2:]
        x = F.pad(image, (0, (-w) % p, 0, (-h) % p))[None].to(_dtype(self))
        return self.tokenizer.encoder(x)[0]


def canvas_spec_for(canvas_size: int) -> CanvasSpec:
    if canvas_size % 2:
        raise ModelError(f"canvas size {canvas_size} is odd")
    cell = canvas_size // 2 - 1
    return CanvasSpec(cell, cell)


# --------------------------------------------------------------- toy training


def label_for_task(mask: np.ndarray, task: str) -> np.ndarray:
    if task == "mask":
        return mask
    if task == "invert":
        return 1 - mask
    if task == "bbox":
        return render_bbox_mask(mask_to_bbox(mask), *mask.shape)
    raise ModelError(f"unknown pretraining task {task!r}")


def _canvas_batch(ds: TaskDataset, rng, spec: CanvasSpec, tasks, neighbours, rate, n):
    """Random ground-truth canvases ``(n, 3, S, S)`` for pretraining."""
    out = torch.full((n, 3, spec.canvas_h, spec.canvas_w), spec.fill)
    rects = [spec.cell_rect(c) for c in ("tl", "tr", "bl", "br")]
    for b in range(n):
        q = ds[int(rng.integers(len(ds)))]
        if neighbours is not None and rng.random() < rate:
            pair = ds.by_id(neighbours[q.id])
        else:
            pair = ds[int(rng.integers(len(ds)))]
        task = tasks[int(rng.integers(len(tasks)))]
        cells = (
            pair.image,
            np.broadcast_to(label_for_task(pair.mask, task), pair.image.shape),
            q.image,
            np.broadcast_to(label_for_task(q.mask, task), q.image.shape),
        )
        for (r0, r1, c0, c1), img in zip(rects, cells):
            out[b, :, r0:r1, c0:c1] = torch.from_numpy(np.array(img, dtype=np.float32))
    return out


def _finite(loss: torch.Tensor, stage: str, step: int, extra: dict | None = None):
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss in {stage} at step {step}",
            {"stage": stage, "step": step, "loss": float(loss), **(extra or {})},
        )


def train_toy_frozen(
    train_ds: TaskDataset,
    cfg: ToyConfig | None = None,
    seed: int = 0,
    neighbours: dict[str, str] | None = None,
    progress: bool = False,
) -> ToyInpainter:
    """Two-stage toy training: VQ tokenizer, then masked token predictor.

    ``neighbours`` maps sample id to a retrieved pair id; when given, that
    share of pretraining canvases uses it instead of a random pair.
    """
    cfg = cfg or ToyConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ToyInpainter(cfg)
    spec = canvas_spec_for(cfg.canvas_size)
    tok = model.tokenizer
    t0 = time.time()

    weight = torch.ones(1, 1, cfg.canvas_size, cfg.canvas_size)
    for cell in ("tr", "br"):
        r0, r1, c0, c1 = spec.quadrant_rect(cell)
        weight[..., r0:r1, c0:c1] = cfg.label_weight
    opt = torch.optim.Adam(tok.parameters(), lr=cfg.vq_lr)
    for epoch in range(cfg.vq_epochs):
        usage = torch.zeros(cfg.codebook_size)
        recent = None
        for step in range(cfg.vq_steps):
            x = _canvas_batch(train_ds, rng, spec, cfg.tasks, neighbours, cfg.retrieved_pair_rate, cfg.vq_batch)
            z = tok.encode(x)
            idx = first_argmax(tok.scores(z.detach()))
            q = tok.codebook[idx]
            zq = z + (q - z).detach()
            recon = tok.decode(zq, cfg.grid_side)
            loss = (
                (weight * (recon - x) ** 2).mean() / weight.mean()
                + F.mse_loss(q, z.detach())
                + cfg.commitment * F.mse_loss(z, q.detach())
            )
            _finite(loss, "vq", epoch * cfg.vq_steps + step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            usage += torch.bincount(idx.flatten(), minlength=cfg.codebook_size)
            recent = z.detach().reshape(-1, cfg.d_code)
        dead = (usage == 0).nonzero().flatten()
        if len(dead):
            pick = torch.from_numpy(rng.choice(len(recent), size=len(dead), replace=False))
            with torch.no_grad():
                tok.codebook[dead] = recent[pick]
        if progress:
            log.info("vq epoch %d loss %.5f dead %d (%.0fs)", epoch, loss.item(), len(dead), time.time() - t0)

    merged = tok.stabilize()
    if progress:
        log.info("codebook stabilised, %d codes merged", merged)
    tok.requires_grad_(False)
    pred = model.predictor
    masked = torch.tensor(model.masked)
    opt = torch.optim.Adam(pred.parameters(), lr=cfg.pred_lr)
    total = cfg.pred_epochs * cfg.pred_steps
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, total)
    for epoch in range(cfg.pred_epochs):
        running = 0.0
        for step in range(cfg.pred_steps):
            x = _canvas_batch(train_ds, rng, spec, cfg.tasks, neighbours, cfg.retrieved_pair_rate, cfg.pred_batch)
            with torch.no_grad():
                target = first_argmax(tok.scores(tok.encode(x)))[:, masked]
            logits = pred(x)[:, masked]
            loss = F.cross_entropy(logits.reshape(-1, cfg.codebook_size), target.reshape(-1))
            _finite(loss, "predictor", epoch * cfg.pred_steps + step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
        if progress:
            log.info("predictor epoch %d ce %.4f (%.0fs)", epoch, running / cfg.pred_steps, time.time() - t0)
    return model.freeze()


# ---------------------------------------------------------------- persistence


def save_model(model: FrozenInpainter, model_dir: str | Path) -> str:
    """Write descriptor, weights and digest; returns the digest."""
    out = Path(model_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = model.digest()
    desc = dict(model.descriptor())
    desc["weights"] = "weights.pt"
    desc["digest"] = digest
    (out / DESCRIPTOR).write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    torch.save(model.state_dict(), out / "weights.pt")
    (out / "digest.txt").write_text(digest + "\n")
    return digest


def _resolve(factory: str):
    mod_name, _, attr = factory.partition(":")
    if not attr:
        raise ModelError(f"factory {factory!r} must look like 'module:callable'")
    obj = importlib.import_module(mod_name)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj


REQUIRED_FIELDS = ("factory", "token_grid_side", "codebook_size", "d_code", "canvas_size", "weights")


def load_external(model_dir: str | Path) -> FrozenInpainter:
    """Wrap weights described by ``descriptor.json`` behind the inpainter interface.

    The descriptor names a ``module:callable`` factory that receives the
    descriptor dict and returns an (untrained) :class:`FrozenInpainter`; the
    weight file is then loaded into it and the result frozen.
    """
    root = Path(model_dir)
    if not root.is_dir():
        raise ModelError(f"model directory {root} does not exist")
    desc_path = root / DESCRIPTOR
    if not desc_path.is_file():
        raise ModelError(f"{root} has no {DESCRIPTOR}")
    desc = json.loads(desc_path.read_text())
    missing = [k for k in REQUIRED_FIELDS if k not in desc]
    if missing:
        raise ModelError(f"descriptor is missing {missing}")
    size, side = int(desc["canvas_size"]), int(desc["token_grid_side"])
    if side < 1 or size % side:
        raise ModelError(f"token grid side {side} does not divide canvas size {size}")
    model = _resolve(desc["factory"])(desc)
    if not isinstance(model, FrozenInpainter):
        raise ModelError("factory did not return a FrozenInpainter")
    if (model.token_grid_side, model.codebook_size, model.canvas_size) != (
        side,
        int(desc["codebook_size"]),
        size,
    ):
        raise ModelError("factory model disagrees with the descriptor geometry")
    state = torch.load(root / desc["weights"], map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ModelError(f"weights in {root} do not fit the described model: {e}") from e
    model.freeze()
    if "digest" in desc and model.digest() != desc["digest"]:
        raise ModelError(f"weight digest mismatch for {root}")
    return model
