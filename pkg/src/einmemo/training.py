"""Prompt optimisation against a frozen inpainter."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .canvas import Canvas, CanvasSpec, compose_canvas, compose_gt_canvas, masked_token_indices
from .dataset import Sample, TaskDataset
from .frozen_model import FrozenInpainter, NumericalError, canvas_spec_for, encode_token_ids
from .prompt import BorderPrompt, PromptGeometry, init_prompt, load_checkpoint, save_checkpoint
from .retrieval import FeatureExtractor, RetrievalIndex, retrieve

log = logging.getLogger(__name__)

__all__ = [
    "PromptTrainConfig",
    "TrainHistory",
    "build_training_example",
    "prompt_loss",
    "train_prompt",
    "grad_check",
    "trainable_leaves",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class PromptTrainConfig:
    epochs: int = 70
    batch_size: int = 32
    # 15 is the pixel-space rate for large external models; the toy model wants 0.1
    learning_rate: float = 0.1
    restart_period: int | None = None  # cosine restart period in epochs; None = epochs
    restart_mult: int = 1
    min_lr: float = 0.0
    delta: float = 1.0
    pad: int = 15
    variant: str = "IL"
    init: str = "zeros"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")

    @property
    def period(self) -> int:
        return self.restart_period or self.epochs


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    val_miou: list[float | None] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.loss)

    def append(self, loss, lr, seconds, val=None):
        self.loss.append(loss)
        self.lr.append(lr)
        self.seconds.append(seconds)
        self.val_miou.append(val)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr", "seconds", "val_miou"])
            for i, row in enumerate(zip(self.loss, self.lr, self.seconds, self.val_miou)):
                w.writerow([i, *("" if v is None else repr(v) for v in row)])


# ------------------------------------------------------------------ examples


def build_training_example(
    query: Sample,
    ds: TaskDataset,
    index: RetrievalIndex,
    fx: FeatureExtractor,
    prompt: BorderPrompt | None,
    spec: CanvasSpec = CanvasSpec(),
) -> tuple[Canvas, Canvas]:
    """Prompted query canvas and prompt-free ground-truth canvas for one query.

    The in-context pair is retrieved from ``ds`` without the query itself.
    """
    if len(ds) < 2:
        raise ValueError("leave-one-out retrieval needs at least 2 samples")
    pair = ds.by_id(retrieve(index, query.image, fx, exclude={query.id}))
    plain = compose_canvas(pair.image, pair.mask, query.image, spec)
    pixels = plain.pixels if prompt is None else prompt.apply_canvas(plain.pixels, spec)
    gt = compose_gt_canvas(pair.image, pair.mask, query.image, query.mask, spec)
    return Canvas(pixels, spec, "query_canvas"), gt


def stack_canvases(queries: Sequence[Sample], pairs: Sequence[Sample], spec: CanvasSpec, gt: bool = False):
    """Batch of query (or ground-truth) canvases, ``(B, 3, H, W)``."""
    rects = [spec.cell_rect(c) for c in ("tl", "tr", "bl", "br")]
    out = torch.full((len(queries), 3, spec.canvas_h, spec.canvas_w), spec.fill)
    for b, (q, p) in enumerate(zip(queries, pairs)):
        cells = [p.image, p.mask, q.image] + ([q.mask] if gt else [])
        for (r0, r1, c0, c1), img in zip(rects, cells):
            out[b, :, r0:r1, c0:c1] = torch.from_numpy(np.array(img, dtype=np.float32))
    return out


# ---------------------------------------------------------------------- loss


def prompt_loss(logits: torch.Tensor, gt_tokens: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over masked positions (and batch)."""
    logits = torch.as_tensor(logits)
    gt_tokens = torch.as_tensor(gt_tokens).long()
    if logits.shape[:-1] != gt_tokens.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match tokens {tuple(gt_tokens.shape)}")
    v = logits.shape[-1]
    if gt_tokens.numel() and (gt_tokens.min() < 0 or gt_tokens.max() >= v):
        raise ValueError(f"token ids must lie in [0, {v})")
    return F.cross_entropy(logits.reshape(-1, v), gt_tokens.reshape(-1))


def trainable_leaves(output: torch.Tensor) -> list[torch.Tensor]:
    """Every leaf tensor that would receive a gradient from ``output``."""
    seen, leaves, stack = set(), [], [output.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            leaves.append(fn.variable)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return leaves


# ------------------------------------------------------------------ training


@dataclass
class _Prepared:
    queries: list[Sample]
    pairs: list[Sample]
    targets: torch.Tensor  # (n, L)


def _prepare(ds: TaskDataset, model: FrozenInpainter, index, fx, spec, masked, batch=64) -> _Prepared:
    """Leave-one-out pairs and ground-truth tokens; both are prompt-independent."""
    queries = list(ds)
    pairs = [ds.by_id(retrieve(index, q.image, fx, exclude={q.id})) for q in queries]
    targets = []
    for i in range(0, len(queries), batch):
        gt = stack_canvases(queries[i : i + batch], pairs[i : i + batch], spec, gt=True)
        targets.append(encode_token_ids(model, gt)[:, masked])
    return _Prepared(queries, pairs, torch.cat(targets))


def train_prompt(
    ds: TaskDataset,
    model: FrozenInpainter,
    index: RetrievalIndex,
    fx: FeatureExtractor,
    cfg: PromptTrainConfig | None = None,
    spec: CanvasSpec | None = None,
    validate=None,
    run_dir: str | Path | None = None,
    save_every_epoch: bool = False,
) -> tuple[BorderPrompt, TrainHistory]:
    """Train a border prompt on ``ds`` with leave-one-out retrieval.

    ``validate`` is an optional callable ``prompt -> mIoU``; when given, the
    prompt from the best validation epoch is returned.
    """
    cfg = cfg or PromptTrainConfig()
    spec = spec or canvas_spec_for(model.canvas_size)
    if len(ds) < 2:
        raise ValueError("prompt training needs at least 2 samples")
    if cfg.deterministic:
        torch.set_num_threads(1)
    model.freeze()
    digest = model.digest()
    masked = masked_token_indices(spec, model.token_grid_side)
    prepared = _prepare(ds, model, index, fx, spec, masked)

    geometry = PromptGeometry.for_variant(cfg.variant, spec, cfg.pad)
    prompt = init_prompt(geometry, cfg.init, cfg.seed, cfg.delta, cfg.variant)
    prompt.values.data = prompt.values.data.to(_dtype(model))
    opt = torch.optim.Adam(prompt.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=cfg.period, T_mult=cfg.restart_mult, eta_min=cfg.min_lr
    )
    history = TrainHistory()
    last_good = prompt.values.detach().clone()
    best, best_score = None, -np.inf
    run_dir = Path(run_dir) if run_dir is not None else None
    n = len(prepared.queries)

    for epoch in range(cfg.epochs):
        t0 = time.time()
        lr = opt.param_groups[0]["lr"]
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            base = stack_canvases(
                [prepared.queries[i] for i in idx], [prepared.pairs[i] for i in idx], spec
            ).to(_dtype(model))
            logits = model.token_logits(prompt.apply_canvas(base, spec))[:, masked]
            loss = prompt_loss(logits, prepared.targets[idx])
            if not torch.isfinite(loss):
                prompt.values.data = last_good
                if run_dir is not None:
                    save_checkpoint(prompt, run_dir / "last_good.prompt", {"epoch": epoch - 1})
                raise NumericalError(
                    f"non-finite prompt loss at epoch {epoch}",
                    {"epoch": epoch, "batch_start": start, "lr": lr, "last_good": last_good},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        last_good = prompt.values.detach().clone()
        val = float(validate(prompt)) if validate is not None else None
        history.append(total / n, lr, time.time() - t0, val)
        log.info("epoch %d loss %.5f lr %.4g%s", epoch, total / n, lr, "" if val is None else f" val {val:.2f}")
        if val is not None and val > best_score:
            best_score, best = val, last_good.clone()
            history.best_epoch = epoch
        if run_dir is not None and save_every_epoch:
            save_checkpoint(prompt, run_dir / f"epoch_{epoch:03d}.prompt", {"epoch": epoch, "loss": total / n})

    if best is not None:
        prompt.values.data = best
    if model.digest() != digest:
        raise RuntimeError("frozen model weights changed during prompt training")
    prompt.values.data = prompt.values.data.float()
    prompt.requires_grad_(False)
    return prompt, history


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


# ----------------------------------------------------------------- grad check


def grad_check(
    model: FrozenInpainter,
    ds: TaskDataset,
    prompt: BorderPrompt,
    n_params: int = 32,
    eps: float = 1e-4,
    index: RetrievalIndex | None = None,
    fx: FeatureExtractor | None = None,
    n_queries: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Runs on float64 copies of the model and prompt over the first
    ``n_queries`` leave-one-out training examples of ``ds``.
    """
    from .retrieval import RawPixelExtractor, build_index

    if fx is None:
        fx = RawPixelExtractor()
    if index is None or index.extractor_name != fx.name:
        index = build_index(ds, fx)
    spec = canvas_spec_for(model.canvas_size)
    m64 = copy.deepcopy(model).double().freeze()
    masked = masked_token_indices(spec, model.token_grid_side)
    sub = ds.select(list(ds)[: max(n_queries, 2)])
    prepared = _prepare(sub, m64, build_index(sub, fx), fx, spec, masked)
    base = stack_canvases(prepared.queries, prepared.pairs, spec).double()
    p64 = BorderPrompt(prompt.geometry, prompt.values.detach().double(), prompt.delta, prompt.variant)

    def loss_of(values: torch.Tensor) -> torch.Tensor:
        p64.values.data = values
        logits = m64.token_logits(p64.apply_canvas(base, spec))[:, masked]
        return prompt_loss(logits, prepared.targets)

    theta = p64.values.detach().clone()
    p64.values.grad = None
    loss_of(theta.clone()).backward()
    analytic = p64.values.grad.detach().clone()

    rng = np.random.default_rng(seed)
    picks = rng.choice(theta.numel(), size=min(n_params, theta.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            up, down = theta.clone(), theta.clone()
            up[k] += eps
            down[k] -= eps
            numeric = (loss_of(up) - loss_of(down)).item() / (2 * eps)
            a = analytic[k].item()
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
