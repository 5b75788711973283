"""mIoU scoring, end-to-end in-context evaluation and ablation protocols.

Scores in reports are percentages (IoU x 100); :func:`iou` itself returns a
fraction. Aggregation runs image -> category -> fold -> mean.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .canvas import CanvasSpec, extract_cell, masked_token_indices
from .dataset import TaskDataset, subset_fraction, subset_per_class
from .frozen_model import FrozenInpainter, canvas_spec_for, infer_region
from .prompt import BorderPrompt, PromptGeometry
from .retrieval import FeatureExtractor, RetrievalIndex, build_index, retrieve
from .training import PromptTrainConfig, stack_canvases, train_prompt

log = logging.getLogger(__name__)


def binarize(decoded, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the channel mean is at least ``threshold``."""
    x = torch.as_tensor(decoded).double()
    return (x.mean(dim=-3) >= threshold).numpy().astype(np.uint8)


def binarize_colored(decoded, anchors: Mapping[int, Sequence[float]]) -> np.ndarray:
    """Nearest-anchor-colour labels for colour-coded masks; returns anchor keys."""
    x = torch.as_tensor(decoded).double()
    keys = list(anchors)
    cols = torch.tensor([anchors[k] for k in keys], dtype=torch.float64)
    d = ((x.movedim(-3, -1)[..., None, :] - cols) ** 2).sum(-1)
    return np.asarray(keys)[d.argmin(-1).numpy()]


def iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    per_image: dict[str, float]
    per_category: dict[int, float]
    per_fold: dict[int, float]
    mean: float
    meta: dict = field(default_factory=dict)

    def delta(self, baseline: "EvalReport") -> float:
        return self.mean - baseline.mean

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "key", "miou"])
            for k, v in sorted(self.per_fold.items()):
                w.writerow(["fold", k, repr(v)])
            for k, v in sorted(self.per_category.items()):
                w.writerow(["category", k, repr(v)])
            w.writerow(["mean", "", repr(self.mean)])

    def write_images_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "iou"])
            for k in sorted(self.per_image):
                w.writerow([k, repr(self.per_image[k])])


def aggregate(
    per_image: Mapping[str, float],
    categories: Mapping[str, int],
    partition: Mapping[int, int],
    scale: float = 100.0,
) -> EvalReport:
    """Mean IoU per category, then per fold, then over folds."""
    by_cat: dict[int, list[float]] = {}
    for sid in sorted(per_image):
        by_cat.setdefault(categories[sid], []).append(per_image[sid])
    per_category = {c: scale * math.fsum(v) / len(v) for c, v in sorted(by_cat.items())}
    by_fold: dict[int, list[float]] = {}
    for c, v in per_category.items():
        by_fold.setdefault(partition[c], []).append(v)
    per_fold = {f: math.fsum(v) / len(v) for f, v in sorted(by_fold.items())}
    mean = math.fsum(per_fold.values()) / len(per_fold)
    return EvalReport(dict(per_image), per_category, per_fold, mean)


def report_from_folds(fold_values: Sequence[float], **meta) -> EvalReport:
    """Report built directly from published per-fold numbers."""
    per_fold = {i: float(v) for i, v in enumerate(fold_values)}
    return EvalReport({}, {}, per_fold, math.fsum(per_fold.values()) / len(per_fold), dict(meta))


# ------------------------------------------------------------------ ICL eval


def eval_icl(
    queries: TaskDataset,
    retrieval_set: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    prompt: BorderPrompt | None = None,
    spec: CanvasSpec | None = None,
    index: RetrievalIndex | None = None,
    batch_size: int = 32,
) -> EvalReport:
    """Retrieve, (optionally) prompt, inpaint, binarise and score every query.

    A query never retrieves itself, so passing the same dataset for both
    roles gives leave-one-out evaluation.
    """
    if len(queries) == 0:
        raise ValueError("no queries to evaluate")
    spec = spec or canvas_spec_for(model.canvas_size)
    if index is None:
        index = build_index(retrieval_set, fx)
    masked = masked_token_indices(spec, model.token_grid_side)
    qs = sorted(queries, key=lambda s: s.id)
    pairs = [retrieval_set.by_id(retrieve(index, q.image, fx, exclude={q.id})) for q in qs]
    per_image = {}
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(qs), batch_size):
            chunk = qs[i : i + batch_size]
            pixels = stack_canvases(chunk, pairs[i : i + batch_size], spec).to(dtype)
            if prompt is not None:
                pixels = prompt.apply_canvas(pixels, spec)
            out = infer_region(model, pixels, masked)
            preds = binarize(extract_cell(out, "br", spec))
            for q, pred in zip(chunk, preds):
                per_image[q.id] = iou(pred, q.mask)
    report = aggregate(
        per_image, {q.id: q.category_id for q in qs}, queries.category_partition
    )
    report.meta.update(
        prompt="none" if prompt is None else prompt.variant,
        pairs={q.id: p.id for q, p in zip(qs, pairs)},
        n_queries=len(qs),
    )
    return report


@dataclass
class DomainShiftReport:
    domains: str
    baseline: EvalReport
    prompted: EvalReport | None
    reference: dict[str, float] = field(default_factory=dict)

    def drops(self) -> dict[str, dict[str, float]]:
        """Absolute and relative drop against the in-domain reference means."""
        out = {}
        for name, rep in (("baseline", self.baseline), ("prompted", self.prompted)):
            if rep is None or name not in self.reference:
                continue
            ref = self.reference[name]
            drop = ref - rep.mean
            out[name] = {"reference": ref, "shifted": rep.mean, "drop": drop, "relative": drop / ref if ref else float("nan")}
        return out


def domain_shift_eval(
    retrieval_set: TaskDataset,
    queries: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    prompt: BorderPrompt | None = None,
    domains: str = "source->target",
    reference: Mapping[str, float] | None = None,
    spec: CanvasSpec | None = None,
) -> DomainShiftReport:
    """In-context pairs from ``retrieval_set``, queries from another domain."""
    index = build_index(retrieval_set, fx)
    base = eval_icl(queries, retrieval_set, model, fx, None, spec, index)
    prompted = eval_icl(queries, retrieval_set, model, fx, prompt, spec, index) if prompt is not None else None
    for rep in (base, prompted):
        if rep is not None:
            rep.meta["domains"] = domains
    return DomainShiftReport(domains, base, prompted, dict(reference or {}))


# ---------------------------------------------------------------- class grid


@dataclass
class ClassGrid:
    categories: list[int]
    matrix: np.ndarray  # rows: training category, cols: query category

    @property
    def grand_mean(self) -> float:
        return float(self.matrix.mean())

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train\\query", *self.categories])
            for c, row in zip(self.categories, self.matrix):
                w.writerow([c, *(repr(float(v)) for v in row)])
            w.writerow(["grand_mean", repr(self.grand_mean)])


def class_grid_eval(
    per_class_prompts: Mapping[int, BorderPrompt],
    train: TaskDataset,
    test: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    categories: Sequence[int] | None = None,
    spec: CanvasSpec | None = None,
) -> ClassGrid:
    """Entry (i, j): prompt and pairs from training category i, queries of test category j."""
    cats = list(categories) if categories is not None else test.categories
    missing = [c for c in cats if c not in per_class_prompts]
    if missing:
        raise ValueError(f"no trained prompt for categories {missing}")
    mat = np.zeros((len(cats), len(cats)))
    for i, ci in enumerate(cats):
        source = train.of_categories([ci])
        index = build_index(source, fx)
        for j, cj in enumerate(cats):
            rep = eval_icl(test.of_categories([cj]), source, model, fx, per_class_prompts[ci], spec, index)
            mat[i, j] = rep.mean
    return ClassGrid(cats, mat)


def train_class_prompts(
    train: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    cfg: PromptTrainConfig,
    categories: Sequence[int] | None = None,
) -> dict[int, BorderPrompt]:
    out = {}
    for c in categories if categories is not None else train.categories:
        sub = train.of_categories([c])
        out[c], _ = train_prompt(sub, model, build_index(sub, fx), fx, cfg)
    return out


# -------------------------------------------------------------------- sweeps


def _train_and_eval(train, test, model, fx, cfg, spec=None):
    index = build_index(train, fx)
    prompt, history = train_prompt(train, model, index, fx, cfg, spec)
    rep = eval_icl(test, train, model, fx, prompt, spec, index)
    return rep, prompt, history


def sweep_variants(
    variants: Sequence[str],
    train: TaskDataset,
    test: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    cfg: PromptTrainConfig,
    spec: CanvasSpec | None = None,
) -> list[dict]:
    """Prompt placement ablation; the first row is the no-prompt baseline."""
    index = build_index(train, fx)
    base = eval_icl(test, train, model, fx, None, spec, index)
    rows = [{"variant": "none", "params": 0, **_fold_cols(base)}]
    for v in variants:
        rep, prompt, _ = _train_and_eval(train, test, model, fx, replace(cfg, variant=v), spec)
        rows.append({"variant": v, "params": prompt.geometry.n_params, **_fold_cols(rep)})
    return rows


def sweep_padding(
    pads: Iterable[int],
    train: TaskDataset,
    test: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    cfg: PromptTrainConfig,
    spec: CanvasSpec | None = None,
) -> list[dict]:
    """Rows of (pad, parameter count, per-fold and mean mIoU), sorted by pad."""
    spec = spec or canvas_spec_for(model.canvas_size)
    rows = []
    for pad in sorted(set(pads)):
        geometry = PromptGeometry.for_variant(cfg.variant, spec, pad)
        rep, _, _ = _train_and_eval(train, test, model, fx, replace(cfg, pad=pad), spec)
        rows.append({"pad": pad, "params": geometry.n_params, **_fold_cols(rep)})
    return rows


def sweep_dataset_size(
    values: Sequence[float],
    train: TaskDataset,
    test: TaskDataset,
    model: FrozenInpainter,
    fx: FeatureExtractor,
    cfg: PromptTrainConfig,
    mode: str = "per_class",
    seed: int = 0,
    spec: CanvasSpec | None = None,
) -> list[dict]:
    """Baseline and prompted mIoU as the training/retrieval set shrinks.

    ``mode`` is ``per_class`` (images per category) or ``fraction`` (share
    of the whole set); the subset serves as both retrieval and training set.
    """
    if mode not in ("per_class", "fraction"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    rows = []
    for v in values:
        sub = subset_per_class(train, int(v), seed) if mode == "per_class" else subset_fraction(train, float(v), seed)
        index = build_index(sub, fx)
        base = eval_icl(test, sub, model, fx, None, spec, index)
        if len(sub) >= 2:
            prompt, _ = train_prompt(sub, model, index, fx, cfg, spec)
            rep = eval_icl(test, sub, model, fx, prompt, spec, index)
            prompted = rep.mean
        else:
            prompted = float("nan")
        rows.append({mode: v, "n": len(sub), "baseline": base.mean, "prompted": prompted})
    return rows


def _fold_cols(rep: EvalReport) -> dict:
    cols = {f"fold{k}": v for k, v in sorted(rep.per_fold.items())}
    cols["mean"] = rep.mean
    return cols


def write_rows(rows: Sequence[dict], path: str | Path) -> None:
    keys = list(rows[0]) if rows else []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# --------------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_fold_bars(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(reports)
    folds = sorted({f for r in reports.values() for f in r.per_fold})
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        vals = [reports[name].per_fold.get(f, np.nan) for f in folds] + [reports[name].mean]
        ax.bar(np.arange(len(folds) + 1) + i * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(folds) + 1) + width * (len(names) - 1) / 2)
    ax.set_xticklabels([f"Fold-{f}" for f in folds] + ["Mean"])
    ax.set_ylabel("mIoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: Sequence[dict], x: str, ys: Sequence[str], path: str | Path, logx: bool = False) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r[x] for r in rows]
    for y in ys:
        vals = [r[y] for r in rows]
        ax.plot(xs, vals, marker="o", label=y)
        for a, b in zip(xs, vals):
            ax.annotate(f"{b:.1f}", (a, b), textcoords="offset points", xytext=(0, 5), ha="center", fontsize=7)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel("mIoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_class_grid(grid: ClassGrid, path: str | Path, names: Mapping[int, str] | None = None) -> None:
    plt = _pyplot()
    labels = [names.get(c, str(c)) if names else str(c) for c in grid.categories]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(labels), 0.8 + 0.6 * len(labels)))
    im = ax.imshow(grid.matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("query category")
    ax.set_ylabel("prompt category")
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{grid.matrix[i, j]:.1f}", ha="center", va="center", color="w", fontsize=7)
    fig.colorbar(im, ax=ax)
    ax.set_title(f"grand mean {grid.grand_mean:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
