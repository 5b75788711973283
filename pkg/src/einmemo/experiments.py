"""End-to-end experiment drivers shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .dataset import TaskDataset, synth_task
from .evaluation import (
    EvalReport,
    class_grid_eval,
    eval_icl,
    plot_class_grid,
    plot_fold_bars,
    plot_sweep,
    sweep_dataset_size,
    sweep_padding,
    sweep_variants,
    train_class_prompts,
    write_rows,
)
from .frozen_model import FrozenInpainter, ToyConfig, save_model, train_toy_frozen
from .prompt import BorderPrompt, save_checkpoint
from .retrieval import RawPixelExtractor, build_index, retrieve_all
from .training import PromptTrainConfig, TrainHistory, train_prompt

log = logging.getLogger(__name__)


@dataclass
class MechanismConfig:
    seed: int = 0
    categories: int = 8
    per_class: int = 50
    test_per_class: int = 20
    cell: int = 111
    toy: ToyConfig = field(default_factory=ToyConfig)
    prompt: PromptTrainConfig = field(default_factory=PromptTrainConfig)


@dataclass
class MechanismResult:
    train: TaskDataset
    test: TaskDataset
    model: FrozenInpainter
    prompt: BorderPrompt
    history: TrainHistory
    baseline: EvalReport
    prompted: EvalReport
    digest_before: str
    digest_after: str
    seconds: dict[str, float]

    @property
    def delta(self) -> float:
        return self.prompted.delta(self.baseline)

    def summary(self) -> dict:
        return {
            "baseline": self.baseline.mean,
            "prompted": self.prompted.mean,
            "delta": self.delta,
            "prompt_digest": self.prompt.digest(),
            "model_digest": self.digest_after,
            "first_loss": self.history.loss[0],
            "last_loss": self.history.loss[-1],
            **{f"seconds_{k}": v for k, v in self.seconds.items()},
        }


def run_mechanism(cfg: MechanismConfig | None = None, out: str | Path | None = None) -> MechanismResult:
    """Synthetic task -> toy frozen model -> FMLR baseline -> trained prompt -> eval."""
    cfg = cfg or MechanismConfig()
    torch.set_num_threads(1)
    t0 = time.time()
    train, test = synth_task(cfg.seed, cfg.categories, cfg.per_class, cfg.cell, cfg.test_per_class)
    fx = RawPixelExtractor()
    index = build_index(train, fx)
    neighbours = retrieve_all(index, train, fx, leave_one_out=True)
    t1 = time.time()
    model = train_toy_frozen(train, cfg.toy, cfg.seed, neighbours, progress=True)
    t2 = time.time()
    baseline = eval_icl(test, train, model, fx, None, index=index)
    digest_before = model.digest()
    prompt, history = train_prompt(train, model, index, fx, cfg.prompt)
    digest_after = model.digest()
    t3 = time.time()
    prompted = eval_icl(test, train, model, fx, prompt, index=index)
    t4 = time.time()
    seconds = {"data": t1 - t0, "toy": t2 - t1, "prompt": t3 - t2, "eval": t4 - t3, "total": t4 - t0}
    res = MechanismResult(train, test, model, prompt, history, baseline, prompted, digest_before, digest_after, seconds)
    log.info("baseline %.2f prompted %.2f delta %+.2f (%.0fs)", baseline.mean, prompted.mean, res.delta, seconds["total"])
    if out is not None:
        write_mechanism(res, cfg, out)
    return res


def write_mechanism(res: MechanismResult, cfg: MechanismConfig, out: str | Path) -> None:
    import yaml

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out / "model")
    save_checkpoint(res.prompt, out / "prompt.bin", {"epoch": len(res.history) - 1})
    res.history.write_csv(out / "history.csv")
    res.baseline.write_csv(out / "report_baseline.csv")
    res.prompted.write_csv(out / "report_prompted.csv")
    plot_fold_bars({"FMLR baseline": res.baseline, "prompted (IL)": res.prompted}, out / "folds.png")
    write_rows([res.summary()], out / "summary.csv")
    d = asdict(cfg)
    d["toy"]["tasks"] = list(d["toy"]["tasks"])
    (out / "config.yaml").write_text(yaml.safe_dump(d, sort_keys=True))


@dataclass
class AblationConfig:
    variants: tuple[str, ...] = ("I", "Q", "IQ", "IL")
    pads: tuple[int, ...] = (5, 10, 15, 20, 25, 30)
    grid_k: int = 4
    per_class: tuple[int, ...] = (16, 32, 64)
    fractions: tuple[float, ...] = ()
    # shortened schedule so the whole harness stays desk-sized
    prompt: PromptTrainConfig = field(default_factory=lambda: PromptTrainConfig(epochs=15))


def run_ablations(
    train: TaskDataset,
    test: TaskDataset,
    model: FrozenInpainter,
    cfg: AblationConfig | None = None,
    out: str | Path | None = None,
) -> dict:
    """Placement variants, pad sweep, class grid and dataset-size sweep."""
    cfg = cfg or AblationConfig()
    fx = RawPixelExtractor()
    res: dict = {"seconds": {}}

    def timed(name, fn):
        t = time.time()
        res[name] = fn()
        res["seconds"][name] = time.time() - t
        log.info("%s done in %.0fs", name, res["seconds"][name])

    if cfg.variants:
        timed("variants", lambda: sweep_variants(cfg.variants, train, test, model, fx, cfg.prompt))
    if cfg.pads:
        timed("pads", lambda: sweep_padding(cfg.pads, train, test, model, fx, cfg.prompt))
    if cfg.grid_k:
        cats = train.categories[: cfg.grid_k]

        def grid():
            prompts = train_class_prompts(train, model, fx, cfg.prompt, cats)
            return class_grid_eval(prompts, train, test, model, fx, cats)

        timed("grid", grid)
    if cfg.per_class:
        timed("per_class", lambda: sweep_dataset_size(cfg.per_class, train, test, model, fx, cfg.prompt, "per_class"))
    if cfg.fractions:
        timed("fraction", lambda: sweep_dataset_size(cfg.fractions, train, test, model, fx, cfg.prompt, "fraction"))

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        if "variants" in res:
            write_rows(res["variants"], out / "variants.csv")
        if "pads" in res:
            write_rows(res["pads"], out / "pads.csv")
            plot_sweep(res["pads"], "pad", ["mean"], out / "pads.png")
        if "grid" in res:
            res["grid"].write_csv(out / "class_grid.csv")
            plot_class_grid(res["grid"], out / "class_grid.png")
        for kind in ("per_class", "fraction"):
            if kind in res:
                write_rows(res[kind], out / f"{kind}.csv")
                plot_sweep(res[kind], kind, ["baseline", "prompted"], out / f"{kind}.png", logx=True)
    return res


def with_prompt(cfg: MechanismConfig, **kw) -> MechanismConfig:
    return replace(cfg, prompt=replace(cfg.prompt, **kw))
