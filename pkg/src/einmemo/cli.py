"""Command-line entry point: ``einmemo <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .canvas import CanvasSpec
from .dataset import DataError, load_pairs, make_folds, synth_task, write_pairs
from .evaluation import (
    class_grid_eval,
    domain_shift_eval,
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
from .frozen_model import ModelError, NumericalError, load_external, save_model, train_toy_frozen
from .prompt import CheckpointError, load_checkpoint, save_checkpoint
from .retrieval import ModelEncoderExtractor, RawPixelExtractor, RetrievalError, build_index, retrieve_all
from .training import stack_canvases, train_prompt

log = logging.getLogger("einmemo")

OUTPUT_ROOT_ENV = "EINMEMO_OUTPUT_ROOT"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------- helpers


def run_dir(cfg: cfgmod.RunConfig) -> Path:
    if cfg.out:
        out = Path(cfg.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{cfg.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def tree_digest(root: Path) -> str:
    """sha256 over the dataset files (manifest, images, masks)."""
    h = hashlib.sha256()
    files = [root / "manifest.tsv", *sorted((root / "images").iterdir()), *sorted((root / "masks").iterdir())]
    for f in files:
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _load(cfg, root=None, split="train"):
    root = _need(root or cfg.data, "--data")
    return load_pairs(root, split=split, cell=cfg.cell, folds=cfg.folds)


def _extractor(cfg, model=None):
    if cfg.extractor == "raw":
        return RawPixelExtractor()
    if cfg.extractor == "toy":
        if model is None:
            model = load_external(_need(cfg.model, "--model"))
        return ModelEncoderExtractor(model)
    raise UsageError(f"unknown extractor {cfg.extractor!r}")


def _fold(cfg, train, test=None):
    if cfg.fold is None:
        return train, test
    folds = make_folds(train, cfg.folds, test)
    if not 0 <= cfg.fold < len(folds):
        raise UsageError(f"fold {cfg.fold} out of range for {len(folds)} folds")
    return folds[cfg.fold]


def _save_canvases(pixels: torch.Tensor, out: Path, name: str, n: int = 4):
    out.mkdir(exist_ok=True)
    for i, c in enumerate(pixels[:n]):
        arr = (c.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"{name}_{i}.png")


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg) -> int:
    g = cfg.gen
    if g.categories < 2 or g.per_class < 4:
        raise UsageError("need --categories >= 2 and --per-class >= 4")
    out = run_dir(cfg)
    train, test = synth_task(cfg.seed, g.categories, g.per_class, g.cell, g.test_per_class, g.background, cfg.folds)
    write_pairs(out, [train, test])
    cfg.dump(out / "config.yaml")
    digest = tree_digest(out)
    (out / "tree_digest.txt").write_text(digest + "\n")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out} (digest {digest[:16]})")
    return 0


def cmd_train_frozen(cfg) -> int:
    train = _load(cfg)
    out = run_dir(cfg)
    fx = RawPixelExtractor()
    neighbours = retrieve_all(build_index(train, fx), train, fx, leave_one_out=True)
    model = train_toy_frozen(train, cfg.toy, cfg.seed, neighbours, progress=True)
    digest = save_model(model, out)
    cfg.dump(out / "config.yaml")
    print(f"toy model written to {out} (digest {digest})")
    return 0


def cmd_build_index(cfg) -> int:
    ds = _load(cfg, split=cfg.split)
    out = run_dir(cfg)
    index = build_index(ds, _extractor(cfg))
    index.save(out / "index.bin")
    cfg.dump(out / "config.yaml")
    print(f"index of {len(index)} x {index.vectors.shape[1]} written to {out / 'index.bin'}")
    return 0


def cmd_train_prompt(cfg) -> int:
    model = load_external(_need(cfg.model, "--model"))
    train, _ = _fold(cfg, _load(cfg))
    fx = _extractor(cfg, model)
    out = run_dir(cfg)
    cfg.dump(out / "config.yaml")
    digest_before = model.digest()
    index = build_index(train, fx)
    prompt, history = train_prompt(train, model, index, fx, cfg.train, run_dir=out)
    history.write_csv(out / "history.csv")
    meta = {"epoch": len(history) - 1, "loss": history.loss[-1], "seed": cfg.train.seed}
    save_checkpoint(prompt, out / "prompt.bin", meta)
    (out / "model_digest.txt").write_text(f"before {digest_before}\nafter {model.digest()}\n")
    if cfg.debug_canvas:
        spec = CanvasSpec(cfg.cell, cfg.cell)
        qs = list(train)[:4]
        pairs = [train.by_id(retrieve_all(index, [q], fx, True)[q.id]) for q in qs]
        with torch.no_grad():
            _save_canvases(prompt.apply_canvas(stack_canvases(qs, pairs, spec), spec), out / "canvases", "prompted")
    print(f"prompt ({prompt.geometry.n_params} params, variant {prompt.variant}) written to {out}; "
          f"loss {history.loss[0]:.4f} -> {history.loss[-1]:.4f}")
    return 0


def cmd_eval(cfg) -> int:
    model = load_external(_need(cfg.model, "--model"))
    fx = _extractor(cfg, model)
    prompt = None
    if not cfg.no_prompt:
        prompt, _ = load_checkpoint(_need(cfg.prompt, "--prompt (or --no-prompt)"))
    out = run_dir(cfg)
    cfg.dump(out / "config.yaml")
    if cfg.target:
        source_train = _load(cfg)
        source_test = _load(cfg, split="test")
        target_test = _load(cfg, cfg.target, split="test")
        ref = {"baseline": eval_icl(source_test, source_train, model, fx).mean}
        if prompt is not None:
            ref["prompted"] = eval_icl(source_test, source_train, model, fx, prompt).mean
        shift = domain_shift_eval(source_train, target_test, model, fx, prompt, f"{cfg.data}->{cfg.target}", ref)
        rows = [{"method": k, **v} for k, v in shift.drops().items()]
        write_rows(rows, out / "domain_shift.csv")
        for r in rows:
            print(f"{r['method']}: {r['reference']:.2f} -> {r['shifted']:.2f} "
                  f"(drop {r['drop']:.2f}, {100 * r['relative']:.2f}%)")
        return 0
    train, test = _fold(cfg, _load(cfg), _load(cfg, split="test"))
    index = build_index(train, fx)
    reports = {"baseline": eval_icl(test, train, model, fx, None, index=index)}
    if prompt is not None:
        reports["prompted"] = eval_icl(test, train, model, fx, prompt, index=index)
    rows = []
    for name, rep in reports.items():
        rep.write_csv(out / f"report_{name}.csv")
        rep.write_images_csv(out / f"images_{name}.csv")
        rows.append({"method": name, **{f"fold{k}": v for k, v in rep.per_fold.items()}, "mean": rep.mean})
    if prompt is not None:
        rows.append({"method": "delta", "mean": reports["prompted"].delta(reports["baseline"])})
    write_rows(rows, out / "summary.csv")
    plot_fold_bars(reports, out / "folds.png")
    if cfg.debug_canvas:
        spec = CanvasSpec(cfg.cell, cfg.cell)
        qs = sorted(test, key=lambda s: s.id)[:4]
        pairs = [train.by_id(reports["baseline"].meta["pairs"][q.id]) for q in qs]
        base = stack_canvases(qs, pairs, spec)
        _save_canvases(base if prompt is None else prompt.apply_canvas(base, spec).detach(), out / "canvases", "query")
    for r in rows:
        print(f"{r['method']:>9}: mean mIoU {r['mean']:.2f}")
    return 0


def _parse_sweep(text: str):
    kind, _, values = text.partition("=")
    if not values:
        raise UsageError(f"--sweep expects kind=v1,v2,..., got {text!r}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if kind == "pad":
        return kind, [int(v) for v in items]
    if kind == "per_class":
        return kind, [int(v) for v in items]
    if kind == "fraction":
        return kind, [float(v) for v in items]
    if kind == "variant":
        return kind, items
    raise UsageError(f"unknown sweep kind {kind!r} (pad, per_class, fraction, variant)")


def cmd_ablate(cfg) -> int:
    if not cfg.sweep and not cfg.grid:
        raise UsageError("ablate needs --sweep or --grid")
    model = load_external(_need(cfg.model, "--model"))
    fx = _extractor(cfg, model)
    train, test = _fold(cfg, _load(cfg), _load(cfg, split="test"))
    out = run_dir(cfg)
    cfg.dump(out / "config.yaml")
    if cfg.sweep:
        kind, values = _parse_sweep(cfg.sweep)
        if kind == "pad":
            rows = sweep_padding(values, train, test, model, fx, cfg.train)
            plot_sweep(rows, "pad", ["mean"], out / "sweep_pad.png")
        elif kind == "variant":
            rows = sweep_variants(values, train, test, model, fx, cfg.train)
        else:
            rows = sweep_dataset_size(values, train, test, model, fx, cfg.train, kind, cfg.seed)
            plot_sweep(rows, kind, ["baseline", "prompted"], out / f"sweep_{kind}.png", logx=True)
        write_rows(rows, out / f"sweep_{kind}.csv")
        for r in rows:
            print(", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    if cfg.grid:
        cats = train.categories[: cfg.grid]
        prompts = train_class_prompts(train, model, fx, cfg.train, cats)
        grid = class_grid_eval(prompts, train, test, model, fx, cats)
        grid.write_csv(out / "class_grid.csv")
        plot_class_grid(grid, out / "class_grid.png")
        print(f"class grid {len(cats)}x{len(cats)}, grand mean {grid.grand_mean:.2f}")
    return 0


def cmd_report(cfg) -> int:
    """Print every CSV table found in a run directory and write report.md."""
    root = Path(_need(cfg.out, "--out (run directory)"))
    if not root.is_dir():
        raise DataError(f"run directory {root} does not exist")
    tables = sorted(root.glob("*.csv"))
    if not tables:
        raise DataError(f"no CSV tables in {root}")
    lines = [f"# Run report: {root.name}", ""]
    for t in tables:
        rows = [r.split(",") for r in t.read_text().strip().splitlines()]
        lines += [f"## {t.stem}", "", "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        for r in rows[1:]:
            cells = []
            for c in r:
                try:
                    cells.append(f"{float(c):.4g}")
                except ValueError:
                    cells.append(c)
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    for img in sorted(root.glob("*.png")):
        lines.append(f"![{img.stem}]({img.name})")
    text = "\n".join(lines) + "\n"
    (root / "report.md").write_text(text)
    print(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-frozen": cmd_train_frozen,
    "build-index": cmd_build_index,
    "train-prompt": cmd_train_prompt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="einmemo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run config; flags override it")
        sp.add_argument("--out", dest="out", help="run directory")
        sp.add_argument("--seed", dest="seed", type=int)
        sp.add_argument("--cell", dest="cell", type=int)
        sp.add_argument("--folds", dest="folds", type=int)
        return sp

    def data(sp):
        sp.add_argument("--data", dest="data")
        sp.add_argument("--extractor", dest="extractor", choices=["raw", "toy"])
        sp.add_argument("--fold", dest="fold", type=int)
        return sp

    def training(sp):
        sp.add_argument("--model", dest="model")
        sp.add_argument("--epochs", dest="train.epochs", type=int)
        sp.add_argument("--batch-size", dest="train.batch_size", type=int)
        sp.add_argument("--lr", dest="train.learning_rate", type=float)
        sp.add_argument("--restart-period", dest="train.restart_period", type=int)
        sp.add_argument("--pad", dest="train.pad", type=int)
        sp.add_argument("--delta", dest="train.delta", type=float)
        sp.add_argument("--variant", dest="train.variant", choices=["I", "L", "IL", "Q", "IQ"])
        sp.add_argument("--init", dest="train.init", choices=["zeros", "gaussian"])
        sp.add_argument("--prompt-seed", dest="train.seed", type=int)
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    g.add_argument("--categories", dest="gen.categories", type=int)
    g.add_argument("--per-class", dest="gen.per_class", type=int)
    g.add_argument("--test-per-class", dest="gen.test_per_class", type=int)
    g.add_argument("--background", dest="gen.background", choices=["noise", "stripes"])

    t = data(common(sub.add_parser("train-frozen", help="train the toy frozen inpainter")))
    t.add_argument("--vq-epochs", dest="toy.vq_epochs", type=int)
    t.add_argument("--pred-epochs", dest="toy.pred_epochs", type=int)

    b = data(common(sub.add_parser("build-index", help="build and persist a retrieval index")))
    b.add_argument("--model", dest="model")
    b.add_argument("--split", dest="split", choices=["train", "test"])

    tp = training(data(common(sub.add_parser("train-prompt", help="train a border prompt"))))
    tp.add_argument("--debug-canvas", dest="debug_canvas", action="store_true", default=None)

    e = training(data(common(sub.add_parser("eval", help="evaluate baseline and prompted ICL"))))
    e.add_argument("--prompt", dest="prompt")
    e.add_argument("--no-prompt", dest="no_prompt", action="store_true", default=None)
    e.add_argument("--domain-shift", nargs=2, metavar=("SOURCE", "TARGET"))
    e.add_argument("--debug-canvas", dest="debug_canvas", action="store_true", default=None)

    a = training(data(common(sub.add_parser("ablate", help="run ablation sweeps"))))
    a.add_argument("--sweep", dest="sweep", help="pad=5,10 | per_class=16,32 | fraction=0.1,1 | variant=I,Q,IQ,IL")
    a.add_argument("--grid", dest="grid", type=int, help="per-class prompt grid over the first K categories")

    r = sub.add_parser("report", help="summarise a run directory")
    r.add_argument("--config")
    r.add_argument("out", nargs="?", help="run directory")
    return p


def resolve_config(args: argparse.Namespace) -> cfgmod.RunConfig:
    base = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in ("config", "verbose", "command", "domain_shift") and v is not None
    }
    if getattr(args, "domain_shift", None):
        overrides["data"], overrides["target"] = args.domain_shift
    overrides["command"] = args.command
    if "seed" in overrides:
        overrides.setdefault("train.seed", overrides["seed"])
    return cfgmod.merge(base, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if cfg.train.deterministic:
            torch.set_num_threads(1)
        return COMMANDS[args.command](cfg)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"einmemo: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"einmemo: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, RetrievalError, ModelError, CheckpointError, FileNotFoundError) as e:
        print(f"einmemo: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
