"""Ablation harness on the synthetic task.

Placement variants, pad sweep, class-specific prompt grid and dataset-size
sweep. Reuses a frozen model saved by run_mechanism.py (--model) or trains
a fresh one. Prompt schedules are shortened (see --epochs).
"""

import argparse
import json
import logging
from pathlib import Path

from einmemo.dataset import synth_task
from einmemo.experiments import AblationConfig, run_ablations
from einmemo.frozen_model import load_external, train_toy_frozen
from einmemo.retrieval import RawPixelExtractor, build_index, retrieve_all
from einmemo.training import PromptTrainConfig


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--model", default=None, help="frozen model directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--variants", default="I,Q,IQ,IL")
    ap.add_argument("--pads", default="5,10,15,20,25,30")
    ap.add_argument("--grid-k", type=int, default=4)
    ap.add_argument("--per-class", default="16,32,64")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    train, test = synth_task(args.seed, 8, 50, 111, 20)
    if args.model:
        model = load_external(args.model)
    else:
        fx = RawPixelExtractor()
        nb = retrieve_all(build_index(train, fx), train, fx, leave_one_out=True)
        model = train_toy_frozen(train, seed=args.seed, neighbours=nb, progress=True)
    cfg = AblationConfig(
        variants=tuple(v for v in args.variants.split(",") if v),
        pads=_ints(args.pads),
        grid_k=args.grid_k,
        per_class=_ints(args.per_class),
        prompt=PromptTrainConfig(epochs=args.epochs, seed=args.seed),
    )
    res = run_ablations(train, test, model, cfg, args.out)
    brief = {k: v for k, v in res.items() if k != "grid"}
    if "grid" in res:
        brief["grid_diagonal"] = res["grid"].diagonal.tolist()
        brief["grid_mean"] = res["grid"].grand_mean
    Path(args.out, "ablations.json").write_text(json.dumps(brief, indent=2, default=float))
    print(json.dumps(brief, indent=2, default=float))


if __name__ == "__main__":
    main()
