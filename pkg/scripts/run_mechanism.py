"""Synthetic mechanism experiment: does a trained border prompt beat plain FMLR?

Builds the 8-category synthetic task, pretrains the toy frozen inpainter,
trains an IL prompt and writes reports, plots and checkpoints to --out.
"""

import argparse
import json
import logging

from einmemo.experiments import MechanismConfig, run_mechanism, with_prompt


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/mechanism")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--pad", type=int, default=None)
    ap.add_argument("--variant", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    cfg = MechanismConfig(seed=args.seed)
    overrides = {k: v for k, v in
                 {"epochs": args.epochs, "learning_rate": args.lr, "pad": args.pad, "variant": args.variant}.items()
                 if v is not None}
    if overrides:
        cfg = with_prompt(cfg, **overrides)
    res = run_mechanism(cfg, args.out)
    print(json.dumps(res.summary(), indent=2))


if __name__ == "__main__":
    main()
