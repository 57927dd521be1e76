"""Sampling cost and quality against the number of diffusion steps.

Timing uses freshly initialized networks (cost does not depend on the
weights); quality needs one trained model per T, so ``--train`` is opt-in.
Every T gets the same step budget.

Usage: python3 scripts/step_sweep.py [--T 25,50,100,200] [--train] [--out results/sweep]
"""

import argparse
from pathlib import Path

from freqdiff import experiments as ex
from freqdiff.conditioning import valid_masks
from freqdiff.config import load_config
from freqdiff.phantoms import generate_dataset

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--T", default="25,50,100,200")
    ap.add_argument("--train", action="store_true", help="train a model per T before scoring")
    ap.add_argument("--max-steps", type=int, default=3200, help="training budget per T (default: 3200)")
    ap.add_argument("--test-count", type=int, default=56)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.cfg")
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "sweep")
    args = ap.parse_args()
    cfg = load_config(args.config, {"max_steps": args.max_steps})
    T_values = [int(x) for x in args.T.split(",")]

    train = generate_dataset(cfg.count, cfg.size, cfg.data_seed) if args.train else []
    test = generate_dataset(args.test_count, cfg.size, cfg.data_seed + 1000)

    def progress(T, _state):
        print(f"T={T} ready", flush=True)

    rows = ex.sweep_T(cfg, train, test, T_values, valid_masks(), train_models=args.train, on_model=progress)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "psnr_vs_T.csv").write_text(ex.sweep_csv(rows))
    (args.out / "timing.csv").write_text(ex.sweep_timing_csv(rows))
    print(ex.sweep_csv(rows), end="")
    print(ex.sweep_timing_csv(rows), end="")


if __name__ == "__main__":
    main()
