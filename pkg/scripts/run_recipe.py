"""Run the five-model recipe on several seeds and print CER and VUSS tables.

    python scripts/run_recipe.py --seeds 0 1 2 --out runs/recipe.json
"""
from __future__ import annotations

import argparse
import json
import statistics
import time
from pathlib import Path

from opd_lab.config import RunConfig, load_config
from opd_lab.pipeline import run_recipe

MODELS = ("teacher", "sft", "sft_opd", "sft_td", "sft_td_opd")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()

    results = []
    print(f"{'seed':>4} " + " ".join(f"{m:>11}" for m in MODELS) + f" {'vuss_sft':>9} {'vuss_td':>9} {'secs':>6}")
    for seed in args.seeds:
        t0 = time.time()
        r = run_recipe(cfg.recipe, seed)
        row = {
            "seed": seed,
            "cer": r["cer"],
            "vuss_before_td": r["vuss_before_td"].mean,
            "vuss_after_td": r["vuss_after_td"].mean,
            "fallback": r["fallback"],
        }
        results.append(row)
        print(f"{seed:>4} " + " ".join(f"{100 * r['cer'][m]:>10.2f}%" for m in MODELS)
              + f" {row['vuss_before_td']:>9.3f} {row['vuss_after_td']:>9.3f} {time.time() - t0:>6.1f}", flush=True)

    med = {m: statistics.median(x["cer"][m] for x in results) for m in MODELS}
    vb = statistics.median(x["vuss_before_td"] for x in results)
    va = statistics.median(x["vuss_after_td"] for x in results)
    print(f"{'med':>4} " + " ".join(f"{100 * med[m]:>10.2f}%" for m in MODELS) + f" {vb:>9.3f} {va:>9.3f}")
    print(f"SFT->OPD relative CER reduction: {1 - med['sft_opd'] / med['sft']:.1%}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"config_hash": cfg.hash, "runs": results}, indent=2) + "\n")


if __name__ == "__main__":
    main()
