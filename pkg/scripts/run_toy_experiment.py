"""Run (or reuse) the desk-scale trend and obstacle experiments.

    python scripts/run_toy_experiment.py [--cache DIR] [--only trend|block] [--force]

Results land in DIR/<kind>_<config key>/results.json next to the
checkpoints and training logs. The acceptance suite reads the same cache.
"""

import argparse
import json
import os

from avforecast import toyrun

DEFAULT_CACHE = os.environ.get(
    "AVF_ACCEPT_CACHE", os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "artifacts", "acceptance"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default=DEFAULT_CACHE)
    ap.add_argument("--only", choices=("trend", "block"))
    ap.add_argument("--force", action="store_true", help="rerun even if results exist")
    args = ap.parse_args()
    cfg = toyrun.ToyConfig()
    for kind in ("trend", "block"):
        if args.only and kind != args.only:
            continue
        res = toyrun.cached(kind, cfg, args.cache, log=lambda m, k=kind: print(f"[{k}] {m}", flush=True),
                            force=args.force)
        summary = {k: v for k, v in res.items() if not isinstance(v, (list, dict)) or k in ("inter_ssim", "intra_ssim")}
        print(json.dumps(summary, indent=1), flush=True)


if __name__ == "__main__":
    main()
