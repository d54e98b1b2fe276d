"""Direct / mean teacher / confidence-filtered mean teacher on the shifted target domain.

Needs a source checkpoint (see run_supervised.py). Writes one curve CSV per
method and labelled-set size, plus a summary of best and final losses.

    python3 scripts/run_domain_shift.py --source runs/supervised/model.ckpt --labelled 9 18 27
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from confgrasp.benchmark import DomainShiftSetup, judge, run_domain_shift
from confgrasp.cli import load_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", required=True, help="source-domain checkpoint")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--labelled", type=int, nargs="+", default=[9])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/domain_shift")
    args = ap.parse_args()

    params, cfg = load_model(args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for seed in args.seeds:
        for n in args.labelled:
            setup = DomainShiftSetup(seed=seed, labelled_n=n)
            if args.epochs:
                setup = replace(setup, adapt=replace(setup.adapt, epochs=args.epochs))
            t0 = time.perf_counter()
            results = run_domain_shift(params, cfg, setup)
            for m, r in results.items():
                r.write_csv(out / f"adapt_{m}_n{n}_seed{seed}.csv")
            v = judge(results)
            row = {"seed": seed, "labelled": n, "best": v.best, "final": v.final,
                   "best_margin": v.best_margin, "direct_rises": v.direct_rises,
                   "seconds": round(time.perf_counter() - t0)}
            summary.append(row)
            print(json.dumps(row, sort_keys=True))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
