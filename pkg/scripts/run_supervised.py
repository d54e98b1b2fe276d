"""Two-step supervised training on the synthetic source domain.

Writes the trained checkpoint, the training log and the evaluation report
(success rate plus the most-certain vs all-detections pose losses).

    python3 scripts/run_supervised.py --out runs/supervised
"""

import argparse
import time
from pathlib import Path

from confgrasp.benchmark import SupervisedSetup, run_supervised
from confgrasp.cli import save_model
from confgrasp.trainer import write_log


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--labelled", type=int, default=200)
    ap.add_argument("--eval", type=int, default=200)
    ap.add_argument("--out", default="runs/supervised")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = SupervisedSetup(seed=args.seed, n_labelled=args.labelled, n_eval=args.eval)
    t0 = time.perf_counter()
    res = run_supervised(setup)
    save_model(out, res.params, setup.backbone)
    write_log(out / "train_log.csv", res.log)
    res.report.write(out / "report.json", out / "report.csv")
    r = res.report
    print(f"success {r.success_rate:.3f}  pose loss: most certain {r.pose_loss_most_certain:.5f}, "
          f"all {r.pose_loss_all:.5f}  ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
