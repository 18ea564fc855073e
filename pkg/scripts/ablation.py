"""Component ablation (alignment, + source risk, + IWV) on the largest-gap bump task."""
import argparse

import numpy as np

from satts.bench import GAP_LEVELS, ExperimentConfig, component_ablation, gap_task
from satts.tasks import TaskConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--alpha-mode", choices=("scaled", "weighted"), default="weighted")
    args = ap.parse_args()
    cfg = ExperimentConfig(task=gap_task(max(GAP_LEVELS), TaskConfig()), seeds=args.seeds,
                           model_seed=args.model_seed)
    cfg.adapt.alpha_mode = args.alpha_mode
    rows = component_ablation(cfg)
    print("variant\trmse\trmse_std")
    for name, v in rows.items():
        print(f"{name}\t{np.mean(v):.5f}\t{np.std(v, ddof=1):.5f}")


if __name__ == "__main__":
    main()
