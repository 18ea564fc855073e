"""Per-step wall time of SATTS and SSA on the same model and batches."""
import argparse

from satts.adapt import batch_stream
from satts.bench import ExperimentConfig, prepare, step_timing


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=64)
    args = ap.parse_args()
    pre = prepare(ExperimentConfig())
    batches = batch_stream(pre.data["target-test"].batch().inputs, args.batch_size, seed=0)
    t = step_timing(pre.model, pre.artifact, batches, runs=args.runs)
    print(f"satts\t{1e3 * t['satts']:.3f} ms\nssa\t{1e3 * t['ssa']:.3f} ms\nratio\t{t['satts'] / t['ssa']:.2f}")


if __name__ == "__main__":
    main()
