#!/usr/bin/env python3
"""Run the training-time comparisons (ranking layer on/off, its position,
feature tap, regressor family, end-to-end head, training-set size) on a
procedural corpus and print one table per comparison.

Each comparison retrains its arms from identical seeds, so rows differ in
exactly the varied factor. Expect a few minutes per comparison at the
defaults; effects shrink at small training budgets but their ordering is
usually preserved.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rankdehaze.evalbench import ABLATIONS, AblationConfig, run_ablation
from rankdehaze.synth import (build_dataset, make_procedural_images,
                              sample_clear_patches)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=[],
                    help=f"comparisons to run (default: all of {', '.join(ABLATIONS)})")
    ap.add_argument("--out", type=Path, default=Path("out/comparisons"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patches", type=int, default=800)
    ap.add_argument("--per-patch", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--trees", type=int, default=40)
    ap.add_argument("--samples", type=int, default=3000)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()
    unknown = set(args.names) - set(ABLATIONS)
    if unknown:
        ap.error(f"unknown comparison(s) {sorted(unknown)}; pick from {ABLATIONS}")
    args.out.mkdir(parents=True, exist_ok=True)

    images = make_procedural_images(160, size=64, seed=args.seed + 11)
    patches = sample_clear_patches(images, args.patches, rng=args.seed + 12)
    dataset = build_dataset(patches, per_patch=args.per_patch, rng=args.seed + 13)
    print(f"corpus: {len(dataset)} samples\n")

    config = AblationConfig(dataset=dataset, epochs=args.epochs, seed=args.seed,
                            forest_trees=args.trees, forest_samples=args.samples,
                            threads=args.threads)
    for name in args.names or ABLATIONS:
        print(f"== {name} ==")
        report = run_ablation(name, config)
        print(report.to_text())
        report.to_csv(args.out / f"{name}.csv")
        print()


if __name__ == "__main__":
    main()
