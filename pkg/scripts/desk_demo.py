#!/usr/bin/env python3
"""End-to-end desk-scale run: synthesize a corpus, train the network, fit the
forest, then dehaze a held-out synthetic scene and report image error.

Writes everything under --out (dataset, model, forest, images, report).
Small by default (~2 min); pass --patches 2000 --epochs 10 for the full
desk-scale configuration.
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from rankdehaze.evalbench import l1_image
from rankdehaze.forest import ForestConfig, fit_forest, save_forest
from rankdehaze.imgio import write_gray16, write_image
from rankdehaze.network import build_network, save_model, train, write_history_csv
from rankdehaze.nn import TrainConfig
from rankdehaze.pipeline import DehazeOptions, dehaze
from rankdehaze.synth import (build_dataset, make_procedural_images,
                              sample_clear_patches, synthesize_hazy, write_dataset)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("out/desk_demo"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patches", type=int, default=600)
    ap.add_argument("--per-patch", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--trees", type=int, default=40)
    ap.add_argument("--placement", default="pool1")
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    print("== synthesizing corpus ==")
    images = make_procedural_images(120, size=64, seed=args.seed + 11)
    patches = sample_clear_patches(images, args.patches, rng=args.seed + 12)
    dataset = build_dataset(patches, per_patch=args.per_patch, rng=args.seed + 13)
    write_dataset(args.out / "train.rcds", dataset)
    print(f"{len(dataset)} samples, bin histogram {dataset.bin_histogram().tolist()}")

    print("== training ==")
    net = build_network(args.placement, seed=args.seed)
    config = TrainConfig(epochs=args.epochs, rng_seed=args.seed)
    t0 = time.perf_counter()
    net, history = train(net, dataset, config, log=print)
    print(f"{time.perf_counter() - t0:.0f}s")
    save_model(args.out / "net.model", net, config)
    write_history_csv(args.out / "history.csv", history)

    print("== fitting forest ==")
    x = dataset.hazy
    feats = np.concatenate([net.features(x[s:s + 1024])
                            for s in range(0, len(x), 1024)])
    n_fit = min(4000, len(feats))
    pick = np.random.default_rng(args.seed).choice(len(feats), n_fit, replace=False)
    forest = fit_forest(feats[pick], dataset.t[pick],
                        ForestConfig(n_trees=args.trees, seed=args.seed),
                        threads=args.threads)
    save_forest(args.out / "trees.rfor", forest)

    print("== dehazing a held-out scene ==")
    clear = make_procedural_images(1, size=96, seed=args.seed + 99,
                                   highlight_frac=1.0)[0]
    hazy = synthesize_hazy(clear, 0.45, channel_axis=-1)
    write_image(args.out / "clear.png", clear)
    write_image(args.out / "hazy.png", hazy)
    result = dehaze(hazy, net, forest, DehazeOptions(threads=args.threads))
    write_image(args.out / "dehazed.png", result.output)
    write_gray16(args.out / "transmission.png", result.transmission)
    print(f"A = {np.round(result.atmospheric_light, 3).tolist()}, "
          f"exposure x{result.exposure:.3f}")
    print(f"L1 hazy vs clear:    {l1_image(hazy, clear):.4f}")
    print(f"L1 dehazed vs clear: {l1_image(result.output, clear):.4f}")


if __name__ == "__main__":
    main()
