"""Command-line entry point.

Subcommands: synth, train, fit-rf, dehaze, eval, ablate. Every option can
also come from a key=value config file (--config); explicit flags win, and
unknown keys in the file are rejected. All randomness derives from --seed,
so a rerun with the same flags and inputs is byte-identical.

Exit codes: 0 success, 1 internal failure, 2 bad user input.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import evalbench, forest, imgio, network, pipeline, synth
from .nn import TrainConfig


class UserError(Exception):
    pass


def _threads_default() -> int:
    env = os.environ.get("RANKDEHAZE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UserError(f"RANKDEHAZE_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UserError(f"cannot read config file: {exc}")
    for ln, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UserError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Dests of options literally present in argv (abbreviations are disabled)."""
    by_option = {}
    for action in parser._actions:
        for opt in action.option_strings:
            by_option[opt] = action.dest
    explicit = set()
    for token in argv:
        dest = by_option.get(token.split("=", 1)[0])
        if dest is not None:
            explicit.add(dest)
    return explicit


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser,
                  explicit: set[str]) -> None:
    """Fill in values from --config for flags not given on the command line."""
    if not getattr(args, "config", None):
        return
    actions = {a.dest: a for a in parser._actions
               if a.option_strings and a.dest not in ("help", "config")}
    for key, raw in _read_config_file(args.config).items():
        if key not in actions:
            raise UserError(f"unknown config key {key!r} "
                            f"(valid: {', '.join(sorted(actions))})")
        if key in explicit:
            continue  # flags win
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes")
        else:
            try:
                value = (action.type or str)(raw)
            except ValueError:
                raise UserError(f"config key {key!r}: cannot parse {raw!r}")
            if action.choices is not None and value not in action.choices:
                raise UserError(f"config key {key!r}: {raw!r} is not one of "
                                f"{sorted(action.choices)}")
        setattr(args, key, value)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{what} not found: {path}")
    return p


def _seed_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.procedural:
        images = synth.make_procedural_images(args.images_count, size=args.image_size,
                                              seed=args.seed)
        sources = [f"procedural:{args.images_count}x{args.image_size}"]
    else:
        if not args.images:
            raise UserError("give an images directory or --procedural")
        root = Path(args.images)
        if not root.is_dir():
            raise UserError(f"images directory not found: {args.images}")
        paths = sorted(p for p in root.iterdir()
                       if p.suffix.lower() in (".png", ".ppm"))
        if not paths:
            raise UserError(f"no .png or .ppm images in {args.images}")
        images, sources = [], []
        for p in paths:
            try:
                images.append(imgio.read_image(p))
                sources.append(p.name)
            except Exception as exc:
                raise UserError(f"cannot read image {p}: {exc}")
    patches = synth.sample_clear_patches(images, args.patches,
                                         rng=_seed_rng(args.seed, 1))
    ds = synth.build_dataset(patches, per_patch=args.per_patch,
                             rng=_seed_rng(args.seed, 2),
                             provenance={"sources": sources, "seed": args.seed})
    synth.write_dataset(args.out, ds)
    hist = ds.bin_histogram()
    print(f"wrote {args.out}: {len(ds)} samples "
          f"({len(patches)} clear patches x {args.per_patch})")
    print("bin histogram:", " ".join(str(int(c)) for c in hist))
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = TrainConfig(initial_lr=args.lr, momentum=args.momentum,
                         batch_size=args.batch, epochs=args.epochs,
                         rng_seed=args.seed)
    net = network.build_network(args.placement, seed=args.seed)
    t0 = time.perf_counter()
    net, history = network.train(net, dataset, config, log=print)
    print(f"trained in {time.perf_counter() - t0:.1f}s "
          f"({net.n_params()} parameters, placement={args.placement})")
    network.save_model(args.out, net, config)
    history_path = args.history or f"{args.out}.history.csv"
    network.write_history_csv(history_path, history)
    print(f"wrote {args.out} and {history_path}")
    return 0


def _load_dataset(path: str) -> synth.PatchDataset:
    _require_file(path, "dataset")
    try:
        return synth.read_dataset(path)
    except synth.DatasetFormatError as exc:
        raise UserError(str(exc))


def _load_models(model_path: str, forest_path: str):
    _require_file(model_path, "model file")
    _require_file(forest_path, "forest file")
    try:
        net = network.load_model(model_path)
    except network.ModelFormatError as exc:
        raise UserError(str(exc))
    try:
        rf = forest.load_forest(forest_path)
    except forest.ForestFormatError as exc:
        raise UserError(str(exc))
    return net, rf


def cmd_fit_rf(args) -> int:
    dataset = _load_dataset(args.dataset)
    _require_file(args.model, "model file")
    try:
        net = network.load_model(args.model)
    except network.ModelFormatError as exc:
        raise UserError(str(exc))
    n = len(dataset)
    n_fit = args.samples
    if n_fit > n:
        print(f"note: --samples {n_fit} exceeds dataset size {n}; using all samples")
        n_fit = n
    pick = np.sort(_seed_rng(args.seed, 3).choice(n, size=n_fit, replace=False))
    x = dataset.hazy[pick]
    feats = np.concatenate([net.features(x[s:s + 1024])
                            for s in range(0, len(x), 1024)])
    cfg = forest.ForestConfig(n_trees=args.trees, seed=args.seed)
    t0 = time.perf_counter()
    model = forest.fit_forest(feats, dataset.t[pick], cfg, threads=args.threads)
    print(f"fit {args.trees} trees on {n_fit} samples in {time.perf_counter() - t0:.1f}s")
    forest.save_forest(args.out, model)
    forest.write_importance_csv(f"{args.out}.importance.csv", model.importance)
    print(f"wrote {args.out} and {args.out}.importance.csv")
    return 0


def cmd_dehaze(args) -> int:
    _require_file(args.image, "input image")
    net, rf = _load_models(args.model, args.forest)
    try:
        image = imgio.read_image(args.image)
    except Exception as exc:
        raise UserError(f"cannot read image {args.image}: {exc}")
    options = pipeline.DehazeOptions(gf_radius=args.radius, gf_eps=args.eps,
                                     stride=args.stride, threads=args.threads)
    t0 = time.perf_counter()
    result = pipeline.dehaze(image, net, rf, options)
    print(f"dehazed {image.shape[1]}x{image.shape[0]} in "
          f"{time.perf_counter() - t0:.1f}s (exposure x{result.exposure:.3f}, "
          f"A={np.round(result.atmospheric_light, 4).tolist()})")
    imgio.write_image(args.out, result.output)
    print(f"wrote {args.out}")
    if args.emit_transmission:
        stem = Path(args.out)
        t_path = stem.with_name(stem.stem + "_transmission.png")
        a_path = stem.with_name(stem.stem + "_airlight.txt")
        imgio.write_gray16(t_path, result.transmission)
        a_path.write_text(" ".join(f"{v:.6f}" for v in result.atmospheric_light) + "\n")
        print(f"wrote {t_path} and {a_path}")
    return 0


def _load_cases_dir(root: Path) -> list[evalbench.EvalCase]:
    """Case bundle convention: one subdirectory per case holding clear.png
    (or clear.ppm), optional disparity.png, and meta.txt with key=value lines
    (mode=constant|disparity, t=<value> for constant mode)."""
    cases = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        clear_path = next((sub / n for n in ("clear.png", "clear.ppm")
                           if (sub / n).is_file()), None)
        if clear_path is None:
            raise UserError(f"case {sub.name}: no clear.png or clear.ppm")
        meta_path = sub / "meta.txt"
        if not meta_path.is_file():
            raise UserError(f"case {sub.name}: missing meta.txt")
        meta = {}
        for raw in meta_path.read_text().splitlines():
            line = raw.strip()
            if line and not line.startswith("#") and "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
        clear = imgio.read_image(clear_path)
        mode = meta.get("mode", "constant")
        try:
            if mode == "constant":
                case = evalbench.make_eval_case(clear, "constant",
                                                t=float(meta.get("t", "0.6")),
                                                name=sub.name)
            elif mode == "disparity":
                dpath = sub / "disparity.png"
                if not dpath.is_file():
                    raise UserError(f"case {sub.name}: disparity mode needs disparity.png")
                d = np.clip(imgio.read_gray(dpath), np.nextafter(0.0, 1.0), 1.0)
                case = evalbench.make_eval_case(clear, "disparity", disparity=d,
                                                name=sub.name)
            else:
                raise UserError(f"case {sub.name}: unknown mode {mode!r}")
        except ValueError as exc:
            raise UserError(f"case {sub.name}: {exc}")
        cases.append(case)
    if not cases:
        raise UserError(f"no case subdirectories in {root}")
    return cases


def cmd_eval(args) -> int:
    net, rf = _load_models(args.model, args.forest)
    if args.cases:
        root = Path(args.cases)
        if not root.is_dir():
            raise UserError(f"cases directory not found: {args.cases}")
        cases = _load_cases_dir(root)
    else:
        clears = synth.make_procedural_images(args.procedural_cases,
                                              size=args.image_size, seed=args.seed,
                                              highlight_frac=1.0)
        cases = evalbench.make_default_cases(clears, n_cases=args.procedural_cases)
    options = pipeline.DehazeOptions(stride=args.stride, threads=args.threads)
    methods = {
        "no-op": evalbench.noop_method,
        "oracle": evalbench.oracle_method,
        "pipeline": evalbench.pipeline_method(net, rf, options),
    }
    report = evalbench.benchmark_methods(cases, methods)
    print(report.to_text())
    report.to_csv(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = evalbench.AblationConfig(dataset=dataset, epochs=args.epochs,
                                      batch_size=args.batch, seed=args.seed,
                                      forest_trees=args.trees,
                                      forest_samples=args.samples,
                                      threads=args.threads)
    report = evalbench.run_ablation(args.name, config)
    print(report.to_text())
    report.to_csv(args.out)
    print(f"wrote {args.out}")
    return 0


# --- wiring ----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; explicit flags win")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker threads (env RANKDEHAZE_THREADS)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    top = argparse.ArgumentParser(prog="rankdehaze", allow_abbrev=False,
                                  description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def add_parser(name, **kwargs):
        parser = sub.add_parser(name, allow_abbrev=False, **kwargs)
        subparsers[name] = parser
        return parser

    p = add_parser("synth", help="synthesize a hazy-patch training dataset")
    p.add_argument("images", nargs="?", help="directory of clear .png/.ppm images")
    p.add_argument("--procedural", action="store_true",
                   help="use the built-in procedural clear images")
    p.add_argument("--images-count", type=int, default=200,
                   help="number of procedural images")
    p.add_argument("--image-size", type=int, default=64,
                   help="procedural image side length")
    p.add_argument("--patches", type=int, default=2000, help="clear patches to sample")
    p.add_argument("--per-patch", type=int, default=10,
                   help="hazy versions per clear patch")
    p.add_argument("--out", required=True, help="output .rcds dataset file")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = add_parser("train", help="train the transmission-bin classifier")
    p.add_argument("dataset", help="input .rcds dataset")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--placement", default="pool1", choices=network.PLACEMENTS,
                   help="ranking layer position; 'none' trains the plain-CNN control")
    p.add_argument("--history", help="training history CSV (default <out>.history.csv)")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = add_parser("fit-rf", help="fit the transmission regression forest")
    p.add_argument("dataset", help="input .rcds dataset")
    p.add_argument("model", help="trained network model file")
    p.add_argument("--out", required=True, help="output .rfor forest file")
    p.add_argument("--samples", type=int, default=10000,
                   help="training samples drawn from the dataset")
    p.add_argument("--trees", type=int, default=200)
    _add_common(p)
    p.set_defaults(fn=cmd_fit_rf)

    p = add_parser("dehaze", help="dehaze a single image")
    p.add_argument("image", help="input hazy image (.png or .ppm)")
    p.add_argument("model", help="trained network model file")
    p.add_argument("forest", help="trained forest file")
    p.add_argument("out", help="output image path")
    p.add_argument("--emit-transmission", action="store_true",
                   help="also write the 16-bit transmission map and the "
                        "estimated atmospheric light")
    p.add_argument("--stride", type=int, default=1,
                   help="transmission sampling stride (speed knob)")
    p.add_argument("--radius", type=int, default=40, help="guided filter radius")
    p.add_argument("--eps", type=float, default=1e-3,
                   help="guided filter regularization")
    _add_common(p)
    p.set_defaults(fn=cmd_dehaze)

    p = add_parser("eval", help="benchmark the pipeline on synthesized cases")
    p.add_argument("model", help="trained network model file")
    p.add_argument("forest", help="trained forest file")
    p.add_argument("--cases", help="directory of case bundles "
                                   "(clear.png, optional disparity.png, meta.txt)")
    p.add_argument("--procedural-cases", type=int, default=10,
                   help="number of generated cases when --cases is not given")
    p.add_argument("--image-size", type=int, default=64,
                   help="generated case image side length")
    p.add_argument("--stride", type=int, default=2,
                   help="transmission sampling stride during evaluation")
    p.add_argument("--out", required=True, help="output report CSV")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = add_parser("ablate", help="run one training-time comparison")
    p.add_argument("name", choices=evalbench.ABLATIONS)
    p.add_argument("dataset", help="input .rcds dataset")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--trees", type=int, default=60, help="forest size per arm")
    p.add_argument("--samples", type=int, default=4000,
                   help="regressor training samples per arm")
    p.add_argument("--out", required=True, help="output report CSV")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)
    return top, subparsers


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        top, subparsers = build_parser()
        args = top.parse_args(argv)
        sub = subparsers[args.command]
        _apply_config(args, sub, _explicit_dests(sub, list(argv)))
        return args.fn(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
