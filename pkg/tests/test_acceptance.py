"""Acceptance gate. One test per shipping criterion, each printing a
pass/fail line; the desk-scale fixture below trains both network arms on
three seeds and everything heavy reuses it.

Criteria:
 1. ranking layer equals the stable-sort / inverse-permutation oracles on
    1,000 random maps, under 5 s
 2. full-network analytic gradients match central differences (float64,
    step 1e-4, rel err <= 1e-3) on 10 distinct-valued patches, for the
    ranked network and the plain control, under 2 min
 3. scattering-model algebra: synthesis -> recovery round trip, white
    balance identity, recovery fixed point, bin boundaries, learning-rate
    schedule values, unit exposure at equal luminance
 4. 20k patches / 10 epochs / batch 64: held-out top-1 >= 40% (chance 10%),
    final-epoch loss below first-epoch loss, under 15 min
 5. ranked features beat the plain-CNN control on held-out transmission L1:
    median over 3 seeds, >= 5% relative margin
 6. full pipeline beats the no-op baseline on all 10 synthesized cases,
    oracle recovery scores <= 1e-3, mean pipeline L1-in-image <= 0.15
 7. forest MAE <= every baseline regressor MAE on the same features
 8. CLI reruns with identical seeds produce byte-identical artifacts
"""
import time

import numpy as np
import pytest

from rankdehaze.cli import main as cli_main
from rankdehaze.evalbench import (benchmark_methods, l1_image,
                                  make_default_cases, noop_method,
                                  oracle_method, pipeline_method)
from rankdehaze.forest import ForestConfig, fit_baseline, fit_forest
from rankdehaze.gradcheck import grad_check
from rankdehaze.imgio import write_image
from rankdehaze.network import (bin_label, build_network, split_validation,
                                train)
from rankdehaze.nn import (RankCorrespondence, TrainConfig, lr_at,
                           rank_backward, rank_forward)
from rankdehaze.pipeline import (DehazeOptions, exposure_adjust, recover,
                                 white_balance)
from rankdehaze.synth import (build_dataset, make_procedural_images,
                              sample_clear_patches, synthesize_hazy)

pytestmark = pytest.mark.slow

DESK_SEEDS = (0, 1, 2)
DESK_EPOCHS = 10
DESK_SAMPLES = 20_000


def check(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[{status}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _batched_features(net, x, batch=1024):
    return np.concatenate([net.features(x[s:s + batch])
                           for s in range(0, len(x), batch)])


@pytest.fixture(scope="module")
def desk():
    """Criterion-4 conditions, both arms, three seeds; everything downstream
    of training reuses these models."""
    images = make_procedural_images(200, size=64, seed=11)
    patches = sample_clear_patches(images, 2000, rng=12)
    dataset = build_dataset(patches, per_patch=10, rng=13)
    assert len(dataset) == DESK_SAMPLES
    x = np.ascontiguousarray(dataset.hazy, dtype=np.float32)
    out = {"dataset": dataset, "arms": {}, "train_seconds": {}, "regress": {}}
    for seed in DESK_SEEDS:
        train_idx, val_idx = split_validation(len(dataset), seed, 0.05)
        for placement in ("pool1", "none"):
            net = build_network(placement, seed=seed)
            config = TrainConfig(epochs=DESK_EPOCHS, rng_seed=seed)
            t0 = time.perf_counter()
            net, history = train(net, dataset, config)
            out["train_seconds"][(placement, seed)] = time.perf_counter() - t0
            feats_tr = _batched_features(net, x[train_idx])
            feats_va = _batched_features(net, x[val_idx])
            pick = np.random.default_rng(seed).choice(len(feats_tr), size=4000,
                                                      replace=False)
            forest = fit_forest(feats_tr[pick], dataset.t[train_idx][pick],
                                ForestConfig(n_trees=60, seed=seed), threads=2)
            l1 = float(np.abs(forest.predict(feats_va)
                              - dataset.t[val_idx]).mean())
            out["arms"][(placement, seed)] = {
                "net": net, "forest": forest, "history": history, "l1": l1}
            if placement == "pool1" and seed == 0:
                out["regress"] = {"feats_fit": feats_tr[pick],
                                  "t_fit": dataset.t[train_idx][pick],
                                  "feats_va": feats_va,
                                  "t_va": dataset.t[val_idx]}
    return out


def test_criterion_1_ranking_layer_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(1000):
        fmap = rng.standard_normal((8, 8)).astype(np.float32)
        ranked, corr = rank_forward(fmap)
        flat = fmap.reshape(-1)
        order = np.argsort(flat, kind="stable")  # oracle: stable sort
        assert np.array_equal(ranked.reshape(-1), flat[order])
        assert np.array_equal(corr.perm, order)
        assert RankCorrespondence(corr.perm).is_valid()
        grad = rng.standard_normal(64).astype(np.float32)
        routed = rank_backward(grad, corr)
        inverse = np.empty(64, dtype=int)  # oracle: inverse permutation
        inverse[order] = np.arange(64)
        assert np.array_equal(routed, grad[inverse])
    elapsed = time.perf_counter() - t0
    check(1, elapsed < 5.0,
          f"1000 maps match sort/inverse-permutation oracles in {elapsed:.2f}s (< 5s)")


def test_criterion_2_gradient_fidelity():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = {"pool1": 0.0, "none": 0.0}
    for placement in ("pool1", "none"):
        model = build_network(placement, seed=3)
        for trial in range(10):
            chans = [rng.permutation(np.linspace(0.0, 1.0, 400)).reshape(20, 20)
                     for _ in range(3)]
            patch = np.stack(chans).astype(np.float32)
            report = grad_check(model, patch, tolerance=1e-3, step=1e-4,
                                true_bin=int(rng.integers(1, 11)),
                                max_coords_per_tensor=12, seed=trial)
            worst[placement] = max(worst[placement], report.max_rel_err)
            assert report.passed, report.summary()
    elapsed = time.perf_counter() - t0
    check(2, elapsed < 120.0 and max(worst.values()) <= 1e-3,
          f"max rel err ranked {worst['pool1']:.2e}, control {worst['none']:.2e} "
          f"(<= 1e-3) in {elapsed:.1f}s (< 2 min)")


def test_criterion_3_algebraic_identities():
    rng = np.random.default_rng(5)
    clear = rng.random((24, 30, 3)).astype(np.float32)
    light = np.array([0.92, 0.87, 0.8])
    t_map = (0.05 + 0.93 * rng.random((24, 30))).astype(np.float64)

    hazy = synthesize_hazy(clear, t_map, light, channel_axis=-1)
    round_trip = float(np.abs(
        recover(hazy, light, t_map.astype(np.float32), clip=False) - clear).max())

    balanced = white_balance(hazy, light)
    unit_hazy = synthesize_hazy(white_balance(clear, light), t_map,
                                (1.0, 1.0, 1.0), channel_axis=-1)
    wb_identity = float(np.abs(balanced - unit_hazy).max())

    at_light = np.tile(light, (6, 6, 1)).astype(np.float32)
    fixed_point = float(np.abs(
        recover(at_light, light, np.full((6, 6), 0.3, np.float32)) - at_light).max())

    bins_ok = (bin_label(0.1).j == 1 and bin_label(1.0).j == 10
               and bin_label(0.1000001).j == 2 and bin_label(0.05).j == 1)

    config = TrainConfig()
    lr0_err = abs(lr_at(0, config) - 0.01)
    lr10k_err = abs(lr_at(10_000, config) - 0.01 * 2.0 ** -0.75)

    img = rng.random((9, 9, 3)).astype(np.float32)
    _, lam = exposure_adjust(img, img)
    lam_err = abs(lam - 1.0)

    ok = (round_trip < 1e-6 and wb_identity < 1e-6 and fixed_point < 1e-6
          and bins_ok and lr0_err < 1e-9 and lr10k_err < 1e-9 and lam_err < 1e-9)
    check(3, ok,
          f"round trip {round_trip:.2e}, white balance {wb_identity:.2e}, "
          f"fixed point {fixed_point:.2e} (< 1e-6); bins ok={bins_ok}; "
          f"lr errs {lr0_err:.1e}/{lr10k_err:.1e}, lambda err {lam_err:.1e} (< 1e-9)")


def test_criterion_4_training_sanity(desk):
    history = desk["arms"][("pool1", 0)]["history"]
    seconds = desk["train_seconds"][("pool1", 0)]
    accuracy = history[-1].val_accuracy
    improved = history[-1].mean_loss < history[0].mean_loss
    # soft convergence report: epochs to reach half the initial loss, both arms
    for placement in ("pool1", "none"):
        hist = desk["arms"][(placement, 0)]["history"]
        half = next((row.epoch for row in hist
                     if row.mean_loss < 0.5 * hist[0].mean_loss), None)
        print(f"  epochs to half initial loss ({placement}): {half}")
    check(4, accuracy >= 0.40 and improved and seconds < 900.0,
          f"20k x {DESK_EPOCHS} epochs: top-1 {accuracy:.1%} (>= 40%), "
          f"loss {history[0].mean_loss:.3f} -> {history[-1].mean_loss:.3f}, "
          f"{seconds:.0f}s (< 15 min)")


def test_criterion_5_ranking_ablation(desk):
    ranked = [desk["arms"][("pool1", s)]["l1"] for s in DESK_SEEDS]
    plain = [desk["arms"][("none", s)]["l1"] for s in DESK_SEEDS]
    med_ranked = float(np.median(ranked))
    med_plain = float(np.median(plain))
    margin = (med_plain - med_ranked) / med_plain
    check(5, med_ranked < med_plain and margin >= 0.05,
          f"held-out transmission L1 median: ranked {med_ranked:.4f} vs "
          f"plain {med_plain:.4f}, margin {margin:.1%} (>= 5%); "
          f"per-seed ranked {np.round(ranked, 4).tolist()}, "
          f"plain {np.round(plain, 4).tolist()}")


def test_criterion_6_end_to_end_improvement(desk):
    arm = desk["arms"][("pool1", 0)]
    clears = make_procedural_images(10, size=64, seed=300, highlight_frac=1.0)
    cases = make_default_cases(clears, n_cases=10)
    methods = {"no-op": noop_method, "oracle": oracle_method,
               "pipeline": pipeline_method(arm["net"], arm["forest"],
                                           DehazeOptions(threads=2))}
    report = benchmark_methods(cases, methods)
    assert not any(row.failed for row in report.rows)
    rows = {(r.label, r.case): r for r in report.rows}
    beats_noop = all(rows[("pipeline", c.name)].l1_image
                     < rows[("no-op", c.name)].l1_image for c in cases)
    oracle_worst = max(rows[("oracle", c.name)].l1_image for c in cases)
    mean_l1 = report.average("pipeline")[1]
    noop_l1 = report.average("no-op")[1]
    check(6, beats_noop and oracle_worst <= 1e-3 and mean_l1 <= 0.15,
          f"pipeline beats no-op on all 10 cases={beats_noop}; mean L1 "
          f"{mean_l1:.4f} (<= 0.15, no-op {noop_l1:.4f}); "
          f"oracle worst {oracle_worst:.2e} (<= 1e-3)")


def test_criterion_7_regressor_ordering(desk):
    reg = desk["regress"]
    forest = desk["arms"][("pool1", 0)]["forest"]
    forest_mae = float(np.abs(forest.predict(reg["feats_va"]) - reg["t_va"]).mean())
    maes = {"forest": forest_mae}
    for kind in ("linear", "logistic-link", "kernel"):
        model = fit_baseline(kind, reg["feats_fit"], reg["t_fit"], seed=0)
        maes[kind] = float(np.abs(model.predict(reg["feats_va"]) - reg["t_va"]).mean())
    ok = all(forest_mae <= maes[k] for k in ("linear", "logistic-link", "kernel"))
    check(7, ok, "MAE " + ", ".join(f"{k} {v:.4f}" for k, v in maes.items())
          + " (forest lowest)")


def test_criterion_8_cli_determinism(tmp_path):
    outs = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        ds, model, rfor, png = (d / "d.rcds", d / "m.model", d / "f.rfor",
                                d / "out.png")
        assert cli_main(["synth", "--procedural", "--images-count", "10",
                         "--patches", "120", "--per-patch", "4", "--seed", "21",
                         "--out", str(ds)]) == 0
        assert cli_main(["train", str(ds), "--out", str(model), "--epochs", "1",
                         "--seed", "21"]) == 0
        assert cli_main(["fit-rf", str(ds), str(model), "--out", str(rfor),
                         "--samples", "300", "--trees", "6", "--seed", "21",
                         "--threads", "2"]) == 0
        hazy = synthesize_hazy(make_procedural_images(1, size=32, seed=22)[0],
                               0.55, channel_axis=-1)
        src = d / "hazy.png"
        write_image(src, hazy)
        assert cli_main(["dehaze", str(src), str(model), str(rfor), str(png),
                         "--stride", "2", "--emit-transmission",
                         "--threads", "2"]) == 0
        outs[tag] = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
    identical = set(outs["a"]) == set(outs["b"]) and all(
        outs["a"][name] == outs["b"][name] for name in outs["a"])
    check(8, identical,
          f"synth/train/fit-rf/dehaze reruns byte-identical across "
          f"{len(outs['a'])} artifacts")
