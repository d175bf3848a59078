"""End-to-end CLI behaviour on tiny inputs: artifacts, determinism, exit codes."""
import numpy as np
import pytest

from rankdehaze.cli import main
from rankdehaze.imgio import read_gray, read_image, write_image
from rankdehaze.synth import make_procedural_images, read_dataset, synthesize_hazy


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthesized dataset, a 1-epoch model and a small forest."""
    root = tmp_path_factory.mktemp("cliws")
    ds = root / "data.rcds"
    model = root / "net.model"
    rfor = root / "trees.rfor"
    assert run("synth", "--procedural", "--images-count", 12, "--patches", 150,
               "--per-patch", 4, "--out", ds, "--seed", 3) == 0
    assert run("train", ds, "--out", model, "--epochs", 1, "--seed", 3) == 0
    assert run("fit-rf", ds, model, "--out", rfor, "--samples", 400,
               "--trees", 8, "--seed", 3) == 0
    return root, ds, model, rfor


def test_synth_writes_expected_count(workspace):
    _, ds, _, _ = workspace
    data = read_dataset(ds)
    assert len(data) == 600
    assert data.provenance["seed"] == 3


def test_synth_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a.rcds", tmp_path / "b.rcds"
    for out in (a, b):
        assert run("synth", "--procedural", "--images-count", 6, "--patches", 40,
                   "--per-patch", 3, "--out", out, "--seed", 9) == 0
    assert a.read_bytes() == b.read_bytes()


def test_synth_empty_dir_exits_2(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    assert run("synth", empty, "--out", tmp_path / "x.rcds") == 2
    assert "no .png or .ppm" in capsys.readouterr().err


def test_train_writes_model_history_sidecar(workspace):
    root, _, model, _ = workspace
    assert model.exists()
    sidecar = root / "net.model.txt"
    assert "rng_seed=3" in sidecar.read_text()
    history = root / "net.model.history.csv"
    lines = history.read_text().strip().splitlines()
    assert len(lines) == 2  # header + 1 epoch


def test_train_byte_identical_reruns(workspace, tmp_path):
    _, ds, _, _ = workspace
    a, b = tmp_path / "a.model", tmp_path / "b.model"
    for out in (a, b):
        assert run("train", ds, "--out", out, "--epochs", 1, "--seed", 11) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_placement_none_is_plain_control(workspace, tmp_path):
    _, ds, _, _ = workspace
    out = tmp_path / "plain.model"
    assert run("train", ds, "--out", out, "--epochs", 1, "--seed", 1,
               "--placement", "none") == 0
    from rankdehaze.network import load_model
    assert load_model(out).placement == "none"


def test_fit_rf_outputs_and_determinism(workspace, tmp_path):
    root, ds, model, rfor = workspace
    assert (root / "trees.rfor.importance.csv").exists()
    again = tmp_path / "again.rfor"
    assert run("fit-rf", ds, model, "--out", again, "--samples", 400,
               "--trees", 8, "--seed", 3) == 0
    assert again.read_bytes() == rfor.read_bytes()


def test_fit_rf_clamps_oversized_samples(workspace, tmp_path, capsys):
    _, ds, model, _ = workspace
    out = tmp_path / "big.rfor"
    assert run("fit-rf", ds, model, "--out", out, "--samples", 10_000,
               "--trees", 4, "--seed", 0) == 0
    assert "using all" in capsys.readouterr().out


def test_dehaze_end_to_end_and_determinism(workspace, tmp_path):
    _, _, model, rfor = workspace
    clear = make_procedural_images(1, size=32, seed=40)[0]
    hazy = synthesize_hazy(clear, 0.5, channel_axis=-1)
    src = tmp_path / "hazy.png"
    write_image(src, hazy)
    out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (out_a, out_b):
        assert run("dehaze", src, model, rfor, out, "--stride", 2,
                   "--emit-transmission") == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert read_image(out_a).shape == (32, 32, 3)
    t_map = read_gray(tmp_path / "a_transmission.png")
    assert t_map.shape == (32, 32)
    assert t_map.min() > 0.0
    airlight = (tmp_path / "a_airlight.txt").read_text().split()
    assert len(airlight) == 3


def test_dehaze_missing_model_exits_2(workspace, tmp_path, capsys):
    _, _, _, rfor = workspace
    img = tmp_path / "img.png"
    write_image(img, np.full((24, 24, 3), 0.5, np.float32))
    code = run("dehaze", img, tmp_path / "missing.model", rfor, tmp_path / "o.png")
    assert code == 2
    assert "missing.model" in capsys.readouterr().err


def test_eval_report_with_oracle_and_noop(workspace, tmp_path, capsys):
    _, _, model, rfor = workspace
    out = tmp_path / "report.csv"
    assert run("eval", model, rfor, "--procedural-cases", 4, "--image-size", 28,
               "--stride", 2, "--out", out, "--seed", 5) == 0
    text = out.read_text()
    assert "oracle" in text and "no-op" in text and "pipeline" in text
    assert "average" in text


def test_eval_cases_dir(workspace, tmp_path):
    _, _, model, rfor = workspace
    cases = tmp_path / "cases"
    sub = cases / "case0"
    sub.mkdir(parents=True)
    write_image(sub / "clear.png", make_procedural_images(1, size=26, seed=50)[0])
    (sub / "meta.txt").write_text("mode=constant\nt=0.6\n")
    out = tmp_path / "r.csv"
    assert run("eval", model, rfor, "--cases", cases, "--stride", 2,
               "--out", out) == 0
    assert "case0" in out.read_text()


def test_eval_metrics_stable_across_reruns(workspace, tmp_path):
    _, _, model, rfor = workspace

    def metric_rows(path):
        import csv
        with open(path) as f:
            rows = list(csv.DictReader(f))
        return [(r["label"], r["case"], r["l1_transmission"], r["l1_image"])
                for r in rows]

    reports = []
    for tag in ("a", "b"):
        out = tmp_path / f"{tag}.csv"
        assert run("eval", model, rfor, "--procedural-cases", 2,
                   "--image-size", 26, "--stride", 2, "--out", out,
                   "--seed", 8) == 0
        reports.append(metric_rows(out))
    assert reports[0] == reports[1]


def test_ablate_smoke(workspace, tmp_path):
    _, ds, _, _ = workspace
    out = tmp_path / "ablate.csv"
    assert run("ablate", "data-size", ds, "--epochs", 1, "--trees", 6,
               "--samples", 300, "--out", out, "--seed", 2) == 0
    text = out.read_text()
    assert "frac-0.5" in text and "frac-1" in text


def test_config_file_supplies_defaults_flags_win(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\npatches=25\nper-patch=2\nseed=6\n")
    out = tmp_path / "with_cfg.rcds"
    assert run("synth", "--procedural", "--images-count", 6, "--config", cfg,
               "--out", out, "--per-patch", 3) == 0
    ds = read_dataset(out)
    assert len(ds) == 75  # 25 patches from config x 3 per-patch from the flag


def test_config_file_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp=9\n")
    assert run("synth", "--procedural", "--config", cfg,
               "--out", tmp_path / "x.rcds") == 2
    assert "unknown config key" in capsys.readouterr().err


def test_dataset_version_mismatch_refused(workspace, tmp_path, capsys):
    _, ds, _, _ = workspace
    blob = bytearray(ds.read_bytes())
    blob[4] = 9
    bad = tmp_path / "future.rcds"
    bad.write_bytes(bytes(blob))
    assert run("train", bad, "--out", tmp_path / "m.model", "--epochs", 1) == 2
    assert "version" in capsys.readouterr().err


def test_bad_flag_exits_2():
    assert run("train", "--no-such-flag") == 2


def test_threads_env_fallback(monkeypatch):
    from rankdehaze.cli import _threads_default
    monkeypatch.setenv("RANKDEHAZE_THREADS", "5")
    assert _threads_default() == 5
    monkeypatch.setenv("RANKDEHAZE_THREADS", "oops")
    from rankdehaze.cli import UserError
    with pytest.raises(UserError):
        _threads_default()


def test_internal_error_exits_1(workspace, tmp_path, monkeypatch, capsys):
    _, ds, _, _ = workspace
    import rankdehaze.cli as cli

    def boom(args):
        raise RuntimeError("internal")

    monkeypatch.setattr(cli, "cmd_train", boom)
    code = main(["train", str(ds), "--out", str(tmp_path / "x.model")])
    assert code == 1
    assert "internal" in capsys.readouterr().err
