import logging

import numpy as np
import pytest

import cli
from cli import VERSION_TEXT, main, resolve_threads
from datasetkit import read_image, read_manifest, read_mask, write_image
from trainer import EvalReport


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)


@pytest.fixture
def dataset(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path / "data"), "--samples", "8", "--side", "16",
                 "--seed", "2"]) == 0
    return tmp_path / "data" / "manifest.txt"


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["synth", "--out-dir", "x", "--bogus"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert VERSION_TEXT in out and "MBNET1" in out and "MBMANIFEST 1" in out


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max_rel_err=") and "PASS" in out


def test_synth_and_validate(dataset, capsys):
    capsys.readouterr()
    assert len(read_manifest(dataset)) == 8
    assert main(["validate", "--manifest", str(dataset), "--require-masks", "--size", "16", "--stats"]) == 0
    out = capsys.readouterr().out
    assert "DATASET VALIDATION REPORT" in out and "mean_foreground" in out


def test_validate_fails_on_broken_records(dataset):
    (dataset.parent / "images" / "000003.ppm").write_bytes(b"broken")
    assert main(["validate", "--manifest", str(dataset)]) == 1


def test_config_file_supplies_defaults(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("samples=3\nside=12\n", encoding="utf-8")
    assert main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "a")]) == 0
    assert len(read_manifest(tmp_path / "a" / "manifest.txt")) == 3
    assert main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "b"), "--samples", "5"]) == 0
    assert len(read_manifest(tmp_path / "b" / "manifest.txt")) == 5


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    config = tmp_path / "run.conf"
    config.write_text("samples=3\nwidth=9\n", encoding="utf-8")
    assert main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "a")]) == 2
    assert "unknown key 'width'" in capsys.readouterr().err


def test_segment_single_image(tmp_path, capsys):
    image = np.full((8, 8, 3), 0.1)
    image[2:6, 2:6] = [0.9, 0.8, 0.9]
    write_image(tmp_path / "img.ppm", image)
    assert main(["segment", "--input", str(tmp_path / "img.ppm"), "--output", str(tmp_path / "mask.pgm"),
                 "--seeds", "4"]) == 0
    mask = read_mask(tmp_path / "mask.pgm")
    assert mask.sum() == 16 and mask[2:6, 2:6].all()
    assert "foreground_fraction=0.2500" in capsys.readouterr().out


def test_segment_needs_paths():
    assert main(["segment"]) == 1


def test_binarize(tmp_path):
    write_image(tmp_path / "img.ppm", np.array([[[0.2, 0.6, 0.5]]]))
    assert main(["binarize", "--input", str(tmp_path / "img.ppm"), "--output", str(tmp_path / "bin.ppm")]) == 0
    np.testing.assert_array_equal(read_image(tmp_path / "bin.ppm"), [[[0.0, 1.0, 1.0]]])


def test_train_eval_and_attack(dataset, tmp_path, capsys):
    model = tmp_path / "model.mbnet"
    assert main(["train", "--manifest", str(dataset), "--out", str(model), "--epochs", "1",
                 "--batch-size", "4", "--log", str(tmp_path / "log.csv")]) == 0
    assert model.read_bytes().startswith(b"MBNET1\n")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,loss,accuracy"

    report = tmp_path / "report.txt"
    assert main(["eval", "--model", str(model), "--manifest", str(dataset), "--data", "X_FG",
                 "--training", "N", "--steps", "2", "--out", str(report)]) == 0
    loaded = EvalReport.load(report)
    assert loaded.samples == 8 and loaded.config["training"] == "N"

    capsys.readouterr()
    assert main(["attack", "--model", str(model), "--manifest", str(dataset), "--data", "X_FG",
                 "--steps", "2", "--out-dir", str(tmp_path / "adv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("natural_acc=") and " adv_acc=" in lines[0]
    assert lines[1].startswith("foreground_share=")
    adversarial = read_manifest(tmp_path / "adv" / "manifest.txt")
    assert len(adversarial) == 8 and adversarial.has_masks
    assert all(r.mask_path.startswith("masks/") for r in adversarial.records)
    assert read_mask(tmp_path / "adv" / adversarial.records[0].mask_path).any()


def test_training_failure_exits_one(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "m.mbnet")]) == 1


def test_eval_table(tmp_path, capsys):
    paths = []
    for data, training, natural, pgd in [("X", "N", 0.9, 0.1), ("X_FG", "N", 0.9, 0.3),
                                         ("X", "A", 0.6, 0.3), ("X_FG", "A", 0.7, 0.5)]:
        path = tmp_path / f"{data}_{training}.txt"
        EvalReport(natural, pgd, 10, int(natural * 10), int(pgd * 10),
                   {"data": data, "training": training}).save(path)
        paths.append(str(path))
    assert main(["eval", "--table"] + paths) == 0
    out = capsys.readouterr().out
    assert "+20.00" in out and "+10.00" in out


def test_end2end_is_deterministic(tmp_path, capsys):
    argv = ["end2end", "--seed", "1", "--samples", "20", "--side", "16", "--epochs", "1",
            "--adv-epochs", "1", "--steps", "1", "--batch-size", "8"]
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(argv + ["--out-dir", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    assert first == second and len(first.splitlines()) == 5
    assert (tmp_path / "a" / "table.txt").read_bytes() == (tmp_path / "b" / "table.txt").read_bytes()
    for name in ["X_N", "X_FG_A"]:
        assert ((tmp_path / "a" / "models" / f"{name}.mbnet").read_bytes()
                == (tmp_path / "b" / "models" / f"{name}.mbnet").read_bytes())
        assert (tmp_path / "a" / "reports" / f"{name}.txt").is_file()


def test_resolve_threads():
    assert resolve_threads(3) == 3
    assert resolve_threads(0) >= 1
    with pytest.raises(ValueError):
        resolve_threads(-1)


def test_config_file_ignores_the_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FGS_SAMPLES", "2")
    config = tmp_path / "run.conf"
    config.write_text("samples=${FGS_SAMPLES}\n", encoding="utf-8")
    assert main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "a")]) == 2
    assert "bad value for 'samples'" in capsys.readouterr().err
    assert not (tmp_path / "a" / "manifest.txt").exists()


def fake_end2end(checks):
    def run(args):
        reports = {(d, t): EvalReport(0.5, 0.5, 2, 1, 1, {"data": d, "training": t})
                   for d in ("X", "X_FG") for t in ("N", "A")}
        return {"table": "table", "reports": reports, "checks": checks}
    return run


def test_end2end_directional_failure_sets_exit_status(tmp_path, monkeypatch, capsys):
    checks = {"adversarial_pgd_improves": False, "natural_pgd_not_worse": True}
    monkeypatch.setattr(cli, "run_end2end", fake_end2end(checks))
    assert main(["end2end", "--out-dir", str(tmp_path)]) == 0
    assert main(["end2end", "--out-dir", str(tmp_path), "--require-directional"]) == 1
    assert "adversarial_pgd_improves" in capsys.readouterr().err
    monkeypatch.setattr(cli, "run_end2end", fake_end2end({k: True for k in checks}))
    assert main(["end2end", "--out-dir", str(tmp_path), "--require-directional"]) == 0


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_masking_improves_robustness_on_synthetic_shapes(tmp_path, seed):
    out_dir = tmp_path / f"seed_{seed}"
    assert main(["end2end", "--seed", str(seed), "--samples", "1000", "--threads", "0",
                 "--out-dir", str(out_dir), "--require-directional"]) == 0
    reports = {name: EvalReport.load(out_dir / "reports" / f"{name}.txt")
               for name in ("X_N", "X_FG_N", "X_A", "X_FG_A")}
    assert reports["X_FG_A"].pgd_accuracy > reports["X_A"].pgd_accuracy
    assert reports["X_FG_N"].pgd_accuracy >= reports["X_N"].pgd_accuracy
    assert all(r.invariant_violations == 0 for r in reports.values())
