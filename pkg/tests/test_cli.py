import numpy as np
import pandas as pd
import pytest

from app.cli import main
from app.config import load_experiment_config
from app.services.experiment import ablation_grid, evaluate_checkpoint, prepare_data

ARTIFACTS = ("config.toml", "report.txt", "model.ckpt", "predictions.csv")


@pytest.fixture
def trained_run(tmp_path, tiny_experiment_file):
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(tiny_experiment_file), "--output", str(run_dir)]) == 0
    return run_dir


def test_train_writes_every_artifact(capsys, trained_run):
    for name in ARTIFACTS:
        assert (trained_run / name).is_file()
    report = (trained_run / "report.txt").read_text(encoding="utf-8")
    assert "test_mse: " in report and "seed: 7" in report
    frame = pd.read_csv(trained_run / "predictions.csv")
    assert list(frame.columns) == ["sample_index", "channel", "step", "y_true", "y_pred"]
    assert set(frame["channel"]) == {"ch0", "ch1", "ch2"}
    assert "test MSE:" in capsys.readouterr().out


def test_default_run_directory_uses_output_root(tiny_experiment_file, tmp_path):
    assert main(["train", "--config", str(tiny_experiment_file), "--seed", "3"]) == 0
    assert (tmp_path / "runs" / "toy_16_4_seed3" / "report.txt").is_file()


def test_training_does_not_touch_the_dataset(tiny_experiment_file, tmp_path):
    dataset = load_experiment_config(tiny_experiment_file).dataset_path
    before = open(dataset, "rb").read()
    assert main(["train", "--config", str(tiny_experiment_file), "--output", str(tmp_path / "r")]) == 0
    assert open(dataset, "rb").read() == before


def test_missing_dataset_exits_with_usage_code(tiny_experiment_file, tmp_path, capsys):
    missing = tmp_path / "nowhere.csv"
    code = main(["train", "--config", str(tiny_experiment_file), "--override", f"dataset_path='{missing}'"])
    assert code == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_invalid_config_exits_with_usage_code(tiny_experiment_file, capsys):
    assert main(["train", "--config", str(tiny_experiment_file), "--override", "patch_len=64"]) == 2
    assert "patch_len" in capsys.readouterr().err


def test_same_seed_gives_identical_artifacts(tiny_experiment_file, tmp_path):
    for name in ("a", "b"):
        args = ["train", "--config", str(tiny_experiment_file), "--seed", "2020", "--output", str(tmp_path / name)]
        assert main(args) == 0
    for artifact in ARTIFACTS:
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_config_echo_reproduces_the_run(trained_run, tmp_path):
    assert main(["train", "--config", str(trained_run / "config.toml"), "--output", str(tmp_path / "again")]) == 0
    for artifact in ARTIFACTS:
        assert (trained_run / artifact).read_bytes() == (tmp_path / "again" / artifact).read_bytes()


def test_flops_reads_channels_from_the_dataset(tiny_experiment_file, capsys):
    assert main(["flops", "--config", str(tiny_experiment_file), "--batch-size", "4"]) == 0
    out = capsys.readouterr().out
    assert "total FLOPs:" in out and "increment:" in out

    assert main(["flops", "--config", str(tiny_experiment_file), "--channels", "7",
                 "--override", "channel_mixer=none"]) == 0
    assert "increment: 0.0000%" in capsys.readouterr().out


def test_predict_on_exactly_one_window(trained_run, write_csv, tmp_path):
    source = write_csv("input.csv", rows=16)
    output = tmp_path / "forecast.csv"
    args = ["predict", "--checkpoint", str(trained_run / "model.ckpt"), "--input", str(source), "--output", str(output)]
    assert main(args) == 0
    frame = pd.read_csv(output)
    assert len(frame) == 3 * 4
    assert frame["sample_index"].unique().tolist() == [0]
    assert frame["y_true"].isna().all()
    assert np.isfinite(frame["y_pred"]).all()

    first = output.read_bytes()
    assert main(args) == 0
    assert output.read_bytes() == first


def test_rolling_forecasts_carry_known_futures(trained_run, write_csv, tmp_path):
    source = write_csv("longer.csv", rows=22)
    output = tmp_path / "forecast.csv"
    assert main(["predict", "--checkpoint", str(trained_run / "model.ckpt"), "--input", str(source),
                 "--output", str(output), "--horizon", "4"]) == 0
    frame = pd.read_csv(output)
    assert frame["sample_index"].nunique() == 22 - 16 + 1
    first = frame[frame["sample_index"] == 0]
    assert first["y_true"].notna().all()
    assert frame[frame["sample_index"] == 6]["y_true"].isna().all()


def test_predict_rejects_channel_and_horizon_mismatch(trained_run, write_csv, tmp_path, capsys):
    wide = write_csv("wide.csv", rows=20, channels=5)
    ckpt = str(trained_run / "model.ckpt")
    assert main(["predict", "--checkpoint", ckpt, "--input", str(wide), "--output", str(tmp_path / "o.csv")]) == 2
    err = capsys.readouterr().err
    assert "V=3" in err and "V=5" in err

    narrow = write_csv("narrow.csv", rows=20)
    assert main(["predict", "--checkpoint", ckpt, "--input", str(narrow), "--output", str(tmp_path / "o.csv"),
                 "--horizon", "8"]) == 2


def test_eval_matches_the_training_report(trained_run, capsys):
    assert main(["eval", "--checkpoint", str(trained_run / "model.ckpt")]) == 0
    assert "test MSE:" in capsys.readouterr().out
    report = dict(line.split(": ", 1) for line in (trained_run / "report.txt").read_text().splitlines())
    mse, mae = evaluate_checkpoint(trained_run / "model.ckpt")
    assert mse == pytest.approx(float(report["test_mse"]), rel=1e-9)
    assert mae == pytest.approx(float(report["test_mae"]), rel=1e-9)


def test_eval_of_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_ablation_grid_shapes():
    assert [label for label, _ in ablation_grid(["gdd", "mixup"])] == [
        "gdd_on+mixup_on", "gdd_on+mixup_off", "gdd_off+mixup_on", "gdd_off+mixup_off",
    ]
    cases = ablation_grid(["block_case"])
    assert len(cases) == 7
    assert dict(cases)["vanilla"] == {"use_conv": True, "use_z_branch": True, "a_mode": "feature_specific", "d_mode": "free"}


def test_ablate_gdd_and_mixup(tiny_experiment_file, tmp_path, capsys):
    out_dir = tmp_path / "ablation"
    assert main(["ablate", "--config", str(tiny_experiment_file), "--axes", "gdd", "mixup", "--output", str(out_dir)]) == 0
    table = pd.read_csv(out_dir / "ablation.csv")
    assert len(table) == 4
    assert set(table["channel_mixer"]) == {"gdd", "none"}
    assert table["mse"].notna().all()
    for label in table["label"]:
        assert "seed: 7" in (out_dir / label / "report.txt").read_text(encoding="utf-8")


def test_ablate_rejects_unknown_axes(tiny_experiment_file, capsys):
    assert main(["ablate", "--config", str(tiny_experiment_file), "--axes", "gdd", "colour"]) == 2
    assert "colour" in capsys.readouterr().err


def test_sweep_over_seeds(tiny_experiment_file, tmp_path):
    out_dir = tmp_path / "sweep"
    args = ["sweep", "--config", str(tiny_experiment_file), "--key", "seed", "--values", "1", "2", "--output", str(out_dir)]
    assert main(args) == 0
    table = pd.read_csv(out_dir / "sweep.csv")
    assert table["seed"].tolist() == [1, 2]
    summary = (out_dir / "summary.txt").read_text(encoding="utf-8").splitlines()
    assert summary[0].startswith("mse: ") and " +- " in summary[0]
    assert (out_dir / "seed=2" / "model.ckpt").is_file()


def test_sweep_rejects_unknown_keys(tiny_experiment_file, tmp_path):
    args = ["sweep", "--config", str(tiny_experiment_file), "--key", "colour", "--values", "1", "--output", str(tmp_path)]
    assert main(args) == 2


def test_unrequested_remainder_rows_give_no_test_windows(tmp_path, write_csv):
    dataset = write_csv("remainder.csv", rows=125)
    config = load_experiment_config(None, [f"dataset_path='{dataset.as_posix()}'", "split_ratios=[0.9, 0.1, 0.0]",
                                           "look_back=16", "horizon=4", "patch_len=4", "stride=2"])
    data = prepare_data(config)
    # one row is left over for test, too short for a window
    assert data.test_view.core_rows == 1
    assert data.test == []
    assert len(data.train) == 112 - 20 + 1
    assert len(data.val) == 28 - 20 + 1
