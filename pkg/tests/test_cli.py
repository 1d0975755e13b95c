import json

import numpy as np
import pytest
import yaml

from drivefusion import cli
from drivefusion.series import PredictionSeries
from drivefusion.trajectory import read_path_csv

CONFIG = {
    "seed": 3,
    "run": {"presets": ["model1"], "members": 2, "splits": ["validation"]},
    "gen": {"routes": 2, "chapters": 3, "frames": 40},
    "prep": {"stride": 2},
    "train": {"scale": 0.25, "epochs": 1, "batch_size": 8},
}


def write_config(tmp, **over):
    cfg = {**CONFIG, **over}
    path = tmp / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, out=str(tmp / "run"))
    code = cli.main(["--config", str(cfg), "run", "--data", str(tmp / "data")])
    assert code == 0
    return tmp, cfg


def test_run_outputs(pipeline):
    tmp, _ = pipeline
    run = tmp / "run"
    metrics = json.loads((run / "metrics.json").read_text())
    assert set(metrics) == {"model1_seed3_validation", "model1_seed4_validation", "ensemble_validation"}
    for m in metrics.values():
        assert m["combined"] == pytest.approx(m["mse_angle"] + m["mse_speed"], abs=1e-9)
    for name in ("best_angle.ckpt", "best_speed.ckpt", "history.csv", "prior_angle.json", "prior_speed.json"):
        assert (run / "train" / "model1_seed3" / name).exists()
    plots = run / "plots" / "validation"
    assert (plots / "angle_count.png").exists() and (plots / "trainloss.png").exists()
    assert list(plots.glob("predictions_*.png")) and list(plots.glob("path_*.png"))
    assert (run / "eval" / "ensemble_validation.txt").read_text().startswith("Zone")


def test_rerun_is_a_no_op(pipeline):
    tmp, cfg = pipeline
    run = tmp / "run"
    watched = [p for p in run.rglob("*") if p.is_file() and p.name != "metrics.json"]
    before = {p: p.stat().st_mtime_ns for p in watched}
    assert cli.main(["--config", str(cfg), "run", "--data", str(tmp / "data")]) == 0
    assert {p: p.stat().st_mtime_ns for p in watched} == before


def test_ensemble_of_identical_members(pipeline, tmp_path):
    tmp, _ = pipeline
    member = tmp / "run" / "predict" / "model1_seed3_validation.csv"
    prior = tmp / "run" / "train" / "model1_seed3" / "prior_angle.json"
    out = tmp_path / "ens.csv"
    code = cli.main(["ensemble", "--members", str(member), str(member), str(member),
                     "--prior-angle", str(prior), "--output", str(out)])
    assert code == 0
    a, b = PredictionSeries.from_csv(member), PredictionSeries.from_csv(out)
    assert a.keys() == b.keys()
    assert np.array_equal(a.angle_deg, b.angle_deg) and np.array_equal(a.speed_kmh, b.speed_kmh)


def test_path_on_zero_angles(tmp_path):
    n = 50
    PredictionSeries(["c"] * n, np.arange(n), np.arange(n) * 100, np.zeros(n), np.full(n, 36.0)).to_csv(tmp_path / "p.csv")
    code = cli.main(["path", "--input", str(tmp_path / "p.csv"), "--output", str(tmp_path / "path.csv"),
                     "--plot", str(tmp_path / "path.png")])
    assert code == 0
    path = read_path_csv(tmp_path / "path.csv")
    assert np.array_equal(path.y, np.zeros(n + 1))
    assert path.x[-1] == pytest.approx(50.0, abs=1e-9)
    assert (tmp_path / "path.png").stat().st_size > 0


def test_eval_prints_table(pipeline, tmp_path, capsys):
    tmp, _ = pipeline
    pred = tmp / "run" / "predict" / "ensemble_validation.csv"
    data = next(tmp.glob("data_s3_*"))
    assert cli.main(["eval", "--pred", str(pred), "--data", str(data), "--output", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[:3] == ["Zone", "MSE", "Angle"] and "Overall" in out


def test_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["fly"]) == 1
    assert cli.main(["gen", "--frames", "many"]) == 1
    assert cli.main(["gen", "--data", str(tmp_path / "d"), "--resolution", "wide"]) == 1
    capsys.readouterr()
    assert cli.main(["train", "--data", str(tmp_path), "--preset", "model9"]) == 1
    assert "model2-sequence" in capsys.readouterr().err


def test_data_errors(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert cli.main(["prep", "--data", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert cli.main(["eval", "--pred", str(tmp_path / "x.csv"), "--data", str(missing), "--output", str(tmp_path / "r.json")]) == 2
    assert cli.main(["--config", str(tmp_path / "none.yaml"), "gen"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,prediction,file\n")
    assert cli.main(["path", "--input", str(bad), "--output", str(tmp_path / "p.csv")]) == 2


def test_gen_refuses_to_clobber(tmp_path):
    root = str(tmp_path / "d")
    small = ["--routes", "1", "--chapters", "3", "--frames", "12", "--resolution", "32x18"]
    assert cli.main(["gen", "--data", root, *small]) == 0
    assert cli.main(["gen", "--data", root, *small]) == 0
    assert cli.main(["gen", "--data", root, "--seed", "9", *small]) == 1
    assert cli.main(["gen", "--data", root, "--seed", "9", "--force", *small]) == 0


def test_config_precedence(tmp_path):
    cfg = write_config(tmp_path, out="from-config")
    args = cli._parse(["--config", str(cfg), "train", "--preset", "model3"])
    assert args.scale == 0.25 and args.epochs == 1
    assert args.preset == "model3"
    assert args.seed == 3 and args.out == "from-config"
    args = cli._parse(["--config", str(cfg), "--seed", "11", "train", "--epochs", "4", "--out", "cli"])
    assert args.seed == 11 and args.epochs == 4 and args.out == "cli"
    args = cli._parse(["train"])
    assert args.scale == 1.0 and args.epochs is None and args.seed == 0


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path, train={"scael": 0.5})
    with pytest.raises(cli.UsageError, match="scael"):
        cli._parse(["--config", str(cfg), "train"])
