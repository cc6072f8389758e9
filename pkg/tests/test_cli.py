import json
import re
import shutil

import pandas as pd
import pytest

from ctxengage import cli
from ctxengage import config as cfgmod
from ctxengage.config import ConfigError

TINY = [
    "synthgen.users=40", "synthgen.days=8", "synthgen.zips=6", "synthgen.seed=5",
    "training.n_train=300", "training.n_val=100", "training.n_test=150", "training.batch_size=64",
    "training.max_epochs=2", "training.patience=2", "tuner.budget=0", "tuner.max_epochs=1",
    "bench.preset=desk", "bench.repetitions=1",
    "explain.n_samples=5", "explain.n_permutations=5", "explain.background=10",
]


def _args(run_dir, *extra):
    out = ["--run-dir", str(run_dir)]
    for s in TINY + list(extra):
        out += ["--set", s]
    return out


def run(capsys, command, run_dir, *extra, raw=()):
    code = cli.main(command + _args(run_dir, *extra) + list(raw))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "base"
    assert cli.main(["datagen"] + _args(root)) == 0
    assert cli.main(["prepare"] + _args(root)) == 0
    return root


@pytest.fixture
def workdir(prepared, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(prepared, dst)
    return dst


# ---------------------------------------------------------------- config


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown key 'training.speed'"):
        cfgmod.parse_text("training.seed = 1\ntraining.speed = 3\n", source="cfg")
    with pytest.raises(ConfigError, match="unknown section"):
        cfgmod.parse_text("solver.x = 1")
    with pytest.raises(ConfigError, match="cannot parse"):
        cfgmod.parse_text("training.batch_size = big")
    with pytest.raises(ConfigError):
        cfgmod.parse_text("just words")


def test_dump_roundtrip():
    cfg = cfgmod.load(overrides=["bench.lengths=1,5,25", "synthgen.coef.cell=0.9", "explain.mode=exact"])
    again = cfgmod.parse_text(cfgmod.dump(cfg))
    assert again == cfg
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg)


def test_validation_errors():
    for bad in ("synthgen.users=0", "pipeline.split_fractions=0.5,0.5", "bench.preset=huge", "training.model=12",
                "explain.mode=kernel"):
        with pytest.raises(ConfigError):
            cfgmod.load(overrides=[bad])


def test_hash_ignores_output_dir():
    a = cfgmod.load(overrides=["output.dir=/tmp/a"])
    b = cfgmod.load(overrides=["output.dir=/tmp/b"])
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.load(overrides=["synthgen.seed=1"]))


def test_paper_scale_preset():
    cfg = cfgmod.load(paper_scale=True)
    assert cfg.pipeline.max_len == 100 and cfg.bench.repetitions == 10 and cfg.tuner.budget == 100
    assert cfg.bench.lengths == (1, 5, 10, 25, 50, 100)
    # file and --set still override the preset
    assert cfgmod.load(overrides=["bench.repetitions=2"], paper_scale=True).bench.repetitions == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        cfgmod.load(tmp_path / "nope.cfg")


# ---------------------------------------------------------------- datagen / prepare


def test_users_zero_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, ["datagen"], tmp_path / "r", "synthgen.users=0")
    assert code == 2 and "synthgen.users" in err


def test_datagen_files_and_hashes(capsys, prepared, tmp_path):
    code, out, _ = run(capsys, ["datagen"], tmp_path / "again")
    assert code == 0
    assert re.search(r"events: \d+ rows", out) and "weather:" in out and "census:" in out
    for f in ("events.csv", "weather.csv", "census.csv"):
        assert (tmp_path / "again" / "data" / f).read_bytes() == (prepared / "data" / f).read_bytes()
    man = json.loads((tmp_path / "again" / "manifests" / "datagen.json").read_text())
    assert {"tool", "version", "schema_version", "config_hash", "inputs", "outputs", "wall_times"} <= set(man)
    assert set(man["outputs"]) == {"data/events.csv", "data/weather.csv", "data/census.csv"}


def test_datagen_worker_count_invariant(capsys, prepared, tmp_path):
    assert run(capsys, ["datagen"], tmp_path / "j2", raw=["--jobs", "2"])[0] == 0
    assert (tmp_path / "j2" / "data" / "events.csv").read_bytes() == (prepared / "data" / "events.csv").read_bytes()


def test_resolved_config_refed_reproduces(capsys, prepared, tmp_path):
    resolved = prepared / "config.resolved.txt"
    text = resolved.read_text()
    assert "synthgen.users = 40" in text
    code = cli.main(["datagen", "-c", str(resolved), "--run-dir", str(tmp_path / "refed")])
    capsys.readouterr()
    assert code == 0
    assert (tmp_path / "refed" / "data" / "events.csv").read_bytes() == (prepared / "data" / "events.csv").read_bytes()


def test_paper_scale_written_to_resolved(capsys, tmp_path):
    # plot fails (nothing to plot) but the resolved config is written first
    code = cli.main(["plot", "--paper-scale", "--run-dir", str(tmp_path / "p")])
    capsys.readouterr()
    assert code == 4
    text = (tmp_path / "p" / "config.resolved.txt").read_text()
    assert "pipeline.max_len = 100" in text and "bench.paper_scale = true" in text


def test_prepare_prints_manifest(capsys, workdir):
    code, out, _ = run(capsys, ["prepare"], workdir)
    assert code == 0
    assert "behavioral: 127" in out and "weather: 19" in out and "total: 182" in out and "183" in out


def test_prepare_rerun_identical(capsys, prepared, workdir):
    before = (prepared / "prepared" / "bundle.ctxb").read_bytes()
    assert run(capsys, ["prepare"], workdir)[0] == 0
    assert (workdir / "prepared" / "bundle.ctxb").read_bytes() == before


def test_prepare_missing_table_named(capsys, workdir):
    (workdir / "data" / "census.csv").unlink()
    code, _, err = run(capsys, ["prepare"], workdir)
    assert code == 4 and "census" in err


# ---------------------------------------------------------------- run


def test_train_writes_checkpoint_and_manifest(capsys, workdir):
    code, out, _ = run(capsys, ["run", "train"], workdir, "training.model=1", "pipeline.max_len=5")
    assert code == 0 and "model 1: r2=" in out
    assert (workdir / "train" / "model1.ckpt").exists()
    man = json.loads((workdir / "manifests" / "run-train.json").read_text())
    assert "prepared/bundle.ctxb" in man["inputs"] and "train/metrics.json" in man["outputs"]


def test_tune_history(capsys, workdir):
    code, out, _ = run(capsys, ["run", "tune"], workdir, "training.model=8", "tuner.budget=2")
    assert code == 0 and "best configuration" in out
    assert len((workdir / "tune" / "history.jsonl").read_text().splitlines()) == 2


def test_ablate_seven_rows_and_plot(capsys, workdir, tmp_path):
    code, _, _ = run(capsys, ["run", "ablate"], workdir, "pipeline.max_len=3")
    assert code == 0
    rep = pd.read_csv(workdir / "reports" / "report.csv")
    assert list(rep["model"]) == [1, 2, 3, 4, 5, 6, 7]
    assert (workdir / "reports" / "report.json").exists()
    code, out, _ = run(capsys, ["plot"], workdir)
    assert code == 0 and "figures/models.svg" in out
    svg = (workdir / "figures" / "models.svg").read_text()
    assert sorted(set(re.findall(r">(M\d)<", svg))) == [f"M{i}" for i in range(1, 8)]
    # identical inputs, identical bytes
    other = tmp_path / "copy"
    shutil.copytree(workdir, other)
    shutil.rmtree(other / "figures")
    assert run(capsys, ["plot"], other)[0] == 0
    assert (other / "figures" / "models.svg").read_bytes() == svg.encode()


def test_cross_two_rows(capsys, workdir):
    assert run(capsys, ["run", "cross"], workdir)[0] == 0
    assert list(pd.read_csv(workdir / "cross" / "report.csv")["model"]) == [8, 9]


def test_sweep_three_lengths(capsys, workdir):
    code, _, _ = run(capsys, ["run", "sweep"], workdir, "bench.lengths=1,5,25", "bench.channels=behavioral")
    assert code == 0
    df = pd.read_csv(workdir / "sweep" / "sweep.csv")
    assert list(df["length"]) == [1, 5, 25]


def test_explain_exact_size_error(capsys, workdir):
    code, _, err = run(capsys, ["run", "explain"], workdir, "explain.mode=exact")
    assert code == 2 and "explain.mode=sampled" in err
    assert not (workdir / "explain").exists()


def test_explain_sampled_outputs(capsys, workdir):
    assert run(capsys, ["run", "explain"], workdir)[0] == 0
    imp = pd.read_csv(workdir / "explain" / "importance.csv")
    assert list(imp.columns) == ["rank", "group", "mean_abs_shap"]
    assert "location" in set(imp["group"]) and "weather_label" in set(imp["group"])
    corr = pd.read_csv(workdir / "explain" / "correlations.csv")
    assert set(corr["kind"]) <= {"pearson", "point_biserial"}
    assert len(pd.read_csv(workdir / "explain" / "shap_values.csv")) == 5


# ---------------------------------------------------------------- plot errors


def test_empty_sweep_errors_without_file(capsys, workdir):
    (workdir / "sweep").mkdir()
    (workdir / "sweep" / "sweep.csv").write_text("channel,length,mean_r2,std\n")
    code, _, err = run(capsys, ["plot"], workdir)
    assert code == 4 and "no rows" in err
    assert not (workdir / "figures" / "sweep.svg").exists()
    assert (workdir / "figures.partial").exists()  # failed stage output is kept aside


def test_malformed_csv_line_number(capsys, workdir):
    (workdir / "reports").mkdir()
    (workdir / "reports" / "report.csv").write_text("model,r2_mean,r2_std\n1,0.3,0.01\n2,abc,0.01\n")
    code, _, err = run(capsys, ["plot"], workdir)
    assert code == 4 and "report.csv:3" in err and "r2_mean" in err


def test_plot_nothing_to_plot(capsys, workdir):
    code, _, err = run(capsys, ["plot"], workdir)
    assert code == 4 and "no reports" in err
