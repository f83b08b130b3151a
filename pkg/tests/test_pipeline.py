import csv
import io
import json
import logging
import shutil
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from diffsleep.cache import read_records
from diffsleep.cli import main
from diffsleep.config import ConfigInvalid, build_config, load_config
from diffsleep.errors import CacheCorrupt, InvalidParameters, MissingUpstream
from diffsleep.pipeline import CacheLocked, MissingHypnogram, Pipeline, report_schema, run_stage
from diffsleep.synthetic import write_dataset

TINY = {"scattering": {"Q": 1, "H": 8}, "diffusion": {"dim": 10, "common_dim": 10}}
STAGES_CACHED = ("ingest", "features", "embed", "fuse", "train-eval")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, n_subjects=3, n_cycles=1, seed=1)
    return root


def tiny_config(dataset, cache, **extra):
    data = {k: dict(v) for k, v in TINY.items()}
    data.update(dataset={"root": str(dataset)}, cache_dir=str(cache))
    for k, v in extra.items():
        data[k] = {**data[k], **v} if isinstance(v, dict) and k in data else v
    return build_config(data)


@pytest.fixture(scope="module")
def built(dataset, tmp_path_factory):
    cache = tmp_path_factory.mktemp("built") / "cache"
    run_stage("all", tiny_config(dataset, cache))
    return cache


@pytest.fixture
def cache_copy(built, tmp_path):
    dst = tmp_path / "cache"
    shutil.copytree(built, dst)
    return dst


def write_yaml(path, dataset, cache, extra=""):
    path.write_text(
        f"dataset:\n  root: {dataset}\ncache_dir: {cache}\n"
        "scattering:\n  Q: 1\n  H: 8\ndiffusion:\n  dim: 10\n  common_dim: 10\n" + extra
    )
    return path


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = build_config()
    assert (cfg.scattering.Q, cfg.scattering.H) == (2, 17)
    assert cfg.diffusion.t == 0.3 and cfg.diffusion.percentile == 0.01
    assert cfg.diffusion.dim == cfg.diffusion.common_dim == 80
    assert cfg.truncation_minutes == 30 and cfg.fusion == "multiview"
    assert cfg.channels == ("EEG Fpz-Cz", "EEG Pz-Oz")


def test_overrides_and_yaml(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", tmp_path, tmp_path / "cache", "seed: 3\n")
    cfg = load_config(path, ["diffusion.t=0.5", "svm.sigma=2.5", "evaluation.balanced=true"])
    assert cfg.seed == 3 and cfg.diffusion.t == 0.5 and cfg.svm.sigma == 2.5 and cfg.evaluation.balanced
    assert cfg.scattering.H == 8


@pytest.mark.parametrize(
    "data",
    [
        {"fusion": "multiview", "channels": ["EEG Fpz-Cz"]},
        {"fusion": "concat", "channels": ["EEG Fpz-Cz"]},
        {"channels": ["A", "B", "C"], "fusion": "single"},
        {"channels": ["A", "A"]},
        {"diffusion": {"t": 0}},
        {"scattering": {"Q": 0}},
        {"svm": {"sigma": -1.0}},
        {"unknown": 1},
        {"diffusion": {"typo": 1}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigInvalid):
        build_config(data)


def test_bad_config_files(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("dataset: [unclosed\n")
    with pytest.raises(ConfigInvalid):
        load_config(p)
    p.write_text("- a list\n")
    with pytest.raises(ConfigInvalid):
        load_config(p)
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigInvalid):
        build_config({}, ["no_equals_sign"])


# ---------------------------------------------------------------- full run


def test_report_outputs(built):
    out = built / "out"
    text = (out / "report.json").read_text()
    report = json.loads(text)
    jsonschema.validate(report, report_schema())
    assert set(report["results"]) == {"single-0", "single-1", "concat", "multiview"}
    assert report["primary"] == "multiview"
    assert report["results"]["single-1"]["label"] == "EEG Pz-Oz"
    pooled = report["results"]["multiview"]["pooled"]
    assert sum(map(sum, pooled["confusion"])) == report["dataset"]["n_epochs"]
    assert report["dataset"]["n_subjects"] == 3
    assert len(report["results"]["multiview"]["folds"]) == 3
    for v in report["results"]:
        assert (out / f"table_{v}.csv").exists()
    perf = json.loads((out / "perf.json").read_text())
    assert set(STAGES_CACHED) | {"export", "report"} <= set(perf)
    assert all(p["seconds"] >= 0 and p["peak_rss_mb"] > 0 for p in perf.values())
    # no machine-specific paths or timings in the report
    assert str(built) not in text and "seconds" not in text


def test_ablation_block(built):
    ab = json.loads((built / "out" / "report.json").read_text())["ablation"]
    assert ab["unit"] == "recording" and ab["n_recordings"] == 3
    assert len(ab["comparisons"]) == 9
    # three recordings are too few pairs for the signed-rank test
    assert all("wilcoxon_skipped" in c for c in ab["comparisons"])
    tested = [c["f_test"] for c in ab["comparisons"] if "f_test" in c]
    assert tested
    assert all(t["bonferroni_alpha"] == pytest.approx(0.05 / len(tested)) for t in tested)


def test_hypnogram_export(built):
    rows = list(csv.DictReader((built / "out" / "hypnogram_multiview.csv").open()))
    report = json.loads((built / "out" / "report.json").read_text())
    assert len(rows) == report["dataset"]["n_epochs"]
    assert {r["true_stage"] for r in rows} <= {"Awake", "REM", "N1", "N2", "N3"}
    acc = np.mean([r["true_stage"] == r["predicted_stage"] for r in rows])
    assert acc == pytest.approx(report["results"]["multiview"]["pooled"]["metrics"]["accuracy"])


def test_second_run_recomputes_nothing(dataset, cache_copy, caplog):
    before = (cache_copy / "out" / "report.json").read_bytes()
    with caplog.at_level(logging.INFO, logger="diffsleep"):
        with Pipeline(tiny_config(dataset, cache_copy)) as p:
            p.run("all")
    kinds = dict(p.events)
    assert all(kinds[s] == "hit" for s in STAGES_CACHED)
    assert caplog.text.count("cache hit, nothing recomputed") >= len(STAGES_CACHED)
    assert (cache_copy / "out" / "report.json").read_bytes() == before


def test_changed_t_recomputes_downstream_only(dataset, cache_copy):
    with Pipeline(tiny_config(dataset, cache_copy, diffusion={"t": 0.6})) as p:
        p.run("all")
    kinds = {}
    for stage, kind in p.events:
        kinds.setdefault(stage, set()).add(kind)
    assert kinds["ingest"] == {"hit"} and kinds["features"] == {"hit"}
    for stage in ("embed", "fuse", "train-eval"):
        assert "computed" in kinds[stage]


def test_changed_svm_keeps_embedding(dataset, cache_copy):
    with Pipeline(tiny_config(dataset, cache_copy, svm={"C": 2.0})) as p:
        p.run("all")
    kinds = dict(p.events)
    assert all(kinds[s] == "hit" for s in ("ingest", "features", "embed", "fuse"))
    assert kinds["train-eval"] == "computed"


def test_missing_upstream(dataset, tmp_path):
    cfg = tiny_config(dataset, tmp_path / "fresh")
    for stage in ("features", "embed", "fuse", "train-eval", "report"):
        with pytest.raises(MissingUpstream):
            run_stage(stage, cfg)


def test_stagewise_equals_all(dataset, built, tmp_path):
    cfg = tiny_config(dataset, tmp_path / "steps")
    for stage in ("ingest", "features", "embed", "fuse", "train-eval", "report"):
        run_stage(stage, cfg)
    assert (tmp_path / "steps" / "out" / "report.json").read_bytes() == (built / "out" / "report.json").read_bytes()


def test_export_dims(dataset, cache_copy, built):
    cfg = tiny_config(dataset, cache_copy)
    paths = run_stage("export", cfg, dims=[2, 3, 4])
    rows = list(csv.reader(io.StringIO(paths[0].read_text())))
    header, body = rows[0], rows[1:]
    assert header[-6:] == ["x_q2", "x_q3", "x_q4", "y_q2", "y_q3", "y_q4"]
    assert len(header) == 10
    n = json.loads((built / "out" / "report.json").read_text())["dataset"]["n_epochs"]
    assert len(body) == n
    # columns agree with the fused cache
    _, _, values = read_records(cache_copy / "fuse" / "multiview.rec")
    got = np.array([[float(v) for v in r[-6:]] for r in body])
    half = values.shape[1] // 2
    np.testing.assert_allclose(got, values[:, [0, 1, 2, half, half + 1, half + 2]], rtol=1e-6, atol=1e-9)
    single = run_stage("export", cfg, dims=[2, 5], variant="single-1")
    assert single[0].name == "embedding_single-1.csv"
    assert single[0].read_text().splitlines()[0].endswith("q2,q5")


@pytest.mark.parametrize("dims", [[1], [2, 12], [0, 2], []])
def test_export_bad_dims(dataset, cache_copy, dims):
    with pytest.raises(InvalidParameters, match=r"2\.\.11"):
        run_stage("export", tiny_config(dataset, cache_copy), dims=dims)


def test_export_unknown_variant(dataset, cache_copy):
    with pytest.raises(InvalidParameters):
        run_stage("export", tiny_config(dataset, cache_copy), variant="nonsense")


def test_cache_lock(dataset, cache_copy):
    cfg = tiny_config(dataset, cache_copy)
    with Pipeline(cfg):
        with pytest.raises(CacheLocked):
            run_stage("report", cfg)
    run_stage("report", cfg)


@pytest.mark.parametrize("stage,name", [("fuse", "multiview.rec"), ("embed", "channel-0.rec"), ("train-eval", "results.rec")])
def test_corrupt_cache_detected(dataset, cache_copy, stage, name):
    path = cache_copy / stage / name
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheCorrupt):
        run_stage(stage, tiny_config(dataset, cache_copy))
    cfg = write_yaml(cache_copy.parent / "c.yaml", dataset, cache_copy)
    assert main([stage, "--config", str(cfg)]) == 3


def test_single_channel_has_no_ablation(dataset, cache_copy):
    cfg = tiny_config(dataset, cache_copy, channels=["EEG Pz-Oz"], fusion="single")
    with Pipeline(cfg) as p:
        path = p.run("all")
    report = json.loads(path.read_text())
    assert set(report["results"]) == {"single-0"} and "ablation" not in report
    assert report["results"]["single-0"]["label"] == "EEG Pz-Oz"
    # the Pz-Oz features were cached under the two-channel run as channel 1
    assert dict(p.events)["ingest"] == "computed"


def test_inductive_protocol(dataset, cache_copy):
    cfg = tiny_config(dataset, cache_copy, evaluation={"protocol": "inductive"})
    report = json.loads(run_stage("all", cfg).read_text())
    jsonschema.validate(report, report_schema())
    assert report["config"]["evaluation"]["protocol"] == "inductive"
    assert report["results"]["multiview"]["pooled"]["metrics"]["accuracy"] > 0.4


def test_missing_hypnogram(tmp_path):
    write_dataset(tmp_path / "d", n_subjects=2, n_cycles=1, seed=4)
    next((tmp_path / "d").glob("*-Hypnogram.txt")).unlink()
    with pytest.raises(MissingHypnogram):
        run_stage("ingest", tiny_config(tmp_path / "d", tmp_path / "c"))


def test_edf_hypnograms_ingest(tmp_path):
    write_dataset(tmp_path / "d", n_subjects=2, n_cycles=1, seed=4, hypnogram_format="edf")
    write_dataset(tmp_path / "s", n_subjects=2, n_cycles=1, seed=4)
    _, a, _ = read_records(run_ingest(tmp_path / "d", tmp_path / "c1"))
    _, b, _ = read_records(run_ingest(tmp_path / "s", tmp_path / "c2"))
    np.testing.assert_array_equal(a.stages, b.stages)
    np.testing.assert_array_equal(a.epoch_index, b.epoch_index)


def run_ingest(root, cache):
    run_stage("ingest", tiny_config(root, cache))
    return cache / "ingest" / "epochs.rec"


def test_empty_dataset(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(Exception) as exc:
        run_stage("ingest", tiny_config(tmp_path / "empty", tmp_path / "c"))
    from diffsleep.errors import DataError

    assert isinstance(exc.value, DataError)


# ---------------------------------------------------------------- CLI


def test_cli_all_and_rerun(dataset, tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", dataset, tmp_path / "cache")
    assert main(["all", "--config", str(cfg)]) == 0
    first = (tmp_path / "cache" / "out" / "report.json").read_bytes()
    assert "report.json" in capsys.readouterr().out
    assert main(["report", "--config", str(cfg)]) == 0
    assert (tmp_path / "cache" / "out" / "report.json").read_bytes() == first


def test_cli_exit_codes(dataset, tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", dataset, tmp_path / "cache")
    one = write_yaml(tmp_path / "one.yaml", dataset, tmp_path / "cache", "channels: [EEG Fpz-Cz]\nfusion: multiview\n")
    assert main(["ingest", "--config", str(one)]) == 2
    assert main(["ingest", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["ingest", "--config", str(cfg), "--stage-override", "diffusion.t=-1"]) == 2
    assert main(["embed", "--config", str(cfg)]) == 3
    bad = write_yaml(tmp_path / "bad.yaml", tmp_path / "no-such-dir", tmp_path / "cache2")
    assert main(["ingest", "--config", str(bad)]) == 3


def test_cli_export_dims(built, dataset, tmp_path):
    shutil.copytree(built, tmp_path / "cache")
    cfg = write_yaml(tmp_path / "c.yaml", dataset, tmp_path / "cache")
    assert main(["export", "--config", str(cfg), "--dims", "2,3"]) == 0
    head = (tmp_path / "cache" / "out" / "embedding_multiview.csv").read_text().splitlines()[0]
    assert head.endswith("x_q2,x_q3,y_q2,y_q3")
    assert main(["export", "--config", str(cfg), "--dims", "2,40"]) == 2


def test_module_help():
    out = subprocess.run([sys.executable, "-m", "diffsleep", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("ingest", "features", "embed", "fuse", "train-eval", "export", "report", "all"):
        assert cmd in out.stdout
