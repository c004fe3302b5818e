import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partialfl.cli import (
    CSV_FIXED_COLUMNS,
    emit_report,
    expand_grid,
    load_report,
    main,
    mark_best,
    parse_grid,
    report_body,
    run,
)
from partialfl.config import ConfigError, ExperimentConfig, dump_config, parse_config

SMALL = """\
[experiment]
seed = 3
metrics = accuracy, uar, top2

[data]
num_samples = 200
audio_dim = 6
text_dim = 6

[federation]
num_clients = 4
rounds = 2
batch_size = 8
sample_rate = 0.5

[model]
feature_dim = 6
embedding_dim = 4
server_hidden = 8
edge_hidden = 5
classifier_hidden = 4
"""


def small(**overrides):
    cfg = parse_config(SMALL)
    return cfg.with_overrides(overrides) if overrides else cfg


def test_empty_document_is_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    fed = cfg.federation
    assert (fed.batch_size, fed.local_epochs, fed.mu, fed.tau, fed.beta, fed.aggregation) == (
        16, 1, 0.01, 0.1, 0.01, "uniform"
    )


def test_negative_tau_rejected_with_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config("[federation]\nbatch_size = 8\ntau = -1\n")
    assert err.value.key == "tau" and err.value.line == 3
    assert "temperature" in str(err.value)


@pytest.mark.parametrize(
    "doc,key,line",
    [
        ("[federation]\nrounds = 2\nlearning_rate = 1\n", "learning_rate", 3),
        ("[data]\n\nnum_classes = four\n", "num_classes", 3),
        ("[federation]\nnormalize_embeddings = maybe\n", "normalize_embeddings", 2),
        ("[partition]\nalpha = 0\n", "alpha", 2),
    ],
)
def test_errors_name_key_and_line(doc, key, line):
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert (err.value.key, err.value.line) == (key, line)


def test_structural_errors():
    with pytest.raises(ConfigError):
        parse_config("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config("seed = 1\n")
    with pytest.raises(ConfigError) as err:
        parse_config("[federation]\ntau = 0.1\ntau = 0.2\n")
    assert err.value.line == 3
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nformat_version = 2\n")
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nmetrics = top9\n")


def test_num_clients_is_single_sourced():
    cfg = parse_config("[federation]\nnum_clients = 7\n")
    assert cfg.partition.num_clients == 7
    with pytest.raises(ConfigError):
        parse_config("[partition]\nnum_clients = 7\n")


def test_parse_from_path(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL, encoding="utf-8")
    assert parse_config(path) == parse_config(str(path)) == small()


@settings(max_examples=40, deadline=None)
@given(
    tau=st.floats(1e-3, 10),
    beta=st.floats(0, 1),
    alpha=st.floats(1e-2, 1e3),
    q=st.floats(0, 1),
    k=st.integers(1, 50),
    algorithm=st.sampled_from(["partialfl", "fedavg", "fedprox", "centralized"]),
    normalize=st.booleans(),
    seed=st.integers(0, 2**31),
    metrics=st.sampled_from([("accuracy",), ("uar", "top2"), ("top4", "accuracy", "uar")]),
)
def test_dump_parse_round_trip(tau, beta, alpha, q, k, algorithm, normalize, seed, metrics):
    cfg = ExperimentConfig().with_overrides(
        {
            "tau": tau,
            "beta": beta,
            "alpha": alpha,
            "q": q,
            "num_clients": k,
            "algorithm": algorithm,
            "normalize_embeddings": normalize,
            "seed": seed,
            "metrics": metrics,
        }
    )
    assert parse_config(dump_config(cfg)) == cfg
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_overrides_resolve_keys():
    cfg = ExperimentConfig().with_overrides({"federation.tau": 0.2, "q": 0.5})
    assert cfg.federation.tau == 0.2 and cfg.partition.q == 0.5
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"nonsense": 1})


def test_run_is_deterministic():
    a, b = run(small()), run(small())
    assert report_body(a) == report_body(b)
    assert len(a.rounds) == 2


def test_centralized_report_has_no_sampling_records():
    doc = run(small(algorithm="centralized"))
    for line in report_body(doc).splitlines()[1:]:
        assert "participants" not in json.loads(line)


def test_emit_json_lines_and_csv(tmp_path):
    doc = run(small(rounds=1))
    files = emit_report(doc, "both", tmp_path / "out" / "run")
    assert [f.name for f in files] == ["run.jsonl", "run.csv"]
    raw = files[0].read_bytes()
    assert b"\r\n" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert len(lines) == 2
    config, rounds = load_report(files[0])
    assert config == doc.config and rounds[0]["kind"] == "round"

    with open(files[1], newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_FIXED_COLUMNS + ["accuracy", "uar", "top2"]
    assert len(rows) == 1 + 1
    for name in ("accuracy", "uar", "top2"):
        assert abs(float(rows[1][rows[0].index(name)]) - doc.rounds[0].metrics[name]) <= 1e-9
    assert rows[1][:7] == ["0", "partialfl", "1.0", "1.0", "0.1", "0.01", "3"]


def test_csv_round_trip_multiple_rounds(tmp_path):
    doc = run(small(rounds=3, eval_interval=2))
    (path,) = emit_report(doc, "csv", tmp_path / "r")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    # rounds without evaluation leave the metric cells empty
    assert rows[0]["accuracy"] == "" and rows[1]["accuracy"] != "" and rows[2]["accuracy"] != ""
    for row, rep in zip(rows, doc.rounds):
        assert abs(float(row["loss_glob"]) - rep.loss_glob) <= 1e-9


def test_emit_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(run(small(rounds=1)), "json_lines", blocker / "sub" / "run")


def test_grid_expansion_and_best():
    axes = parse_grid(["tau=0.05,0.1,0.2", "algorithm=partialfl,fedavg"])
    assert axes == [("federation.tau", [0.05, 0.1, 0.2]), ("federation.algorithm", ["partialfl", "fedavg"])]
    points = expand_grid(small(), axes)
    assert len(points) == 6
    assert points[1][1].federation.algorithm == "fedavg" and points[1][1].federation.tau == 0.05
    with pytest.raises(ConfigError):
        parse_grid(["tau"])
    with pytest.raises(ConfigError):
        parse_grid(["tau=abc"])
    with pytest.raises(ConfigError):
        expand_grid(small(), parse_grid(["tau=-1"]))


def test_mark_best_prefers_first_on_ties():
    docs = [run(small(rounds=1)) for _ in range(3)]
    docs[1].final_metrics["accuracy"] = 2.0
    mark_best(docs)
    assert [d.best for d in docs] == [False, True, False]
    for d in docs:
        d.final_metrics["accuracy"] = 0.5
    mark_best(docs)
    assert [d.best for d in docs] == [True, False, False]


def test_cli_grid_writes_three_reports(tmp_path, capsys):
    cfg_path = tmp_path / "exp.ini"
    cfg_path.write_text(SMALL, encoding="utf-8")
    code = main(["--config", str(cfg_path), "--grid", "tau=0.05,0.1,0.2", "--out", str(tmp_path / "sweep")])
    assert code == 0
    reports = sorted(tmp_path.glob("sweep__*.jsonl"))
    assert [r.name for r in reports] == ["sweep__tau=0.05.jsonl", "sweep__tau=0.1.jsonl", "sweep__tau=0.2.jsonl"]
    bests = [json.loads(r.read_text().splitlines()[0])["best"] for r in reports]
    assert sorted(bests) == [False, False, True]
    assert capsys.readouterr().out.count("*best*") == 1


def test_cli_seed_override_and_print_config(tmp_path, capsys):
    cfg_path = tmp_path / "exp.ini"
    cfg_path.write_text(SMALL, encoding="utf-8")
    assert main(["--config", str(cfg_path), "--seed", "11", "--print-config"]) == 0
    printed = capsys.readouterr().out
    assert parse_config(printed).seed == 11


def test_cli_errors_are_structured(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[federation]\ntau = -1\n", encoding="utf-8")
    assert main(["--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "line 2" in err["message"]
    assert main(["--config", str(tmp_path / "missing.ini")]) == 2


def test_cli_parallel_grid_matches_serial(tmp_path):
    cfg_path = tmp_path / "exp.ini"
    cfg_path.write_text(SMALL, encoding="utf-8")
    args = ["--config", str(cfg_path), "--grid", "beta=0.001,0.01"]
    assert main(args + ["--out", str(tmp_path / "serial")]) == 0
    assert main(args + ["--out", str(tmp_path / "par"), "--jobs", "2"]) == 0
    for beta in ("0.001", "0.01"):
        s = (tmp_path / f"serial__beta={beta}.jsonl").read_text().splitlines()
        p = (tmp_path / f"par__beta={beta}.jsonl").read_text().splitlines()
        assert s[1:] == p[1:]
        hs, hp = json.loads(s[0]), json.loads(p[0])
        hs.pop("wall_clock_seconds"), hp.pop("wall_clock_seconds")
        assert hs == hp
