import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fedselect.cli import run_cli
from fedselect.config import parse_config
from fedselect.exceptions import BadConfig, ConfigConflict, UnknownKey
from fedselect.experiment import run_experiment
from fedselect.reporting import HEADER, IoError, MetricsRow, emit_metrics_csv, read_metrics_csv, summarize

TINY_TASK = {"kind": "synthetic_tag", "clients": 10, "vocab": 50, "tags": 4, "valid_clients": 3,
             "test_clients": 3, "topics": 4, "topic_vocab": 10}


# config


def test_minimal_config_is_fully_defaulted():
    cfg = parse_config('{"task": "synthetic_tag", "model": "sparse_logreg"}')
    assert cfg.selection.plan == "none"
    assert cfg.training.client_lr == 0.1 and cfg.training.server_lr == 0.1
    assert cfg.training.tau == 1e-7 and cfg.training.beta1 == 0.9 and cfg.training.beta2 == 0.999
    assert cfg.delivery.mode == "on_demand"
    assert cfg.to_dict()["training"]["rounds"] == 100


def test_unknown_keys_report_path():
    with pytest.raises(UnknownKey) as info:
        parse_config('{"task": "synthetic_tag", "model": "sparse_logreg", "training": {"round": 3}}')
    assert info.value.path == "training.round"
    with pytest.raises(UnknownKey) as info:
        parse_config('{"task": {"kind": "synthetic_dense", "vocab": 3}, "model": "mlp"}')
    assert info.value.path == "task.vocab"
    with pytest.raises(UnknownKey):
        parse_config('{"task": "synthetic_tag", "model": "sparse_logreg", "extra": 1}')


@pytest.mark.parametrize("doc", [
    {"task": "synthetic_dense", "model": "mlp", "selection": {"strategy": "top"}},
    {"task": "synthetic_tag", "model": "sparse_logreg", "selection": {"plan": "neuron"}},
    {"task": "synthetic_tag", "model": "sparse_logreg", "selection": {"plan": "mixed"}},
    {"task": "synthetic_tag", "model": "mlp"},
    {"task": "synthetic_dense", "model": "sparse_logreg"},
    {"task": "synthetic_tag", "model": "sparse_mlp", "selection": {"plan": "mixed", "alpha": 0}},
    {"task": "synthetic_tag", "model": "sparse_logreg", "selection": {"plan": "row", "shared_per_round": True}},
    {"task": "synthetic_dense", "model": {"kind": "mlp", "hidden": 4}, "selection": {"plan": "neuron", "m": 5}},
])
def test_conflicting_configs(doc):
    with pytest.raises(ConfigConflict):
        parse_config(json.dumps(doc))


def test_bad_values_and_syntax():
    with pytest.raises(BadConfig):
        parse_config("{not json")
    with pytest.raises(BadConfig):
        parse_config('{"task": "synthetic_tag", "model": "sparse_logreg", "training": {"rounds": "ten"}}')
    with pytest.raises(BadConfig):
        parse_config('{"task": "synthetic_tag", "model": "resnet"}')
    with pytest.raises(BadConfig):
        parse_config('{"model": "sparse_logreg"}')


def test_plan_inferred_from_strategy():
    cfg = parse_config('{"task": "synthetic_tag", "model": "sparse_logreg", "selection": {"strategy": "random"}}')
    assert cfg.selection.plan == "row"
    cfg = parse_config('{"task": "synthetic_dense", "model": "mlp", "selection": {"plan": "neuron"}}')
    assert cfg.selection.strategy == "uniform"


def test_mixed_alpha_one_equals_no_select():
    doc = {"task": TINY_TASK, "model": {"kind": "sparse_mlp", "hidden": 6, "embed": 4},
           "training": {"rounds": 4, "cohort_size": 4, "server_lr": 1.0}}
    h0, h1 = {}, {}
    run_experiment(parse_config(json.dumps(doc)), history=h0)
    doc["selection"] = {"plan": "mixed", "alpha": 1.0}
    run_experiment(parse_config(json.dumps(doc)), history=h1)
    # hidden units arrive in a shuffled order, so only summation order differs
    for a, b in zip(h0[0], h1[0]):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# reporting


def row(**kw):
    base = dict(trial=0, round=1, phase="train", metric="loss", value=0.5)
    base.update(kw)
    return MetricsRow(**base)


def test_empty_rows_header_only(tmp_path):
    emit_metrics_csv([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(HEADER) + "\n"
    assert ",".join(HEADER) == "trial,round,phase,metric,value,scalars_down,scalars_up,psi_evals,wasted_slices,rel_model_size"


def test_row_round_trip(tmp_path):
    r = row(value=0.1 + 0.2, scalars_down=12, scalars_up=7, psi_evals=3, wasted_slices=1, rel_model_size=1 / 3)
    emit_metrics_csv([r], tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == [r]
    with open(tmp_path / "m.csv", newline="") as fh:
        rec = list(csv.DictReader(fh))[0]
    assert float(rec["value"]) == 0.1 + 0.2


def test_rows_sorted_after_shuffle(tmp_path):
    rng = np.random.default_rng(0)
    rows = [row(trial=t, round=r, phase=p, metric=m, value=float(rng.random()))
            for t in range(2) for r in range(3) for p in ("train", "valid") for m in ("a", "b")]
    shuffled = [rows[i] for i in rng.permutation(len(rows))]
    emit_metrics_csv(shuffled, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [r.sort_key for r in back] == sorted(r.sort_key for r in rows)


def test_unwritable_path_and_finite_rows(tmp_path):
    with pytest.raises(IoError):
        emit_metrics_csv([row()], tmp_path / "missing" / "m.csv")
    with pytest.raises(ValueError):
        row(value=float("nan"))


def test_summarize_mean_std():
    rows = [row(trial=t, phase="valid", metric="acc", round=5, value=v) for t, v in enumerate([0.2, 0.4])]
    (key, (mean, std, n)), = summarize(rows).items()
    assert key == (5, "acc") and n == 2
    assert mean == pytest.approx(0.3) and std == pytest.approx(0.1)


# cli


def write_cfg(tmp_path, **extra):
    doc = {"task": TINY_TASK, "model": "sparse_logreg", "selection": {"plan": "row", "m": 4},
           "training": {"rounds": 3, "cohort_size": 3, "eval_every": 2, "trials": 2}}
    doc.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_cli_writes_outputs_and_overrides(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert run_cli(["--config", str(cfg), "--output-dir", str(out), "--rounds", "1", "--seed", "9", "--quiet"]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["training"]["rounds"] == 1 and resolved["training"]["seed"] == 9
    rows = read_metrics_csv(out / "metrics.csv")
    assert {r.round for r in rows} == {1}
    assert capsys.readouterr().out == ""


def test_cli_exit_codes(tmp_path, capsys):
    assert run_cli([]) == 1
    assert "--config" in capsys.readouterr().err
    assert run_cli(["--config", str(tmp_path / "nope.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"task": "synthetic_dense", "model": "mlp", "selection": {"strategy": "top"}}')
    assert run_cli(["--config", str(bad)]) == 1
    assert "config error" in capsys.readouterr().err
    shard = tmp_path / "shard.json"
    shard.write_text(json.dumps({"task": {"kind": "shard_path", "train": str(tmp_path / "missing")},
                                 "model": "sparse_logreg", "output_dir": str(tmp_path / "o")}))
    assert run_cli(["--config", str(shard)]) == 2


def test_cli_two_processes_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    outputs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        proc = subprocess.run([sys.executable, "-m", "fedselect", "--config", str(cfg), "--output-dir", str(out),
                               "--quiet"], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_cli_shard_task(tmp_path):
    from fedselect.data import gen_sparse_tag_dataset, SyntheticTagConfig, write_client_shards

    splits = gen_sparse_tag_dataset(SyntheticTagConfig(clients=6, vocab=40, tags=3, valid_clients=2,
                                                       test_clients=2, topics=3, topic_vocab=10))
    write_client_shards(splits.train, tmp_path / "train")
    write_client_shards(splits.test, tmp_path / "test")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"task": {"kind": "shard_path", "train": str(tmp_path / "train"),
                                        "test": str(tmp_path / "test")},
                               "model": "sparse_logreg", "training": {"rounds": 2, "cohort_size": 2},
                               "output_dir": str(tmp_path / "o")}))
    assert run_cli(["--config", str(cfg), "--quiet"]) == 0
    phases = {r.phase for r in read_metrics_csv(tmp_path / "o" / "metrics.csv")}
    assert phases == {"train", "valid", "test"}
