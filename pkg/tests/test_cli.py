import json

import numpy as np
import pytest

from gcn_cert import cli, gcn
from gcn_cert.cli import CliError, load_dataset, main, parse_config


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture
def dataset(tmp_path):
    """Path graph 0-1-2 with 2 sparse binary features and 2 classes."""
    edges = _write(tmp_path / "edges.tsv", "0\t1\n1\t2\n")
    attrs = _write(tmp_path / "attrs.tsv", "0\t0\n1\t1\n2\t0\n2\t1\n")
    labels = _write(tmp_path / "labels.tsv", "0\t0\n1\t1\n")
    split = _write(tmp_path / "split.tsv", "0\tlabeled\n1\tlabeled\n2\tunlabeled\n")
    return {"edges": edges, "attributes": attrs, "labels": labels, "split": split}


@pytest.fixture
def checkpoint(tmp_path, dataset):
    params = gcn.glorot_params([2, 3, 2], seed=0)
    for b in params.biases:
        b += 0.05
    path = tmp_path / "model.json"
    gcn.save_checkpoint(params, path)
    return str(path)


# -- load_dataset ----------------------------------------------------------


def test_load_dataset_edges_and_attrs(dataset):
    bundle = load_dataset(dataset["edges"], dataset["attributes"], labels_path=dataset["labels"])
    g = bundle.graph
    assert g.num_nodes == 3 and g.num_features == 2 and g.num_classes == 2
    A = g.dense_adjacency()
    assert A[0, 1] == A[1, 0] == 1.0 and A[0, 2] == 0.0
    X = g.dense_attributes()
    np.testing.assert_array_equal(X, [[1, 0], [0, 1], [1, 1]])
    np.testing.assert_array_equal(g.labels, [0, 1, -1])


def test_load_dataset_duplicate_edges_deduplicated(tmp_path, dataset):
    edges = _write(tmp_path / "dup.tsv", "0\t1\n1\t0\n0\t1\n")
    bundle = load_dataset(edges, dataset["attributes"], num_classes=2)
    assert bundle.graph.dense_adjacency().sum() == 2.0  # one mirrored edge


def test_load_dataset_sparse_triplet(tmp_path):
    edges = _write(tmp_path / "e.tsv", "")
    attrs = _write(tmp_path / "a.tsv", "3\t7\n")
    g = load_dataset(edges, attrs, num_nodes=4, num_features=10, num_classes=2).graph
    X = g.dense_attributes()
    assert X[3, 7] == 1.0 and X.sum() == 1.0


def test_load_dataset_dense_csv(tmp_path):
    edges = _write(tmp_path / "e.tsv", "0\t1\n")
    attrs = _write(tmp_path / "a.csv", "1,0\n0,1\n")
    g = load_dataset(edges, attrs, num_classes=2).graph
    np.testing.assert_array_equal(g.dense_attributes(), np.eye(2))


def test_load_dataset_errors(tmp_path, dataset):
    bad = _write(tmp_path / "bad.tsv", "0\t1\nnope\n")
    with pytest.raises(CliError, match=r"bad\.tsv:2"):
        load_dataset(bad, dataset["attributes"])
    bad_attr = _write(tmp_path / "bad.csv", "1,0\n0,0.5\n")
    with pytest.raises(CliError, match="not 0/1"):
        load_dataset(dataset["edges"], bad_attr, num_classes=2)
    bad_int = _write(tmp_path / "badint.tsv", "0\tx\n")
    with pytest.raises(CliError, match="badint.tsv:1"):
        load_dataset(dataset["edges"], bad_int)
    with pytest.raises(CliError, match="num_classes"):
        load_dataset(dataset["edges"], dataset["attributes"])
    oob = _write(tmp_path / "oob.tsv", "0\t9\n")
    with pytest.raises(CliError, match="node id >= N"):
        load_dataset(oob, dataset["attributes"], num_nodes=3, num_classes=2)


# -- parse_config ----------------------------------------------------------


def test_parse_config_round_trip(tmp_path):
    cfg = _write(
        tmp_path / "train.cfg",
        "# comment\nmode = RH\nseed = 3\nlearning_rate = 0.01\nuse_dropout = false\n",
    )
    parsed = parse_config(cfg)
    assert parsed == {"mode": "RH", "seed": 3, "learning_rate": 0.01, "use_dropout": False}


def test_parse_config_unknown_key_lists_valid_keys(tmp_path):
    cfg = _write(tmp_path / "bad.cfg", "learningrate = 0.1\n")
    with pytest.raises(CliError, match="unknown key 'learningrate'.*valid keys.*learning_rate"):
        parse_config(cfg)


def test_parse_config_bad_value(tmp_path):
    cfg = _write(tmp_path / "bad.cfg", "seed = soon\n")
    with pytest.raises(CliError, match="bad value 'soon'"):
        parse_config(cfg)


# -- train command ---------------------------------------------------------


def _train_cfg(tmp_path, dataset, extra=""):
    ckpt = tmp_path / "out.json"
    text = (
        f"edges = {dataset['edges']}\n"
        f"attributes = {dataset['attributes']}\n"
        f"labels = {dataset['labels']}\n"
        f"split = {dataset['split']}\n"
        "mode = CE\nmax_epochs = 2\npatience = 2\nhidden_dims = 2\n"
        f"checkpoint_out = {ckpt}\n" + extra
    )
    return _write(tmp_path / "train.cfg", text), ckpt


def test_cmd_train_writes_loadable_checkpoint(tmp_path, dataset, capsys):
    cfg, ckpt = _train_cfg(tmp_path, dataset, extra=f"log_out = {tmp_path / 'log.csv'}\n")
    assert main(["train", cfg]) == 0
    params = gcn.load_checkpoint(ckpt)
    assert params.dims == [2, 2, 2]
    log = (tmp_path / "log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,phase,loss")
    assert len(log) >= 2
    assert "trained mode=CE" in capsys.readouterr().out


def test_cmd_train_missing_labels_no_partial_checkpoint(tmp_path, dataset, capsys):
    cfg, ckpt = _train_cfg(tmp_path, dataset)
    missing = {**dataset, "labels": str(tmp_path / "absent.tsv")}
    cfg, ckpt = _train_cfg(tmp_path, missing)
    assert main(["train", cfg]) == 2
    assert not ckpt.exists()
    assert "error:" in capsys.readouterr().err


def test_cmd_train_is_deterministic(tmp_path, dataset):
    cfg, ckpt = _train_cfg(tmp_path, dataset)
    assert main(["train", cfg]) == 0
    first = ckpt.read_bytes()
    assert main(["train", cfg]) == 0
    assert ckpt.read_bytes() == first


# -- certify / curve / attack ----------------------------------------------


def _dataset_args(dataset):
    return [
        "--edges", dataset["edges"],
        "--attributes", dataset["attributes"],
        "--labels", dataset["labels"],
        "--split", dataset["split"],
    ]


def test_cmd_certify_zero_budget_all_robust(tmp_path, dataset, checkpoint, capsys):
    out = tmp_path / "certs.jsonl"
    rc = main(
        ["certify", "--checkpoint", checkpoint, *_dataset_args(dataset),
         "--q", "1", "--Q", "0", "--workers", "1", "--output", str(out)]
    )
    assert rc == 0
    docs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(docs) == 3
    assert all(doc["status"] == "robust" for doc in docs)
    assert all(doc["Q"] == 0 for doc in docs)
    assert "robust=3" in capsys.readouterr().out


def test_cmd_certify_node_out_of_range(dataset, checkpoint, capsys):
    rc = main(
        ["certify", "--checkpoint", checkpoint, *_dataset_args(dataset),
         "--q", "1", "--Q", "1", "--nodes", "7"]
    )
    assert rc == 2
    assert "out of range" in capsys.readouterr().err


def test_cmd_certify_dimension_mismatch(tmp_path, dataset, capsys):
    params = gcn.glorot_params([5, 3, 2], seed=0)
    ckpt = tmp_path / "wide.json"
    gcn.save_checkpoint(params, ckpt)
    rc = main(
        ["certify", "--checkpoint", str(ckpt), *_dataset_args(dataset),
         "--q", "1", "--Q", "1"]
    )
    assert rc == 2
    err = capsys.readouterr().err
    assert "D=5" in err and "D=2" in err


def test_cmd_curve_zero_budget(tmp_path, dataset, checkpoint):
    out = tmp_path / "curve.csv"
    rc = main(
        ["curve", "--checkpoint", checkpoint, *_dataset_args(dataset),
         "--q", "1", "--Q-max", "0", "--workers", "1", "--output", str(out)]
    )
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == (
        "Q,split,fraction_certified_robust,fraction_certified_nonrobust,fraction_undecided"
    )
    rows = [line.split(",") for line in lines[1:]]
    assert {r[1] for r in rows} == {"all", "labeled", "unlabeled"}
    for r in rows:
        assert r[0] == "0"
        assert float(r[2]) == 1.0  # empty budget: everything certified robust
        assert float(r[2]) + float(r[3]) + float(r[4]) == pytest.approx(1.0, abs=1e-12)


def test_cmd_attack_zero_budget_message(dataset, checkpoint, capsys):
    rc = main(
        ["attack", "--checkpoint", checkpoint, *_dataset_args(dataset),
         "--node", "0", "--q", "1", "--Q", "0"]
    )
    assert rc == 0
    assert "no admissible perturbation" in capsys.readouterr().out


def test_cmd_attack_reports_flips(dataset, checkpoint, capsys):
    rc = main(
        ["attack", "--checkpoint", checkpoint, *_dataset_args(dataset),
         "--node", "1", "--q", "1", "--Q", "2"]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "y_star=" in out and "flips=" in out
    assert ("prediction flipped" in out) or ("prediction unchanged" in out)


# -- verification commands -------------------------------------------------


def test_cmd_oracle_verify_passes(capsys):
    rc = main(["oracle-verify", "--instances", "3", "--seed", "0", "--pga-steps", "10"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "failures=0" in out


def test_cmd_grad_check_passes(capsys):
    rc = main(["grad-check", "--draws", "2", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    for mode in ("CE", "RCE", "RH", "RH_U"):
        assert f"{mode}: max relative error" in out
