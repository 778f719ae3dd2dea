"""End-to-end checks of the command-line entry points.

Everything goes through cli.main(argv) in-process so exit codes and the
files written by each subcommand can be asserted directly.
"""

import json
import os

import pytest

from dualbind import cli, data, train


TINY_MODEL = {"width": 16, "layers": 1, "heads": 2, "rbf_bins": 4, "pocket_k": 6}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: a tiny dataset, its splits, and one trained run."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "root": root,
        "data": root / "tiny.jsonl",
        "splits": root / "splits",
        "config": root / "tiny_model.json",
        "run": root / "run",
    }
    paths["config"].write_text(json.dumps(TINY_MODEL))
    assert run("synth", "--out", paths["data"], "--n-complexes", 24,
               "--ligands", 6, "--pocket-residues", 3, "--ligand-atoms", 5, 8,
               "--seed", 11) == 0
    assert run("split", "--data", paths["data"], "--out-dir", paths["splits"],
               "--seed", 3) == 0
    paths["train"] = paths["splits"] / "data.train.jsonl"
    paths["val"] = paths["splits"] / "data.val.jsonl"
    paths["test"] = paths["splits"] / "data.test.jsonl"
    assert run("train", "--train", paths["train"], "--val", paths["val"],
               "--out-dir", paths["run"], "--config", paths["config"],
               "--epochs", 2, "--batch-size", 8, "--seed", 7) == 0
    return paths


def test_version_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    assert "dualbind" in capsys.readouterr().out


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run()
    assert exc.value.code == 2


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run("synth", "--out", out, "--n", 10, "--pocket-residues", 3,
                   "--seed", 4) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(data.load_dataset(a)) == 10


def test_split_files_are_disjoint_by_ligand(ws):
    parts = [data.load_dataset(ws["splits"] / f"data.{p}.jsonl")
             for p in data.PARTITIONS]
    smiles = [{r.smiles for r in rs} for rs in parts]
    assert sum(len(rs) for rs in parts) == 24
    assert not (smiles[0] & smiles[1] or smiles[0] & smiles[2]
                or smiles[1] & smiles[2])


def test_split_bad_fractions_is_usage_error(ws, tmp_path):
    assert run("split", "--data", ws["data"], "--out-dir", tmp_path,
               "--fractions", 0.5, 0.5, 0.5) == 2
    assert run("split", "--data", ws["data"], "--out-dir", tmp_path,
               "--fractions", "0.7,0.15") == 2


def test_split_accepts_comma_fractions_and_writes_manifest(ws, tmp_path):
    assert run("split", "--data", ws["data"], "--out-dir", tmp_path,
               "--fractions", "0.7,0.15,0.15", "--seed", 3) == 0
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "split"
    assert manifest["fractions"] == [0.7, 0.15, 0.15]
    assert sum(manifest["records"].values()) == 24
    # split files written with the same seed match the shared workspace
    for p in data.PARTITIONS:
        assert ((tmp_path / f"data.{p}.jsonl").read_bytes()
                == (ws["splits"] / f"data.{p}.jsonl").read_bytes())


def test_missing_data_file_fails_cleanly(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "no" / "dir" / "x.jsonl") == 1
    assert run("eval", "--data", tmp_path / "absent.jsonl", "--checkpoint",
               tmp_path, "--out-dir", tmp_path) == 1
    assert "dualbind" in capsys.readouterr().err


def test_train_writes_artifacts(ws):
    import hashlib

    for name in ("last.ckpt", "best.ckpt", "history.csv", "run_manifest.json"):
        assert (ws["run"] / name).exists()
    manifest = json.loads((ws["run"] / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["variant"] == "full"
    assert manifest["model_config"]["width"] == TINY_MODEL["width"]
    assert manifest["n_train"] == 16
    assert "created_utc" in manifest
    # recorded hashes must match the artifacts on disk
    for name, digest in manifest["output_sha256"].items():
        assert hashlib.sha256((ws["run"] / name).read_bytes()).hexdigest() == digest
    assert str(ws["train"]) in manifest["input_sha256"]
    rows = train.read_history(ws["run"] / "history.csv")
    assert [r[0] for r in rows] == [0, 1]


def test_train_lambda_zero_skips_denoising(ws, tmp_path):
    out = tmp_path / "mse_only"
    assert run("train", "--train", ws["train"], "--out-dir", out,
               "--config", ws["config"], "--epochs", 2, "--lambda", 0,
               "--seed", 1) == 0
    rows = train.read_history(out / "history.csv")
    assert all(r[3] == 0.0 for r in rows)
    assert all(r[4] == r[2] for r in rows)


def test_pipeline_repeats_bit_identical(ws, tmp_path):
    """Same seeds end to end must reproduce the metric files byte for byte."""
    outs = []
    for tag in ("p1", "p2"):
        d = tmp_path / tag
        d.mkdir()
        assert run("synth", "--out", d / "d.jsonl", "--n", 24, "--ligands", 6,
                   "--pocket-residues", 3, "--ligand-atoms", 5, 7,
                   "--seed", 21) == 0
        assert run("split", "--data", d / "d.jsonl", "--out-dir", d, "--seed",
                   9) == 0
        assert run("train", "--train", d / "data.train.jsonl", "--out-dir",
                   d / "run", "--config", ws["config"], "--epochs", 2,
                   "--seed", 13) == 0
        assert run("eval", "--data", d / "data.test.jsonl", "--checkpoint",
                   d / "run", "--out-dir", d / "eval") == 0
        outs.append(d)
    for name in ("eval/metrics.csv", "eval/predictions.csv", "run/last.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_writes_metrics_and_predictions(ws, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run("eval", "--data", ws["test"], "--checkpoint", ws["run"],
               "--out-dir", out) == 0
    assert "rmse" in capsys.readouterr().out
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "n,rmse,pearson,spearman,r2"
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0] == "complex_id,label,prediction,prediction_capped"
    # capped column respects the default threshold
    for line in lines[1:]:
        assert float(line.split(",")[3]) <= data.CAP_THRESHOLD + 1e-12


def test_eval_no_cap_keeps_raw_predictions(ws, tmp_path):
    out = tmp_path / "raw"
    assert run("eval", "--data", ws["test"], "--checkpoint", ws["run"],
               "--out-dir", out, "--no-cap") == 0
    for line in (out / "predictions.csv").read_text().splitlines()[1:]:
        _, _, pred, capped = line.split(",")
        assert pred == capped


def test_predict_stdout_and_file_agree(ws, tmp_path, capsys):
    assert run("predict", "--data", ws["test"], "--ckpt",
               ws["run"] / "best.ckpt") == 0
    printed = capsys.readouterr().out.strip().splitlines()
    out = tmp_path / "p.csv"
    assert run("predict", "--data", ws["test"], "--checkpoint", ws["run"],
               "--out", out) == 0
    written = out.read_text().strip().splitlines()
    assert printed == written
    assert len(written) - 1 == len(data.load_dataset(ws["test"]))


def test_checkpoint_dir_prefers_best(ws):
    # both forms must resolve; the dir picks best.ckpt first
    direct, dpath = cli._resolve_checkpoint(str(ws["run"] / "best.ckpt"))
    via_dir, vpath = cli._resolve_checkpoint(str(ws["run"]))
    assert dpath == vpath
    assert direct.epoch == via_dir.epoch
    assert direct.best_epoch == via_dir.best_epoch


def test_checkpoint_dir_without_files_fails(tmp_path):
    assert run("eval", "--data", tmp_path / "x.jsonl", "--checkpoint",
               tmp_path, "--out-dir", tmp_path) == 1


def test_bench_reports_latency(ws, capsys):
    assert run("bench", "--data", ws["val"], "--checkpoint", ws["run"],
               "--repeats", 2) == 0
    assert "ms/complex" in capsys.readouterr().out


def test_bench_group_sizes(ws, capsys):
    assert run("bench", "--data", ws["val"], "--checkpoint", ws["run"],
               "--repeats", 1, "--batch-sizes", "1,2") == 0
    out = capsys.readouterr().out
    assert "groups of 1" in out and "groups of 2" in out


def test_bench_without_checkpoint_uses_fresh_params(ws, capsys):
    assert run("bench", "--n", 2, "--config", ws["config"], "--repeats",
               1) == 0
    assert "parameters" in capsys.readouterr().out


def test_inspect_json_report(ws, capsys):
    assert run("inspect", "--data", ws["data"], "--checkpoint", ws["run"],
               "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["dataset"]["records"] == 24
    assert report["dataset"]["ligands"] == 6
    assert report["checkpoint"]["variant"] == "full"
    assert report["checkpoint"]["format_version"] == train.CHECKPOINT_VERSION
    assert report["checkpoint"]["model_config"]["width"] == TINY_MODEL["width"]


def test_inspect_needs_a_target(capsys):
    assert run("inspect") == 2
    assert "inspect" in capsys.readouterr().err


def test_ligand_only_round_trip(ws, tmp_path):
    out = tmp_path / "lo"
    assert run("train", "--train", ws["train"], "--out-dir", out, "--config",
               ws["config"], "--epochs", 2, "--ligand-only", "--seed", 2) == 0
    ckpt = train.load_checkpoint(out / "best.ckpt")
    assert ckpt.variant == "ligand_only"
    # eval dispatches on the stored variant, no flag needed
    assert run("eval", "--data", ws["test"], "--checkpoint", out,
               "--out-dir", out / "ev") == 0
    manifest = json.loads((out / "ev" / "run_manifest.json").read_text())
    assert manifest["variant"] == "ligand_only"


def test_resume_continues_epoch_numbering(ws, tmp_path):
    out = tmp_path / "resumed"
    assert run("train", "--train", ws["train"], "--val", ws["val"],
               "--out-dir", out, "--config", ws["config"], "--epochs", 4,
               "--seed", 7, "--resume", ws["run"]) == 0
    rows = train.read_history(out / "history.csv")
    assert [r[0] for r in rows] == [2, 3]
    assert train.load_checkpoint(out / "last.ckpt").epoch == 4


def test_train_config_json_file(ws, tmp_path):
    spec = tmp_path / "sched.json"
    spec.write_text(json.dumps({"lr": 1e-3, "epochs": 1, "lam": 0.0}))
    out = tmp_path / "run"
    assert run("train", "--train", ws["train"], "--out-dir", out, "--config",
               ws["config"], "--train-config", spec) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["train_config"]["lr"] == 1e-3
    assert manifest["train_config"]["epochs"] == 1


def test_invalid_model_config_is_usage_error(ws, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"width": 15, "heads": 2}))
    assert run("train", "--train", ws["train"], "--out-dir", tmp_path / "x",
               "--config", bad, "--epochs", 1) == 2


def test_thread_env_applied(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._apply_thread_env()
    assert all(os.environ[v] == "2" for v in cli._THREAD_VARS)


def test_thread_env_rejects_garbage(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    with pytest.raises(SystemExit) as exc:
        cli._apply_thread_env()
    assert exc.value.code == 2
