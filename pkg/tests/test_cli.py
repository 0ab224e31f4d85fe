import filecmp
import json

import pytest

from vmfnet.cli import main
from vmfnet.networks import EncoderConfig, ModelConfig
from vmfnet.training import TrainConfig, dump_config

SUBCOMMANDS = ["gen-data", "train", "eval", "ttt", "ablate", "probe", "viz"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main([
        "gen-data", "--out", str(data), "--seed", "2", "--num-domains", "3",
        "--subjects-per-domain", "4", "--slices-per-subject", "2", "--size", "32",
    ]) == 0
    enc = EncoderConfig(depth=2, base_channels=4, feature_dim=8, input_size=(32, 32))
    cfg = TrainConfig(learning_rate=3e-3, iterations=6, log_every=3, checkpoint_every=3,
                      model=ModelConfig(encoder=enc, num_kernels=4, head_hidden=4))
    dump_config(cfg, root / "tiny.yaml")
    run = root / "run"
    assert main([
        "train", "--config", str(root / "tiny.yaml"), "--data", str(data), "--holdout", "C",
        "--labeled-fraction", "0.5", "--out", str(run), "--seed", "1",
    ]) == 0
    return root, data, run, run / "checkpoints" / "final.ckpt"


def manifest(path):
    return json.loads((path / "run_manifest.json").read_text())


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--threads", "--log-level", "--out"):
        assert flag in text
    assert "default" in text


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", "x", "--bogus"])
    assert e.value.code == 2


def test_gen_data_deterministic(tmp_path):
    args = ["--seed", "7", "--num-domains", "2", "--subjects-per-domain", "2", "--slices-per-subject", "1", "--size", "32"]
    assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
    files = sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*.png"))
    files.append("manifest.json")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors
    m = manifest(tmp_path / "a")
    assert m["subcommand"] == "gen-data" and m["seed"] == 7
    assert "manifest.json" in m["outputs"]


def test_gen_data_bad_count_exit_3(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--subjects-per-domain", "0"]) == 3
    assert "config error" in capsys.readouterr().err


def test_train_unknown_holdout_exit_3(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    assert main(["train", "--data", str(data), "--holdout", "Z", "--out", str(tmp_path / "r")]) == 3
    err = capsys.readouterr().err
    assert "'Z'" in err and "['A', 'B', 'C']" in err


def test_train_missing_dataset_exit_4(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--holdout", "A", "--out", str(tmp_path / "r")]) == 4
    assert "nope" in capsys.readouterr().err


def test_bad_config_value_exit_3(workspace, tmp_path):
    _, data, _, _ = workspace
    (tmp_path / "bad.yaml").write_text("learning_rate: -1\n")
    code = main(["train", "--config", str(tmp_path / "bad.yaml"), "--data", str(data), "--holdout", "A",
                 "--out", str(tmp_path / "r")])
    assert code == 3


def test_eval_without_checkpoint_exit_4(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    missing = tmp_path / "run" / "checkpoints" / "final.ckpt"
    assert main(["eval", "--checkpoint", str(missing), "--data", str(data), "--out", str(tmp_path / "e")]) == 4
    assert str(missing) in capsys.readouterr().err


def test_train_outputs_and_manifest(workspace):
    root, data, run, ckpt = workspace
    assert ckpt.is_file()
    assert (run / "metrics.jsonl").is_file() and (run / "config.yaml").is_file()
    m = manifest(run)
    assert m["subcommand"] == "train"
    assert m["seed"] == 1
    assert m["config"]["resolved"]["labeled_fraction"] == 0.5
    assert m["config"]["resolved"]["iterations"] == 6  # from the config file
    assert str(data / "manifest.json") in m["inputs"]
    assert "checkpoints/final.ckpt" in m["outputs"]
    assert m["started"] <= m["finished"]


def test_train_rerun_is_bit_identical(workspace, tmp_path):
    root, data, run, ckpt = workspace
    m = manifest(run)["config"]
    code = main([
        "train", "--config", m["config"], "--data", m["data"], "--holdout", m["holdout"],
        "--labeled-fraction", str(m["labeled_fraction"]), "--seed", str(m["seed"]), "--out", str(tmp_path / "again"),
    ])
    assert code == 0
    assert (tmp_path / "again" / "checkpoints" / "final.ckpt").read_bytes() == ckpt.read_bytes()


def test_eval_outputs(workspace, tmp_path, capsys):
    _, data, _, ckpt = workspace
    before = ckpt.read_bytes()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e"),
                 "--hd-variant", "standard"]) == 0
    out = capsys.readouterr().out
    assert "held-out domain C" in out and "LV" in out
    rows = [json.loads(x) for x in (tmp_path / "e" / "metrics.jsonl").read_text().splitlines()]
    assert rows[-1]["kind"] == "summary" and rows[-1]["hd_variant"] == "standard"
    assert len(rows) == 5
    assert ckpt.read_bytes() == before  # inputs are read-only
    assert str(ckpt) in manifest(tmp_path / "e")["inputs"]


def test_ttt_outputs(workspace, tmp_path):
    _, data, _, ckpt = workspace
    assert main(["ttt", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "t"),
                 "--iterations", "3"]) == 0
    rows = [json.loads(x) for x in (tmp_path / "t" / "ttt.jsonl").read_text().splitlines()]
    assert len(rows) == 4
    assert all(r["rec_error_after"] <= r["rec_error_before"] for r in rows)
    traces = [json.loads(x) for x in (tmp_path / "t" / "selection_trace.jsonl").read_text().splitlines()]
    assert all(len(t["errors"]) == 4 for t in traces)
    assert (tmp_path / "t" / "ttt.txt").is_file()


def test_probe_outputs(workspace, tmp_path):
    _, data, _, ckpt = workspace
    assert main(["probe", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "p")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "p" / "probe.jsonl").read_text().splitlines()]
    assert [r["representation"] for r in rows] == ["image", "features", "likelihoods"]
    assert all(r["cross_entropy"] > 0 for r in rows)


def test_viz_outputs(workspace, tmp_path):
    _, data, _, ckpt = workspace
    out = tmp_path / "v"
    assert main(["viz", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out), "--top-k", "3"]) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 6
    assert manifest(out)["outputs"] == sorted(pngs)
    assert main(["viz", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out), "--top-k", "5"]) == 3


def test_ablate_outputs(workspace, tmp_path):
    root, data, _, _ = workspace
    assert main(["ablate", "--config", str(root / "tiny.yaml"), "--data", str(data), "--holdout", "B",
                 "--iterations", "2", "--out", str(tmp_path / "a")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "a" / "ablation.jsonl").read_text().splitlines()]
    assert [r["variant"] for r in rows] == ["full", "no_rec", "no_vmf", "neither"]
