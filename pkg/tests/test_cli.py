import json
import math

import pytest

from psftlab import cli
from psftlab.diagnostics import parse_trace

SMALL = {
    "policy": {"layers": 1, "heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 16},
    "data": {"sizes": {"pretrain": 128, "expert_train": 64, "indomain_eval": 32,
                       "ood_eval": 32, "rl_prompts": 8, "dpo_train": 16, "dpo_eval": 8}},
    "train": {"epochs": 2, "train_batch": 32, "mini_batch": 8},
    "eval_sample_k": 2,
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err.strip().splitlines()[-1]))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    conf = root / "small.json"
    conf.write_text(json.dumps(SMALL))
    code = cli.main(["pretrain", "--config", str(conf), "--out-root", str(root),
                     "--run-id", "base", "--epochs", "1"])
    assert code == 0
    return root, conf


def test_finetune_contract(capsys, workspace):
    root, conf = workspace
    code, rec = run(capsys, "finetune", "--config", conf, "--out-root", root, "--run-id", "ft",
                    "--init", root / "base" / "final.ckpt", "--method", "psft",
                    "--epsilon", "0.28", "--warmup-epochs", "1")
    assert code == 0 and rec["status"] == "ok"
    d = root / "ft"
    for f in ("config.json", "log.jsonl", "clip_events.jsonl", "metrics.csv", "epoch_1.ckpt",
              "epoch_2.ckpt", "final.ckpt"):
        assert (d / f).is_file(), f
    assert len((d / "log.jsonl").read_text().splitlines()) == 2 * 2 * 4
    header = (d / "metrics.csv").read_text().splitlines()[0]
    assert "indomain_nll" in header and "ood_nll" in header
    cfg = json.loads((d / "config.json").read_text())
    assert cfg["objective"]["epsilon"] == 0.28 and cfg["train"]["warmup_epochs"] == 1
    assert "ood_nll_delta" in rec["result"]


def test_replay_is_byte_identical(capsys, workspace):
    root, conf = workspace
    code, _ = run(capsys, "finetune", "--config", conf, "--out-root", root, "--run-id", "orig",
                  "--init", root / "base" / "final.ckpt", "--epochs", "1")
    assert code == 0
    code, rec = run(capsys, "--replay", root / "orig")
    assert code == 0
    for f in ("log.jsonl", "clip_events.jsonl", "metrics.csv", "epoch_1.ckpt", "final.ckpt"):
        assert (root / "orig" / f).read_bytes() == (root / "orig-replay" / f).read_bytes(), f


def test_sweep(capsys, workspace):
    root, conf = workspace
    code, rec = run(capsys, "sweep", "--config", conf, "--out-root", root, "--run-id", "sw",
                    "--init", root / "base" / "final.ckpt", "--epochs", "1",
                    "--warmup-epochs", "0", "--param", "epsilon", "--values", "0.1,0.28,inf")
    assert code == 0 and rec["result"]["runs"] == 3
    for v in ("0.1", "0.28", "inf"):
        assert (root / "sw" / f"epsilon={v}" / "log.jsonl").is_file()
    rows = (root / "sw" / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("epsilon,") and len(rows) == 4
    inf_cfg = json.loads((root / "sw" / "config.json").read_text())
    assert inf_cfg["sweep"]["values"] == ["0.1", "0.28", "inf"]


def test_paired(capsys, workspace):
    root, conf = workspace
    code, rec = run(capsys, "finetune", "--config", conf, "--out-root", root, "--run-id", "pair",
                    "--init", root / "base" / "final.ckpt", "--epochs", "1", "--paired")
    assert code == 0
    assert set(rec["result"]) == {"sft", "sft_kl", "psft"}
    for m in ("sft", "sft_kl", "psft"):
        assert (root / "pair" / m / "log.jsonl").is_file()
    assert (root / "pair" / "report.csv").read_text().startswith("method,")


def test_rl_and_dpo(capsys, workspace):
    root, conf = workspace
    init = root / "base" / "final.ckpt"
    code, _ = run(capsys, "rl", "--config", conf, "--out-root", root, "--run-id", "rl",
                  "--init", init, "--iterations", "2", "--train-batch", "4", "--mini-batch", "2",
                  "--rollout-n", "4")
    assert code == 0
    curve = json.loads((root / "rl" / "rl_curve.json").read_text())
    assert len(curve["reward"]) == 2
    code, rec = run(capsys, "dpo", "--config", conf, "--out-root", root, "--run-id", "dpo",
                    "--init", init, "--epochs", "1", "--train-batch", "8", "--mini-batch", "8")
    assert code == 0 and "heldout_margin" in rec["result"]


def test_eval_uniform_bigram(capsys, tmp_path):
    code, rec = run(capsys, "eval", "--out-root", tmp_path, "--run-id", "u", "--arch", "bigram",
                    "--init-scale", "0", "--sample-k", "0")
    assert code == 0
    m = json.loads((tmp_path / "u" / "metrics.json").read_text())
    assert m["indomain_nll"] == pytest.approx(math.log(32), rel=1e-14)
    assert "indomain_nll" in (tmp_path / "u" / "metrics.csv").read_text()


def test_report(capsys, workspace):
    root, conf = workspace
    run(capsys, "finetune", "--config", conf, "--out-root", root, "--run-id", "for-report",
        "--init", root / "base" / "final.ckpt", "--epochs", "1", "--warmup-epochs", "0")
    code, rec = run(capsys, "report", "--out-root", root, "--run-id", "rep",
                    "--run", root / "for-report", "--smooth", "3")
    assert code == 0
    header, steps, _ = parse_trace((root / "rep" / "trace_entropy.csv").read_text())
    assert header["window"] == 3 and len(steps) == 8
    clip = json.loads((root / "rep" / "clip_report.json").read_text())
    assert set(clip) == {"overall", "per_epoch"}


def test_gen_data_and_reuse(capsys, tmp_path, workspace):
    _, conf = workspace
    code, rec = run(capsys, "gen-data", "--config", conf, "--out-root", tmp_path, "--run-id", "d")
    assert code == 0 and rec["result"]["expert_train"] == 64
    assert (tmp_path / "d" / "expert_train.meta.json").is_file()
    code, _ = run(capsys, "eval", "--config", conf, "--out-root", tmp_path, "--run-id", "e",
                  "--data", tmp_path / "d", "--sample-k", "0")
    assert code == 0


def test_missing_checkpoint_exit_code(capsys, tmp_path):
    code, rec = run(capsys, "finetune", "--out-root", tmp_path, "--run-id", "x")
    assert code == 3 and rec["status"] == "error" and rec["exit_code"] == 3
    assert not (tmp_path / "x").exists()
    code, _ = run(capsys, "rl", "--out-root", tmp_path, "--init", tmp_path / "nope.ckpt")
    assert code == 3


def test_corrupt_checkpoint_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"PSFTCKPT" + b"\0" * 64)
    code, _ = run(capsys, "dpo", "--out-root", tmp_path, "--run-id", "y", "--init", bad)
    assert code == 3
    assert json.loads((tmp_path / "y" / "error.json").read_text())["exit_code"] == 3


def test_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    code, rec = run(capsys, "pretrain", "--config", bad, "--out-root", tmp_path)
    assert code == 2 and "epochz" in rec["message"]
    code, _ = run(capsys, "pretrain", "--out-root", tmp_path, "--train-batch", "30",
                  "--mini-batch", "8")
    assert code == 2
    code, _ = run(capsys, "finetune", "--method", "grpo")
    assert code == 2
    assert list(tmp_path.iterdir()) == [bad]


def test_refuses_to_overwrite(capsys, workspace):
    root, conf = workspace
    code, rec = run(capsys, "pretrain", "--config", conf, "--out-root", root, "--run-id", "base")
    assert code == 2 and "refusing" in rec["message"]


def test_env_out_root(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT_ROOT, str(tmp_path))
    code, rec = run(capsys, "eval", "--arch", "bigram", "--run-id", "envroot", "--sample-k", "0")
    assert code == 0 and (tmp_path / "envroot" / "metrics.json").is_file()


def test_help_lists_defaults(capsys):
    assert cli.main(["finetune", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    for piece in ("--epsilon", "(default: 0.28)", "--warmup-epochs", "(default: 1)",
                  "per_train_batch", "--kl-coef", "(default: 0.5)", "psft 0.0003", "sft 0.001",
                  "--paired", "--ratio-histogram", "--snapshot-refresh"):
        assert piece in text, piece
    assert cli.main(["rl", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    for piece in ("--rollout-n", "(default: 8)", "--clip-low", "(default: 0.2)"):
        assert piece in text, piece
    assert cli.main(["dpo", "--help"]) == 0
    assert "(default: 0.01)" in " ".join(capsys.readouterr().out.split())
