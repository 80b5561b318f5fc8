import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from dpge.accountant import RdpCurve, account, rdp_to_eps
from dpge.cli import main
from dpge.config import ConfigError, RunConfig, config_from_dict, parse_config, parse_config_text
from dpge.params import load_checkpoint
from dpge.telemetry import read_metrics_csv
from dpge.train import _class_eval, classification_splits, finetune_model_and_vocab
from dpge.telemetry import macro_f1

SMALL_RUN = {
    "synthetic_tokens": 4000,
    "steps": 4,
    "eval_every": 2,
    "noise_multiplier": 1.0,
    "model": {"vocab_size": 80, "max_seq_len": 16, "num_layers": 1, "hidden_dim": 16,
              "num_heads": 2, "ff_dim": 32},
    "dp": {"logical_batch_size": 16, "shard_size": 8},
    "finetune": {"epochs": 1, "num_train": 64, "num_validation": 16, "num_test": 32,
                 "seq_len": 16},
}


def _write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return str(p)


# -- config parsing --------------------------------------------------------------------

def test_minimal_plan_config_gets_defaults():
    cfg = parse_config_text(json.dumps({"mode": "plan", "target_epsilon": 5, "delta": 1e-6,
                                        "sampling_rate": 0.001, "steps": 1000}))
    assert cfg.clip_norm == 1.0 and cfg.dp.weight_decay == 0.5
    assert cfg.validation_fraction == 0.05 and cfg.steps == 1000


def test_parse_config_from_file_and_stream(tmp_path):
    path = _write(tmp_path, {"mode": "account", "noise_multiplier": 1.0, "delta": 1e-5,
                             "sampling_rate": 0.01})
    assert parse_config(path).noise_multiplier == 1.0
    with open(path, encoding="utf-8") as fh:
        assert parse_config(fh).sampling_rate == 0.01


def test_unknown_key_names_key_and_line():
    text = '{\n  "mode": "plan",\n  "target_epsilon": 5,\n  "learningrate": 0.1\n}'
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, "run.json")
    assert "learningrate" in str(info.value) and info.value.line == 4
    assert "run.json" in str(info.value)


def test_unknown_nested_key():
    text = '{"mode": "bench",\n "dp": {"shard": 4}}'
    with pytest.raises(ConfigError, match="shard") as info:
        parse_config_text(text)
    assert info.value.line == 2


@pytest.mark.parametrize("bad", [1.0, 2.0, 0.0, -1e-6])
def test_delta_out_of_range(bad):
    with pytest.raises(ConfigError, match="delta"):
        config_from_dict({"mode": "plan", "target_epsilon": 5, "delta": bad,
                          "sampling_rate": 0.01})


@pytest.mark.parametrize("text,needle", [
    ('{"mode": "plan", "mode": "account"}', "duplicate"),
    ('{"mode": "plan",}', "line 1"),
    ('{"mode": "plan", "steps": "ten"}', "steps"),
    ('{"mode": "plan", "steps": 1.5}', "steps"),
    ('{"mode": "train"}', "mode"),
    ('{"mode": "plan", "delta": 1e-5, "sampling_rate": 0.1}', "target_epsilon"),
    ('{"mode": "pretrain", "noise_multiplier": 1, "sampling_rate": 0.1}', "sampling_rate"),
    ('{"mode": "pretrain"}', "noise_multiplier"),
    ('{"mode": "bench", "dp": {"logical_batch_size": 4, "shard_size": 8}}', "shard_size"),
])
def test_validation_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config_text(text)


def test_manifest_is_accepted_as_config():
    cfg = RunConfig(mode="account", noise_multiplier=2.0, delta=1e-5, sampling_rate=0.1)
    manifest = {"dpge_manifest": 1, "resolved_config": cfg.to_dict()}
    assert config_from_dict(manifest) == cfg


# -- plan / account ----------------------------------------------------------------------

def test_plan_account_round_trip(capsys):
    assert main(["plan", "--target-epsilon", "5", "--delta", "1e-6", "--sampling-rate",
                 str(2 ** -10), "--steps", "5000", "--csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "sigma,epsilon,best_order,warmup_steps,rdp_per_step"
    sigma, eps, order, warm, rdp = lines[1].split(",")
    assert int(warm) == 250 and 4.95 <= float(eps) <= 5.0
    assert main(["account", "--sigma", sigma, "--delta", "1e-6", "--sampling-rate",
                 str(2 ** -10), "--steps", "5000"]) == 0
    out = capsys.readouterr().out
    got = float(out.split("epsilon=")[1].split()[0])
    assert 4.95 <= got <= 5.0 and f"best_order={order}" in out


def test_plan_is_stable(capsys):
    argv = ["plan", "--target-epsilon", "3", "--delta", "1e-5", "--sampling-rate", "0.01",
            "--steps", "1000", "--sigma", "1.0", "--sigma", "2.0"]
    main(argv)
    first = capsys.readouterr().out
    main(argv)
    assert capsys.readouterr().out == first
    assert len(first.splitlines()) == 4


def test_plan_with_zero_sampling_rate(capsys):
    assert main(["plan", "--target-epsilon", "5", "--delta", "1e-5", "--sampling-rate", "0",
                 "--steps", "100", "--csv", "--sigma", "0.7"]) == 0
    rows = [l.split(",") for l in capsys.readouterr().out.splitlines()[1:]]
    zero = rdp_to_eps(RdpCurve.zeros(), 1e-5)
    assert rows[0][0] == "" and float(rows[0][1]) == pytest.approx(zero[0], rel=1e-8)
    assert float(rows[1][1]) == pytest.approx(zero[0], rel=1e-8)
    assert main(["plan", "--target-epsilon", "0.001", "--delta", "1e-5",
                 "--sampling-rate", "0", "--steps", "100"]) == 2


def test_config_file_plus_overrides(tmp_path, capsys):
    path = _write(tmp_path, {"mode": "plan", "target_epsilon": 5, "delta": 1e-6,
                             "sampling_rate": 0.001, "steps": 1000})
    assert main(["--config", path, "account", "--sigma", "1.0"]) == 0
    out = capsys.readouterr().out
    eps = account(0.001, 1.0, 1000, 1e-6)[0]
    assert f"epsilon={eps:.9g}" in out


def test_exit_codes(tmp_path, capsys):
    assert main(["plan", "--target-epsilon", "5", "--delta", "1.5", "--sampling-rate", "0.1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_bytes(b'{"mode": "plan", "learningrate": 1}')
    assert main(["--config", str(bad), "plan"]) == 2
    assert "learningrate" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.json"), "plan"]) == 5
    bad.write_bytes(b"\xff\xfe")
    assert main(["--config", str(bad), "plan"]) == 2


def test_dpge_threads_validated(monkeypatch, capsys):
    monkeypatch.setenv("DPGE_THREADS", "zero")
    assert main(["account", "--sigma", "1", "--delta", "1e-5", "--sampling-rate", "0.1"]) == 2
    monkeypatch.setenv("DPGE_THREADS", "1")
    assert main(["account", "--sigma", "1", "--delta", "1e-5", "--sampling-rate", "0.1"]) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dpge", "account", "--sigma", "1", "--delta",
                        "1e-5", "--sampling-rate", "0.1", "--steps", "10"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0 and r.stdout.startswith("epsilon=")


# -- pretrain ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrain_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("pre")
    path = _write(base, dict(SMALL_RUN, mode="pretrain"))
    dirs = []
    for k in range(2):
        out = base / f"run{k}"
        assert main(["--config", path, "--output-dir", str(out), "--seed", "7", "pretrain"]) == 0
        dirs.append(out)
    return base, path, dirs


def test_pretrain_artifacts(pretrain_run):
    _, _, (a, _) = pretrain_run
    for name in ("metrics.csv", "snr.csv", "model.dpge", "run_manifest.json"):
        assert (a / name).exists()
    recs = read_metrics_csv(open(a / "metrics.csv", encoding="utf-8"))
    assert [r.step for r in recs] == [0, 1, 2, 3, 4]
    assert recs[0].train_loss is None and recs[0].eval_loss is not None
    eps = [r.epsilon_spent for r in recs]
    assert all(x <= y for x, y in zip(eps, eps[1:]))
    man = json.loads((a / "run_manifest.json").read_text())
    assert eps[-1] == pytest.approx(account(man["sampling_rate"], 1.0, 4, man["delta"])[0],
                                    rel=1e-8)
    assert man["final_epsilon"] == account(man["sampling_rate"], 1.0, 4, man["delta"])[0]
    assert man["seeds"] == {"init": 7, "data": 8, "noise": 9, "dropout": 10}
    _, meta = load_checkpoint(a / "model.dpge")
    assert meta["step"] == 4 and meta["vocab"][:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def test_pretrain_is_byte_deterministic(pretrain_run):
    _, _, (a, b) = pretrain_run
    for name in ("metrics.csv", "snr.csv", "model.dpge"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_rerun_from_manifest_reproduces(pretrain_run):
    base, _, (a, _) = pretrain_run
    out = base / "from_manifest"
    assert main(["--config", str(a / "run_manifest.json"), "--output-dir", str(out),
                 "pretrain"]) == 0
    assert (out / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()
    assert (out / "model.dpge").read_bytes() == (a / "model.dpge").read_bytes()


def test_init_checkpoint_continues_training(pretrain_run):
    base, path, (a, _) = pretrain_run
    out = base / "cont"
    assert main(["--config", path, "--output-dir", str(out), "--seed", "7", "pretrain",
                 "--init-checkpoint", str(a / "model.dpge")]) == 0
    p0, _ = load_checkpoint(a / "model.dpge")
    recs = read_metrics_csv(open(out / "metrics.csv", encoding="utf-8"))
    first = read_metrics_csv(open(a / "metrics.csv", encoding="utf-8"))
    # the continued run starts where the first one ended
    assert recs[0].eval_loss == first[-1].eval_loss
    p1, _ = load_checkpoint(out / "model.dpge")
    assert p1.config == p0.config and not np.array_equal(p1.values, p0.values)


def test_init_checkpoint_shape_mismatch(pretrain_run, capsys):
    base, _, (a, _) = pretrain_run
    other = dict(SMALL_RUN, mode="pretrain")
    other["model"] = dict(SMALL_RUN["model"], hidden_dim=8)
    path = _write(base, other, "other.json")
    assert main(["--config", path, "--output-dir", str(base / "x"), "pretrain",
                 "--init-checkpoint", str(a / "model.dpge")]) == 2
    assert "does not match" in capsys.readouterr().err


def test_budget_refusal_and_stop(tmp_path, capsys):
    cfg = dict(SMALL_RUN, mode="pretrain", target_epsilon=0.5)
    path = _write(tmp_path, cfg)
    assert main(["--config", path, "--output-dir", str(tmp_path / "a"), "pretrain"]) == 4
    assert main(["--config", path, "--output-dir", str(tmp_path / "b"), "pretrain",
                 "--budget-mode", "stop-at-epsilon"]) == 4
    recs = read_metrics_csv(open(tmp_path / "b" / "metrics.csv", encoding="utf-8"))
    assert all(r.epsilon_spent <= 0.5 for r in recs[1:])
    man = json.loads((tmp_path / "b" / "run_manifest.json").read_text())
    assert man["exit_status"] == 4


def test_calibrated_pretrain_spends_at_most_target(tmp_path, capsys):
    cfg = dict(SMALL_RUN, mode="pretrain", target_epsilon=20.0)
    del cfg["noise_multiplier"]
    path = _write(tmp_path, cfg)
    assert main(["--config", path, "--output-dir", str(tmp_path / "a"), "pretrain"]) == 0
    man = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert 20.0 * (1 - 1e-3) <= man["final_epsilon"] <= 20.0


def test_missing_corpus_is_io_error(tmp_path):
    path = _write(tmp_path, dict(SMALL_RUN, mode="pretrain"))
    assert main(["--config", path, "--output-dir", str(tmp_path / "o"), "pretrain",
                 "--corpus", str(tmp_path / "none.txt")]) == 5


# -- finetune ------------------------------------------------------------------------------

def test_finetune_zero_epochs_reports_initial_model(pretrain_run, capsys):
    base, path, (a, _) = pretrain_run
    out = base / "ft0"
    assert main(["--config", path, "--output-dir", str(out), "--seed", "3", "finetune",
                 "--checkpoint", str(a / "model.dpge"), "--epochs", "0"]) == 0
    res = json.loads((out / "finetune_metrics.json").read_text())
    cfg = parse_config(path)
    params, vocab, _ = finetune_model_and_vocab(cfg, a / "model.dpge")
    from dpge.config import Seeds
    splits = classification_splits(vocab, cfg.finetune, Seeds.from_base(3).data)
    _, preds = _class_eval(params, splits[2])
    assert res["epochs_run"] == 0
    assert res["macro_f1"] == macro_f1(preds, splits[2].labels, 2)


def test_finetune_deterministic(pretrain_run, capsys):
    base, path, (a, _) = pretrain_run
    outs = []
    for k in range(2):
        out = base / f"ft{k + 1}"
        assert main(["--config", path, "--output-dir", str(out), "finetune",
                     "--checkpoint", str(a / "model.dpge")]) == 0
        outs.append((out / "finetune_metrics.json").read_text())
    assert outs[0] == outs[1]
    assert "macro_f1=" in capsys.readouterr().out


def test_finetune_checkpoint_mismatch(pretrain_run, capsys):
    base, _, (a, _) = pretrain_run
    other = dict(SMALL_RUN, mode="finetune")
    other["model"] = dict(SMALL_RUN["model"], num_layers=2)
    path = _write(base, other, "other_ft.json")
    assert main(["--config", path, "--output-dir", str(base / "y"), "finetune",
                 "--checkpoint", str(a / "model.dpge")]) == 2


def test_finetune_bad_checkpoint_file(tmp_path):
    bad = tmp_path / "m.dpge"
    bad.write_bytes(b"garbage!" + bytes(8))
    path = _write(tmp_path, dict(SMALL_RUN, mode="finetune"))
    assert main(["--config", path, "--output-dir", str(tmp_path / "o"), "finetune",
                 "--checkpoint", str(bad)]) == 2


# -- bench ----------------------------------------------------------------------------------

def test_bench_subcommand(tmp_path, capsys):
    cfg = {"mode": "bench", "model": SMALL_RUN["model"]}
    path = _write(tmp_path, cfg)
    assert main(["--config", path, "--output-dir", str(tmp_path / "b"), "bench",
                 "--modes", "vectorized", "naive_loop", "--batch-sizes", "4", "2",
                 "--epochs", "1", "--dataset-size", "8"]) == 0
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert lines[0] == "mode,batch_size,median_epoch_seconds,peak_memory_bytes,epochs_measured"
    assert [l.split(",")[:2] for l in lines[1:]] == [["naive_loop", "2"], ["naive_loop", "4"],
                                                     ["vectorized", "2"], ["vectorized", "4"]]
    assert (tmp_path / "b" / "run_manifest.json").exists()
    assert main(["bench", "--modes", "jit"]) == 2
