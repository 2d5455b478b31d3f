import json
from pathlib import Path

import pytest

from promptlab.cli import main
from promptlab.config import ConfigError, ModelConfig
from promptlab.data import Tokenizer


def tiny_run_config(tmp_path, **model_overrides):
    tok = Tokenizer()
    model = dict(d=8, h=2, d_h=4, M_enc=1, M_dec=1, ffn_dim=16,
                 vocab=tok.vocab_size, L_enc=12, L_dec=10, l=2, b=3,
                 t_prime=3, t=4, e=5, T=2, variant="global",
                 placement="decoder")
    model.update(model_overrides)
    cfg = {
        "model": model,
        "train": {"steps": 12, "batch_size": 4, "eval_every": 6, "seed": 1},
        "tasks": [
            {"name": "copy", "kind": "copy", "train_size": 40,
             "eval_size": 10, "seed": 3, "max_input_len": 5},
            {"name": "parity", "kind": "parity", "train_size": 30,
             "eval_size": 10, "seed": 4, "max_input_len": 5},
        ],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def read_bytes(path):
    return Path(path).read_bytes()


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_writes_expected_files(tmp_path, capsys):
    config, raw = tiny_run_config(tmp_path)
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 0
    for spec in raw["tasks"]:
        train_lines = (out / f"{spec['name']}_train.jsonl").read_text().splitlines()
        eval_lines = (out / f"{spec['name']}_eval.jsonl").read_text().splitlines()
        assert len(train_lines) == spec["train_size"]
        assert len(eval_lines) == spec["eval_size"]


def test_gen_data_rerun_is_byte_identical(tmp_path):
    config, raw = tiny_run_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["gen-data", "--config", str(config), "--out", str(out_a)])
    main(["gen-data", "--config", str(config), "--out", str(out_b)])
    for name in ("copy_train.jsonl", "copy_eval.jsonl", "parity_train.jsonl"):
        assert read_bytes(out_a / name) == read_bytes(out_b / name)


def test_gen_data_zero_size_fails_validation_before_writing(tmp_path, capsys):
    config, raw = tiny_run_config(tmp_path)
    raw["tasks"][0]["train_size"] = 0
    config.write_text(json.dumps(raw))
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 2
    assert not (out / "copy_train.jsonl").exists()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_artifacts_and_metadata(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "run"
    code = main(["train", "--config", str(config), "--out", str(out), "--quiet"])
    assert code == 0
    assert (out / "checkpoint.json").exists()
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,task,loss,token_acc,exact_match"
    assert any(row.startswith("12,average,") for row in metrics)
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["conditioned_count"] > 0
    assert metadata["config"]["train"]["steps"] == 12
    assert metadata["deviations"]


def test_train_task_only_reports_frozen_backbone(tmp_path):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "run"
    code = main(["train", "--config", str(config), "--out", str(out),
                 "--set", "train.tune_mode=task_only", "--quiet"])
    assert code == 0
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["backbone_unchanged"] is True
    assert metadata["conditioned_hash_before"] != metadata["conditioned_hash_after"]


def test_train_rerun_byte_identical_outputs(tmp_path):
    config, _ = tiny_run_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", str(config), "--out", str(out_a), "--quiet"])
    main(["train", "--config", str(config), "--out", str(out_b), "--quiet"])
    assert read_bytes(out_a / "checkpoint.json") == read_bytes(out_b / "checkpoint.json")
    assert read_bytes(out_a / "metrics.csv") == read_bytes(out_b / "metrics.csv")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort_exit_code(tmp_path):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "run"
    # the first update throws parameters to ~1e200, so attention scores hit
    # +/- inf and the softmax shift produces NaN on the next step
    code = main(["train", "--config", str(config), "--out", str(out),
                 "--set", "train.lr=1e200", "--quiet"])
    assert code == 3


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_round_trip(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out), "--quiet"])
    capsys.readouterr()
    code = main(["eval", "--config", str(config), "--out", str(tmp_path / "ev"),
                 "--checkpoint", str(out / "checkpoint.json")])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) == {"copy", "parity", "average"}
    assert (tmp_path / "ev" / "eval_metrics.csv").exists()


def test_eval_checkpoint_config_mismatch(tmp_path, capsys):
    config, raw = tiny_run_config(tmp_path)
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out), "--quiet"])
    raw["model"]["d"] = 16
    raw["model"]["d_h"] = 8
    config.write_text(json.dumps(raw))
    code = main(["eval", "--config", str(config), "--out", str(tmp_path / "ev"),
                 "--checkpoint", str(out / "checkpoint.json")])
    assert code == 2


# ---------------------------------------------------------------------------
# count-params / analyze
# ---------------------------------------------------------------------------

def test_count_params_documented_config(tmp_path, capsys):
    config, raw = tiny_run_config(
        tmp_path, d=64, h=4, d_h=16, M_enc=4, M_dec=4, l=8, b=16, t_prime=16,
        t=32, e=32, T=4, ffn_dim=128, L_enc=16, L_dec=12)
    raw["tasks"] = raw["tasks"] + [
        {"name": "sort_digits", "kind": "sort_digits", "train_size": 30,
         "eval_size": 10, "seed": 5, "max_input_len": 5},
        {"name": "mod_add", "kind": "mod_add", "train_size": 30,
         "eval_size": 10, "seed": 6, "max_input_len": 5},
    ]
    config.write_text(json.dumps(raw))
    assert main(["count-params", "--config", str(config)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["conditioned_count"] == 135_296
    assert payload["formula_count"] == 135_296
    assert payload["backbone_count"] > 0
    assert payload["ratio_label"].endswith("x")


def test_analyze_plain_variant_zero_mass(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path, variant="none", placement="both")
    out = tmp_path / "an"
    code = main(["analyze", "--config", str(config), "--out", str(out),
                 "--stack", "dec", "--limit", "6"])
    assert code == 0
    report = json.loads((out / "analysis.json").read_text())
    assert report["per_layer_mass"] == [0.0]
    assert (out / "attention_dump.jsonl").exists()


def test_analyze_trained_checkpoint(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    run = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(run), "--quiet"])
    capsys.readouterr()
    out = tmp_path / "an"
    code = main(["analyze", "--config", str(config), "--out", str(out),
                 "--checkpoint", str(run / "checkpoint.json"), "--limit", "8"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["stack"] == "dec"
    assert all(0.0 <= m <= 1.0 for m in printed["per_layer_mass"])
    dump_lines = (out / "attention_dump.jsonl").read_text().splitlines()
    assert dump_lines  # one record per (example, layer, head)
    first = json.loads(dump_lines[0])
    assert {"layer", "head", "example", "n_prompt", "scores",
            "valid_query_mask", "valid_key_mask"} <= set(first)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_prompt_len_dec(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out),
                 "--axis", "prompt_len_dec", "--values", "0,2"])
    assert code == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "axis,value,status,conditioned_params,avg_exact_match,avg_token_acc"
    assert len(rows) == 3
    zero_row = rows[1].split(",")
    two_row = rows[2].split(",")
    assert int(zero_row[3]) < int(two_row[3])  # fewer prompt parameters at l=0


def test_sweep_deduplicates_values(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out),
                 "--axis", "prompt_len_dec", "--values", "1,1"])
    assert code == 0
    assert "duplicate sweep value" in capsys.readouterr().err
    assert len((out / "sweep.csv").read_text().splitlines()) == 2


def test_sweep_placement_param_ordering(tmp_path):
    config, _ = tiny_run_config(tmp_path, placement="both")
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out),
                 "--axis", "placement", "--values", "encoder,decoder,both"])
    assert code == 0
    rows = [line.split(",") for line
            in (out / "sweep.csv").read_text().splitlines()[1:]]
    counts = {row[1]: int(row[3]) for row in rows}
    assert counts["both"] > counts["encoder"] == counts["decoder"]


def test_sweep_records_failures_and_continues(tmp_path):
    config, _ = tiny_run_config(tmp_path)
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out),
                 "--axis", "variant", "--values", "bogus,none"])
    assert code == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 3
    assert "failed" in rows[1]
    assert ",ok," in rows[2]


def test_sweep_axis_requires_matching_placement(tmp_path):
    config, _ = tiny_run_config(tmp_path, placement="decoder")
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out),
                 "--axis", "prompt_len_enc", "--values", "2"])
    assert code == 0  # failure is recorded per-value, sweep itself succeeds
    assert "failed" in (out / "sweep.csv").read_text().splitlines()[1]


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_unknown_config_keys_rejected(tmp_path):
    config, raw = tiny_run_config(tmp_path)
    raw["model"]["heads"] = 2
    config.write_text(json.dumps(raw))
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "x")]) == 2

    raw = json.loads(config.read_text())
    del raw["model"]["heads"]
    raw["extra_section"] = {}
    config.write_text(json.dumps(raw))
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "x")]) == 2


def test_set_overrides_and_validation(tmp_path, capsys):
    config, _ = tiny_run_config(tmp_path)
    assert main(["count-params", "--config", str(config),
                 "--set", "model.variant=share"]) == 0
    assert main(["count-params", "--config", str(config),
                 "--set", "model.bogus=1"]) == 2
    assert main(["count-params", "--config", str(config),
                 "--set", "model.variant"]) == 2


def test_model_task_count_consistency_checked(tmp_path):
    config, raw = tiny_run_config(tmp_path)
    raw["model"]["T"] = 5
    config.write_text(json.dumps(raw))
    assert main(["count-params", "--config", str(config)]) == 2


def test_seed_flag_overrides_train_seed(tmp_path):
    config, _ = tiny_run_config(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    main(["train", "--config", str(config), "--out", str(out_a),
          "--seed", "5", "--quiet"])
    main(["train", "--config", str(config), "--out", str(out_b),
          "--seed", "6", "--quiet"])
    assert read_bytes(out_a / "checkpoint.json") != read_bytes(out_b / "checkpoint.json")
    meta = json.loads((out_a / "metadata.json").read_text())
    assert meta["seed"] == 5
