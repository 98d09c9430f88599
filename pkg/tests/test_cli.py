import json
import os

import pytest
import yaml

from stackelmac import cli, runio

SMOKE = {
    "env": {"num_ues_range": [2], "num_rbgs": 2, "episode_len": 6,
            "arrival_probs": [0.8], "tbler": 0.0, "spectral_eff": [2.0],
            "channel_transition": [[1.0]], "channel_change_period": 1,
            "csi_error_prob": 0.0, "ucm_len": 1, "ucm_vocab_size": 4},
    "policy": {"n_blocks": 1, "d_model": 16, "n_heads": 2, "d_ff": 24,
               "max_seq_len": 64, "i_max": 4},
    "train": {"max_epochs": 5, "buffer_episodes": 2, "minibatch_size": 16,
              "ppo_epochs": 2},
    "eval": {"runs": 2, "episodes_per_run": 2,
             "policies": [{"type": "heuristic", "name": "heuristic"}]},
    "theory": {"potential_draws": 5, "ne_instances": 10,
               "contraction_games": 5, "schur_triples": 5,
               "averaged_seeds": 2},
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = os.path.join(tmp_path, name)
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh)
    return path


def test_train_smoke(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    out = os.path.join(tmp_path, "run")
    assert cli.main(["train", "--config", cfg, "--seed", "1",
                     "--out", out]) == 0
    header, records = runio.read_jsonl(os.path.join(out, "training_log.jsonl"))
    assert header["schema"] == "stackelmac.trainlog/1"
    assert len(records) == 5
    assert os.path.exists(os.path.join(out, "leader_final.npz"))
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["subcommand"] == "train"
    assert manifest["config_hash"] == header["config_hash"]


def test_train_rejects_unknown_key(tmp_path, capsys):
    bad = dict(SMOKE)
    bad["train"] = dict(SMOKE["train"], learning_rate=3.0)
    cfg = write_config(tmp_path, bad)
    assert cli.main(["train", "--config", cfg, "--out",
                     str(tmp_path)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_deterministic_reruns_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    logs = []
    for name in ("a", "b"):
        out = os.path.join(tmp_path, name)
        assert cli.main(["train", "--config", cfg, "--seed", "9",
                         "--out", out, "--deterministic"]) == 0
        with open(os.path.join(out, "training_log.jsonl"), "rb") as fh:
            logs.append(fh.read())
    assert logs[0] == logs[1]
    assert runio.sha256_file(os.path.join(tmp_path, "a", "training_log.jsonl")) \
        == runio.sha256_file(os.path.join(tmp_path, "b", "training_log.jsonl"))


def test_eval_heuristic_and_token_grid(tmp_path):
    cfg_path = write_config(tmp_path, SMOKE)
    train_out = os.path.join(tmp_path, "t")
    assert cli.main(["train", "--config", cfg_path, "--seed", "1",
                     "--out", train_out]) == 0
    data = dict(SMOKE)
    data["eval"] = {"runs": 2, "episodes_per_run": 2,
                    "scenarios": [{"i": 2, "label": "a"},
                                  {"i": 2, "p_a": 0.5, "label": "b"},
                                  {"i": 2, "tbler": 0.2, "label": "c"}],
                    "policies": [{"type": "heuristic", "name": "heuristic"},
                                 {"type": "token", "name": "token",
                                  "checkpoint": train_out}]}
    cfg2 = write_config(tmp_path, data, "eval.yaml")
    out = os.path.join(tmp_path, "e")
    assert cli.main(["eval", "--config", cfg2, "--seed", "2",
                     "--out", out]) == 0
    with open(os.path.join(out, "kpis.csv")) as fh:
        lines = fh.read().strip().splitlines()
    assert len(lines) == 1 + 6      # header + 2 policies x 3 scenarios
    assert os.path.exists(os.path.join(out, "plot_data.json"))


def test_eval_corrupted_checkpoint_fails(tmp_path):
    data = dict(SMOKE)
    ckpt_dir = os.path.join(tmp_path, "ck")
    os.makedirs(ckpt_dir)
    for name in ("leader_final.npz", "follower_final.npz"):
        with open(os.path.join(ckpt_dir, name), "wb") as fh:
            fh.write(b"garbage")
    data["eval"] = {"runs": 1, "episodes_per_run": 1,
                    "policies": [{"type": "token", "checkpoint": ckpt_dir}]}
    cfg = write_config(tmp_path, data, "ev.yaml")
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_eval_checkpoint_hash_mismatch_refused(tmp_path, capsys):
    cfg_path = write_config(tmp_path, SMOKE)
    train_out = os.path.join(tmp_path, "t2")
    assert cli.main(["train", "--config", cfg_path, "--seed", "1",
                     "--out", train_out]) == 0
    changed = json.loads(json.dumps(SMOKE))
    changed["env"]["ucm_vocab_size"] = 8      # changes vocabulary layout
    changed["eval"] = {"runs": 1, "episodes_per_run": 1,
                       "policies": [{"type": "token", "checkpoint": train_out}]}
    cfg2 = write_config(tmp_path, changed, "mismatch.yaml")
    assert cli.main(["eval", "--config", cfg2, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "compat hash" in err


def test_theory_default_suite_passes(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    out = os.path.join(tmp_path, "th")
    assert cli.main(["theory", "--config", cfg, "--seed", "0",
                     "--out", out]) == 0
    with open(os.path.join(out, "theory_report.json")) as fh:
        report = json.load(fh)
    assert report["all_pass"]
    # negative controls are reported as expected failures, not suite failures
    assert all(c["ok"] for c in report["negative_controls"])


def test_theory_oversize_enumeration_is_config_error(tmp_path, capsys):
    data = dict(SMOKE)
    data["theory"] = dict(SMOKE["theory"], potential_max_ues=6,
                          potential_max_rbgs=6)
    cfg = write_config(tmp_path, data, "big.yaml")
    assert cli.main(["theory", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "I <= 4" in capsys.readouterr().err


def test_baseline_heuristic(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    out = os.path.join(tmp_path, "bl")
    assert cli.main(["baseline", "--config", cfg, "--baseline", "heuristic",
                     "--out", out]) == 0
    with open(os.path.join(out, "kpis.csv")) as fh:
        assert len(fh.read().strip().splitlines()) >= 2


def test_baseline_mappo_s(tmp_path):
    data = dict(SMOKE)
    data["eval"] = {"runs": 1, "episodes_per_run": 1,
                    "scenarios": [{"i": 2, "label": "a"}]}
    cfg = write_config(tmp_path, data, "m.yaml")
    out = os.path.join(tmp_path, "blm")
    assert cli.main(["baseline", "--config", cfg, "--baseline", "mappo-s",
                     "--out", out]) == 0
    with open(os.path.join(out, "manifest.json")) as fh:
        assert json.load(fh)["baseline"] == "mappo-s"


def test_manifest_traceability(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    out = os.path.join(tmp_path, "tr")
    cli.main(["train", "--config", cfg, "--seed", "4", "--out", out])
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    header, _ = runio.read_jsonl(os.path.join(out, "training_log.jsonl"))
    assert header["run_id"] == manifest["run_id"]
    assert manifest["run_id"] == runio.run_id("train", manifest["config_hash"], 4)
