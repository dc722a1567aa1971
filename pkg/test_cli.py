"""
Run configuration and command-line tests, including a small offline end-to-end run.
"""

import argparse
import json
import os

import pytest

from colacare.cli import METHOD_FUSION, METHOD_LLM_OUTPUT, RunPaths, build_parser, demo_corpus, main
from colacare.config import ConfigError, RunConfig
from colacare.ehr_data import generate_synthetic

SMALL_RUN = {
    "seed": 5,
    "split_ratios": [0.6, 0.2, 0.2],
    "embedding_dim": 64,
    "synthetic": {"n_patients": 200, "n_features": 5, "max_visits": 4, "seed": 3},
    "experts": [
        {"architecture": "gru_last", "hidden_dim": 4, "lr": 0.01, "max_epochs": 2, "patience": 1, "seed": 0},
        {"architecture": "attn_pool", "hidden_dim": 4, "lr": 0.01, "max_epochs": 2, "patience": 1, "seed": 1},
        {"architecture": "recalib_gate", "hidden_dim": 4, "lr": 0.01, "max_epochs": 2, "patience": 1, "seed": 2},
    ],
    "consultation": {"n_doctors": 3, "k_retrieval": 4, "k_top_features": 3},
    "fusion": {"hidden_dim": 4, "lr": 0.01, "max_epochs": 2, "patience": 1},
    "evaluation": {"n_bootstrap": 10, "seed": 1},
}


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_RUN))
    return str(path), str(tmp_path / "run")


def _cli(run_config, *args):
    config_path, run_dir = run_config
    return main([args[0], "--config", config_path, "--run-dir", run_dir, "--quiet", *args[1:]])


# -- configuration ----------------------------------------------------------------------------

def test_defaults_are_consistent():
    config = RunConfig().validate()
    assert [e.name for e in config.experts] == ["gru_last", "attn_pool", "recalib_gate"]
    assert config.consultation.n_doctors == 3
    assert config.provider.kind == "scripted"


def test_from_dict_builds_sections_and_rejects_unknown_keys():
    config = RunConfig.from_dict(SMALL_RUN).validate()
    assert config.synthetic.n_patients == 200
    assert config.experts[1].architecture == "attn_pool"
    assert config.split_ratios == (0.6, 0.2, 0.2)
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_dict({"colour": "blue"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"fusion": {"report_mode": "image"}})


def test_doctor_count_follows_experts_unless_set():
    two = {"experts": SMALL_RUN["experts"][:2]}
    assert RunConfig.from_dict(two).validate().consultation.n_doctors == 2
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**two, "consultation": {"n_doctors": 3}}).validate()


def test_invalid_chunking_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(chunk_size=100, overlap=100).validate()
    with pytest.raises(ConfigError):
        RunConfig(dataset=str(tmp_path / "nowhere.json")).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(tmp_path / "nowhere.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(bad))


def test_demo_corpus_covers_every_feature():
    specs, _ = generate_synthetic(10, 12, 2, seed=0)
    docs = demo_corpus(specs)
    assert len(docs) == len(specs) + 1
    assert len({d["id"] for d in docs}) == len(docs)
    assert all(d["text"] for d in docs)


# -- command line -----------------------------------------------------------------------------

def test_usage_errors_exit_with_one(capsys):
    assert main([]) == 1
    assert main(["teleport"]) == 1
    assert main(["explain", "--method", "kernel"]) == 1


def _subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


@pytest.mark.parametrize("command", sorted(_subcommands()))
def test_help_documents_every_flag(command, capsys):
    subparser = _subcommands()[command]
    with pytest.raises(SystemExit) as exit_info:
        main([command, "--help"])
    assert exit_info.value.code == 0
    text = capsys.readouterr().out
    options = [a for a in subparser._actions if a.option_strings]
    assert {"--config", "--run-dir", "--verbose", "--quiet"} <= {s for a in options for s in a.option_strings}
    for action in options:
        assert action.help, action.option_strings
        for flag in action.option_strings:
            assert flag in text, (command, flag)


def test_missing_artifacts_exit_with_one(run_config, capsys):
    assert _cli(run_config, "describe") == 1
    assert "colacare synth" in capsys.readouterr().err
    assert _cli(run_config, "consult") == 1
    assert _cli(run_config, "stats") == 1


def test_bad_config_exits_with_one(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"unknown": 1}))
    assert main(["synth", "--config", str(path), "--run-dir", str(tmp_path / "run")]) == 1


def test_offline_pipeline_end_to_end(run_config, capsys):
    _, run_dir = run_config
    paths = RunPaths(run_dir)

    for command in ("synth", "describe", "train-experts", "build-index"):
        assert _cli(run_config, command) == 0, command
    assert _cli(run_config, "explain", "--top", "3") == 0
    assert _cli(run_config, "consult", "--n-doctors", "2") == 1

    assert _cli(run_config, "consult", "--parallel", "2") == 0
    assert os.path.exists(paths.script)
    assert len(os.listdir(paths.transcripts)) == 200
    for command in ("train-fusion", "evaluate", "stats"):
        assert _cli(run_config, command) == 0, command

    with open(paths.results_file) as f:
        results = json.load(f)
    assert METHOD_FUSION in results and METHOD_LLM_OUTPUT in results
    assert any(name.startswith("Best expert (") for name in results)
    for metrics in results.values():
        assert set(metrics) == {"auprc", "auroc", "min_p_se"}
        assert all(0.0 <= cell["mean"] <= 100.0 for cell in metrics.values())

    with open(paths.stats) as f:
        stats = json.load(f)
    assert stats["n_patients"] == 200 and stats["n_aborted"] == 0
    assert 1.0 <= stats["avg_rounds"] <= 3.0
    assert "Consensus %" in capsys.readouterr().out


@pytest.mark.slow
def test_agent_sweep_covers_every_subset(run_config):
    _, run_dir = run_config
    for command in ("synth", "train-experts", "build-index"):
        assert _cli(run_config, command) == 0, command
    assert _cli(run_config, "sweep-agents", "--parallel", "2") == 0
    with open(os.path.join(run_dir, "results", "agent_sweep.json")) as f:
        methods = json.load(f)
    assert sum(name.startswith("0 agents") for name in methods) == 3
    assert sum(name.startswith("1 agents") for name in methods) == 3
    assert sum(name.startswith("2 agents") for name in methods) == 3
    assert sum(name.startswith("3 agents") for name in methods) == 1


@pytest.mark.slow
def test_two_pipeline_runs_are_byte_identical(run_config, tmp_path):
    config_path, _ = run_config
    runs = [(config_path, str(tmp_path / name)) for name in ("first", "second")]
    for run in runs:
        for command in ("synth", "train-experts", "build-index", "consult", "train-fusion", "evaluate", "stats"):
            assert _cli(run, command) == 0, command

    first, second = (RunPaths(run_dir) for _, run_dir in runs)
    names = sorted(os.listdir(first.transcripts))
    assert names == sorted(os.listdir(second.transcripts)) and len(names) == 200
    for name in names:
        with open(os.path.join(first.transcripts, name), "rb") as a, \
                open(os.path.join(second.transcripts, name), "rb") as b:
            assert a.read() == b.read(), name
    for attr in ("stats", "results_file"):
        with open(getattr(first, attr), "rb") as a, open(getattr(second, attr), "rb") as b:
            assert a.read() == b.read(), attr
