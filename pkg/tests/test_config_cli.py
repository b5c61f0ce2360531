import json
import shutil

import pytest
import yaml

from conftest import TINY_EXPERIMENT as TINY
from peftweave.cli import EXIT_CONFIG, EXIT_INCOMPLETE, EXIT_OK, main
from peftweave.config import ConfigError, ExperimentConfig, dump_config, load_config
from peftweave.evaluation import read_results

def write(tmp_path, data, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def stats(tmp_path):
    return json.loads((tmp_path / "out" / "last_invocation.json").read_text())


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY, str(tmp_path))
    for name in ("a.yaml", "a.json"):
        dump_config(cfg, tmp_path / name)
        again = load_config(tmp_path / name)
        assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("mutate, key", [
    (lambda d: d["configurations"].append("MagicAdapter"), "configurations[2]"),
    (lambda d: d["hyperparams"]["task_prompt"].update(learnin_rate=1.0), "hyperparams.task_prompt"),
    (lambda d: d["languages"][0].update(synth=7), "languages[0].synth"),
    (lambda d: d.update(seeds="zero"), "seeds"),
])
def test_invalid_config_exits_2_naming_the_key(tmp_path, capsys, mutate, key):
    data = json.loads(json.dumps(TINY))
    mutate(data)
    code = main(["matrix", "--config", str(write(tmp_path, data))])
    err = capsys.readouterr().err
    assert code == EXIT_CONFIG
    assert "config error" in err and key in err
    with pytest.raises(ConfigError):
        load_config(tmp_path / "exp.yaml")


def test_matrix_report_and_idempotence(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    assert main(["matrix", "--config", str(cfg)]) == EXIT_OK
    first = stats(tmp_path)
    assert first["training_steps"] > 0 and first["cells_evaluated"] == 2 * 2 * 2 + 2
    results = read_results(tmp_path / "out" / "results.tsv")
    assert len(results) == 10

    assert main(["matrix", "--config", str(cfg)]) == EXIT_OK
    second = stats(tmp_path)
    assert second["training_steps"] == 0 and second["runs_trained"] == 0 and second["cells_evaluated"] == 0

    assert main(["report", "--config", str(cfg)]) == EXIT_OK
    report = tmp_path / "out" / "report"
    for name in ("summary.tsv", "relative_improvement.tsv", "heatmap_qa_lang_prompt_task_prompt.tsv"):
        assert (report / name).is_file(), name

    # a missing checkpoint becomes an absent cell under --no-train
    victim = next((tmp_path / "out" / "runs").glob("task-qa-task_adapter-lang_b-*"))
    shutil.rmtree(victim)
    shutil.rmtree(tmp_path / "out" / "evals")
    code = main(["matrix", "--config", str(cfg), "--no-train"])
    assert code == EXIT_INCOMPLETE
    assert "absent" in capsys.readouterr().err or stats(tmp_path)["absent"]
    assert len(stats(tmp_path)["absent"]) == 2  # lang_b source feeds two targets

    # training again fills only the gap
    assert main(["matrix", "--config", str(cfg)]) == EXIT_OK
    assert stats(tmp_path)["runs_trained"] == 1


def test_targeted_training_commands(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["train-lang", "--config", str(cfg), "--language", "lang_a", "--kind", "prompt"]) == EXIT_OK
    assert stats(tmp_path)["runs_trained"] == 1
    assert main(["train-task", "--config", str(cfg), "--variant", "TaskAdapterOnly", "--source", "lang_b"]) == EXIT_OK
    assert stats(tmp_path)["runs_trained"] == 1
    assert main(["train-task", "--config", str(cfg), "--variant", "Bogus"]) == EXIT_CONFIG
    assert main(["train-lang", "--config", str(cfg), "--language", "klingon"]) == EXIT_CONFIG


def test_report_without_results(tmp_path):
    assert main(["report", "--config", str(write(tmp_path, TINY))]) == EXIT_INCOMPLETE


def test_output_dir_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PEFTWEAVE_OUT", str(tmp_path / "elsewhere"))
    assert main(["synth", "--config", str(write(tmp_path, TINY))]) == EXIT_OK
    assert (tmp_path / "elsewhere" / "corpora").is_dir()
