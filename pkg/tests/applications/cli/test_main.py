import json

import pytest
import yaml

from typer.testing import CliRunner

from ap_attack.applications.cli.main import REPORTED_PACKAGES, app, get_installed_packages
from ap_attack.core.default.constants import DEFAULT_EPSILON
from ap_attack.core.metrics import EvaluationReport

runner = CliRunner()


def write_config(tmp_path, **sections):
    config = {
        "output_dir": str(tmp_path / "run"),
        "joint_space": {
            "feature_dim": 16,
            "token_embedding_dim": 16,
            "image_size": [32, 16],
            "patch_size": 8,
            "hidden_dim": 32,
        },
        "encoders": {"grounded": False},
        "data": {
            "synthetic": {
                "num_ids": 8,
                "images_per_id": 4,
                "image_size": [32, 16],
                "num_cameras": 2,
                "num_test_ids": 4,
            }
        },
        "stage1": {"epochs": 2, "lr": 0.001},
        "stage2": {"epochs": 1, "lr": 0.001, "generator": {"preset": "tiny", "base_channels": 4}},
        "evaluation": {"victims": ["handcrafted:0", "clip-visual"]},
    }
    config.update(sections)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(config))
    return str(path)


def invoke(*args):
    result = runner.invoke(app, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


def test_help():
    result = runner.invoke(app, ["--help"])

    assert result.exit_code == 0
    for command in ("synth-gen", "train-inversion", "train-attack", "attack", "evaluate", "interpret"):
        assert command in result.output


def test_sysinfo():
    result = invoke("sysinfo")

    assert "python_version" in result.output


def test_installed_packages_name_missing_ones():
    packages = get_installed_packages(["typer", "no-such-package-for-ap-attack"])

    assert packages["no-such-package-for-ap-attack"] == "not installed"
    assert packages["typer"] != "not installed"
    assert get_installed_packages().keys() == set(REPORTED_PACKAGES)


def test_synth_gen(tmp_path):
    config = write_config(tmp_path)

    result = invoke("synth-gen", "-c", config)

    synth = tmp_path / "run" / "synth"
    assert "train 32" in result.output
    assert (synth / "attributes.json").is_file()
    assert len(list((synth / "gallery").iterdir())) == 12
    assert json.loads((synth / "run.json").read_text())["command"] == "synth-gen"


def test_unknown_override_fails_before_compute(tmp_path):
    config = write_config(tmp_path)

    result = runner.invoke(app, ["synth-gen", "-c", config, "--stage2.epsiloon", "0.1"])

    assert result.exit_code == 1
    assert "Unknown config key 'stage2.epsiloon'" in result.output
    assert not (tmp_path / "run").exists()


def test_missing_prerequisite_stage(tmp_path):
    config = write_config(tmp_path)
    invoke("synth-gen", "-c", config)

    result = runner.invoke(app, ["train-attack", "-c", config])

    assert result.exit_code == 1
    assert "run train-inversion first" in result.output


def test_clean_evaluation(tmp_path):
    config = write_config(tmp_path)
    invoke("synth-gen", "-c", config)

    result = invoke("evaluate", "-c", config, "--evaluation.distance", "l2")

    report = EvaluationReport.load_json(tmp_path / "run" / "evaluation" / "report.json")
    assert [v.name for v in report.victims] == ["handcrafted:0", "clip-visual"]
    assert report.distance == "l2"
    assert report.mdr is None
    assert "aAP" in result.output


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    config = write_config(tmp_path)
    run = tmp_path / "run"

    invoke("synth-gen", "-c", config)
    invoke("train-inversion", "-c", config)
    assert (run / "inversion" / "inversion.ckpt").is_file()
    assert (run / "inversion" / "encoders.ckpt").is_file()
    assert len((run / "inversion" / "logs" / "inversion.jsonl").read_text().splitlines()) == 2

    invoke("train-attack", "-c", config)
    assert (run / "attack" / "generator.ckpt").is_file()

    invoke("attack", run / "synth" / "query", "-c", config)
    manifest = json.loads((run / "adversarial" / "manifest.json").read_text())
    assert len(manifest["images"]) == 4
    assert all(entry["max_abs_delta"] <= DEFAULT_EPSILON + 1e-6 for entry in manifest["images"])
    assert (run / "adversarial" / "images" / manifest["images"][0]["image"]).is_file()

    invoke("evaluate", "-c", config, "--evaluation.defenses", "[jpeg:60]")
    report = EvaluationReport.load_json(run / "evaluation" / "report.json")
    assert report.aap_adversarial is not None
    assert report.mdr is not None
    assert report.defenses == ["jpeg:60"]

    invoke("interpret", "-c", config)
    interpretation = run / "interpretation"
    assert (interpretation / "wordcloud.csv").is_file()
    assert (interpretation / "adversarial_wordcloud.csv").is_file()
    accuracy = json.loads((interpretation / "accuracy.json").read_text())
    assert set(accuracy["clean"]) >= {"top", "macro"}


@pytest.mark.slow
def test_reruns_are_reproducible(tmp_path):
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        config = write_config(root)
        for command in ("synth-gen", "train-inversion", "train-attack", "evaluate"):
            invoke(command, "-c", config)
        run = root / "run"
        runs.append(
            {
                "inversion": (run / "inversion" / "inversion.ckpt").read_bytes(),
                "generator": (run / "attack" / "generator.ckpt").read_bytes(),
                "report": EvaluationReport.load_json(run / "evaluation" / "report.json"),
            }
        )

    first, second = runs
    assert first["inversion"] == second["inversion"]
    assert first["generator"] == second["generator"]
    assert first["report"].config_digest == second["report"].config_digest
    assert second["report"].aap_adversarial == pytest.approx(first["report"].aap_adversarial, abs=1e-6)
    for a, b in zip(first["report"].victims, second["report"].victims):
        assert b.clean_map == pytest.approx(a.clean_map, abs=1e-6)
        assert b.adversarial_map == pytest.approx(a.adversarial_map, abs=1e-6)


@pytest.mark.slow
def test_default_run_defeats_handcrafted_victim(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "output_dir": str(tmp_path / "run"),
                "evaluation": {"victims": ["handcrafted:0"], "surrogate": "handcrafted:0"},
            }
        )
    )
    run = tmp_path / "run"
    for command in ("synth-gen", "train-inversion", "train-attack"):
        invoke(command, "-c", config)
    losses = [
        json.loads(line)["total"]
        for line in (run / "inversion" / "logs" / "inversion.jsonl").read_text().splitlines()
    ]
    assert losses[-1] < losses[0] - 1.0

    invoke("evaluate", "-c", config)
    report = EvaluationReport.load_json(run / "evaluation" / "report.json")
    assert report.victims[0].clean_map >= 0.95
    assert report.mdr >= 50.0

    invoke("evaluate", "-c", config, "--evaluation.defenses", "[jpeg:60]")
    defended = EvaluationReport.load_json(run / "evaluation" / "report.json")
    assert defended.defenses == ["jpeg:60"]
    assert defended.mdr >= 25.0

    invoke("interpret", "-c", config, "--interpretation.adversarial", "false")
    accuracy = json.loads((run / "interpretation" / "accuracy.json").read_text())
    assert accuracy["clean"]["macro"] >= 0.6
