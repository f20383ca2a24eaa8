"""
Tests for the reasonforge command line.
"""

import io
import json

import pytest
from click.testing import CliRunner
from PIL import Image

from reasonforge import __version__
from reasonforge.cli import EXIT_NO_YIELD, EXIT_USAGE, main
from reasonforge.config import CONFIG_ENV_VAR, Config, load_config
from reasonforge.dataset import PATHS_FILE, STEPS_FILE, emit_step_records, read_traces, write_jsonl
from reasonforge.reasoner import Termination
from reasonforge.scene import Scene, load_scenes, write_scenes


@pytest.fixture(autouse=True)
def no_env_config(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def gold_file(tmp_path, gold_paths):
    return write_jsonl(tmp_path / PATHS_FILE, gold_paths)


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_version(runner):
    result = invoke(runner, "--version")
    assert result.exit_code == 0
    assert __version__ in result.output


@pytest.mark.parametrize("fmt", ["yaml", "json"])
def test_init(runner, tmp_path, fmt):
    output = tmp_path / f"reasonforge.{fmt}"
    result = invoke(runner, "init", "--format", fmt, "--output", output)
    assert result.exit_code == 0
    assert output.exists()
    assert load_config(output) == Config()


def test_scenes(runner, tmp_path):
    out = tmp_path / "scenes.json"
    assert invoke(runner, "scenes", "--count", 3, "--seed", 1, "--out", out).exit_code == 0
    assert len(load_scenes(out)) == 3
    assert invoke(runner, "scenes", "--count", 3, "--width", 100, "--out", out).exit_code == EXIT_USAGE


def test_import_detections(runner, tmp_path):
    detections = tmp_path / "detections.json"
    detections.write_text(json.dumps({"scenes": [{
        "id": "img", "width": 50, "height": 50,
        "entities": [
            {"id": "a", "label": "cup", "bbox": [1, 1, 10, 10], "confidence": 0.9},
            {"id": "b", "label": "cup", "bbox": [10, 10, 1, 1], "confidence": 0.9},
        ],
    }]}), encoding="utf-8")
    out = tmp_path / "scenes.json"
    assert invoke(runner, "import-detections", "--input", detections, "--out", out).exit_code == 0
    assert [e.id for e in load_scenes(out).get("img").entities] == ["a"]
    assert invoke(runner, "import-detections", "--input", tmp_path / "nope.json", "--out", out).exit_code == EXIT_USAGE


class TestSynthesize:

    @pytest.fixture
    def generated(self, runner, tmp_path):
        out = tmp_path / "scenes.json"
        invoke(runner, "scenes", "--count", 20, "--seed", 0, "--out", out)
        return out

    def test_synthesize_is_reproducible(self, runner, tmp_path, generated):
        first = tmp_path / "data1"
        result = invoke(runner, "synthesize", "--scenes", generated, "--out", first, "--per-scene", 3)
        assert result.exit_code == 0
        for name in (PATHS_FILE, STEPS_FILE, "dataset.e2e.jsonl", "stats.json"):
            assert (first / name).exists()

        second = tmp_path / "data2"
        invoke(runner, "synthesize", "--scenes", generated, "--out", second, "--per-scene", 3, "--parallelism", 4)
        assert (first / PATHS_FILE).read_bytes() == (second / PATHS_FILE).read_bytes()
        assert (first / STEPS_FILE).read_bytes() == (second / STEPS_FILE).read_bytes()

    def test_synthesized_corpus_runs_and_scores(self, runner, tmp_path, generated):
        data = tmp_path / "data"
        invoke(runner, "synthesize", "--scenes", generated, "--out", data, "--count", 10)
        traces = tmp_path / "traces.jsonl"
        assert invoke(runner, "run", "--dataset", data / PATHS_FILE, "--scenes", generated,
                      "--out", traces).exit_code == 0
        result = invoke(runner, "eval", "--traces", traces, "--gold", data / PATHS_FILE, "--scenes", generated,
                        "--metric", "em", "--out", tmp_path / "report.json")
        assert result.exit_code == 0
        assert "accuracy: 1.0000" in result.output

    def test_missing_scenes_file(self, runner, tmp_path):
        result = invoke(runner, "synthesize", "--scenes", tmp_path / "nope.json", "--out", tmp_path / "data")
        assert result.exit_code == EXIT_USAGE

    def test_zero_yield(self, runner, tmp_path):
        empty = write_scenes([Scene(id="empty", width=100, height=100)], tmp_path / "empty.json")
        result = invoke(runner, "synthesize", "--scenes", empty, "--out", tmp_path / "data")
        assert result.exit_code == EXIT_NO_YIELD

    def test_config_errors(self, runner, tmp_path, generated):
        result = invoke(runner, "--config", tmp_path / "missing.yaml", "synthesize",
                        "--scenes", generated, "--out", tmp_path / "data")
        assert result.exit_code == EXIT_USAGE
        result = invoke(runner, "synthesize", "--scenes", generated, "--out", tmp_path / "data",
                        "--max-chain-len", 1)
        assert result.exit_code == EXIT_USAGE


class TestRunAndEval:

    def test_run_then_eval(self, runner, tmp_path, scene_file, gold_file):
        traces = tmp_path / "traces.jsonl"
        result = invoke(runner, "run", "--dataset", gold_file, "--scenes", scene_file, "--out", traces)
        assert result.exit_code == 0
        written = read_traces(traces)
        assert [t.task.task_id for t in written] == ["s1-0", "s1-1", "s1-2"]
        assert all(t.termination == Termination.ANSWERED for t in written)
        assert [t.task.gold_answer for t in written] == ["STOP", "red", "2"]

        report = tmp_path / "report.json"
        result = invoke(runner, "eval", "--traces", traces, "--gold", gold_file, "--scenes", scene_file,
                        "--metric", "em", "--out", report)
        assert result.exit_code == 0
        assert "accuracy: 1.0000" in result.output
        assert json.loads(report.read_text())["accuracy"] == 1.0

    def test_run_from_step_records(self, runner, tmp_path, scene, scene_file, gold_paths):
        steps = write_jsonl(tmp_path / STEPS_FILE, [r for p in gold_paths for r in emit_step_records(p, scene)])
        traces = tmp_path / "traces.jsonl"
        result = invoke(runner, "run", "--dataset", steps, "--scenes", scene_file, "--out", traces,
                        "--parallelism", 2, "--context-passthrough")
        assert result.exit_code == 0
        assert [t.final_answer for t in read_traces(traces)] == ["STOP", "red", "2"]

    def test_eval_id_mismatch(self, runner, tmp_path, scene_file, gold_paths, gold_file):
        traces = tmp_path / "traces.jsonl"
        invoke(runner, "run", "--dataset", gold_file, "--scenes", scene_file, "--out", traces)
        partial = write_jsonl(tmp_path / "partial.jsonl", gold_paths[:2])
        result = invoke(runner, "eval", "--traces", traces, "--gold", partial, "--scenes", scene_file,
                        "--out", tmp_path / "report.json")
        assert result.exit_code == EXIT_USAGE
        assert "s1-2" in result.output

    def test_remote_tools_need_an_endpoint(self, runner, tmp_path, scene_file, gold_file):
        result = invoke(runner, "run", "--dataset", gold_file, "--scenes", scene_file, "--tools", "remote",
                        "--out", tmp_path / "traces.jsonl")
        assert result.exit_code == EXIT_USAGE

    def test_remote_policy_needs_a_remote_backend(self, runner, tmp_path, scene_file, gold_file):
        result = invoke(runner, "run", "--dataset", gold_file, "--scenes", scene_file, "--policy", "remote",
                        "--out", tmp_path / "traces.jsonl")
        assert result.exit_code == EXIT_USAGE

    def test_replay(self, runner, tmp_path, scene_file, gold_file):
        traces = tmp_path / "traces.jsonl"
        invoke(runner, "run", "--dataset", gold_file, "--scenes", scene_file, "--out", traces)
        replayed = tmp_path / "replayed.jsonl"
        result = invoke(runner, "replay", "--traces", traces, "--scenes", scene_file, "--out", replayed)
        assert result.exit_code == 0
        assert "0 diverged" in result.output
        assert len(read_traces(replayed)) == 3


class TestInspection:

    def test_validate(self, runner, tmp_path, scene_file, gold_paths, gold_file):
        result = invoke(runner, "validate", "--dataset", gold_file, "--scenes", scene_file)
        assert result.exit_code == 0
        assert "3/3" in result.output

        tampered = [gold_paths[0].model_copy(update={"gold_answer": "EXIT"})] + gold_paths[1:]
        bad = write_jsonl(tmp_path / "bad.jsonl", tampered)
        reports = tmp_path / "reports.jsonl"
        assert invoke(runner, "validate", "--dataset", bad, "--scenes", scene_file, "--out", reports).exit_code == 0
        assert [json.loads(line)["argument_ok"] for line in reports.read_text().splitlines()] == [False, True, True]
        assert invoke(runner, "validate", "--dataset", bad, "--scenes", scene_file, "--strict").exit_code == 1

    def test_stats(self, runner, tmp_path, gold_file):
        out = tmp_path / "stats.json"
        result = invoke(runner, "stats", "--dataset", gold_file, "--out", out)
        assert result.exit_code == 0
        assert json.loads(out.read_text())["total"] == 3

    def test_stats_of_empty_dataset(self, runner, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        assert invoke(runner, "stats", "--dataset", empty).exit_code == 0

    def test_render_scene(self, runner, tmp_path, scene_file):
        out = tmp_path / "scene.png"
        result = invoke(runner, "render", "--scenes", scene_file, "--out", out, "--width", 50, "--height", 40)
        assert result.exit_code == 0
        assert Image.open(io.BytesIO(out.read_bytes())).size == (50, 40)

    def test_render_path_step(self, runner, tmp_path, scene_file, gold_file):
        out = tmp_path / "step.png"
        result = invoke(runner, "render", "--scenes", scene_file, "--out", out, "--dataset", gold_file,
                        "--path-id", "s1-0", "--step", 2)
        assert result.exit_code == 0
        assert out.read_bytes().startswith(b"\x89PNG")

        for args in (["--path-id", "s1-9", "--dataset", gold_file], ["--scene-id", "nope"],
                     ["--path-id", "s1-0", "--dataset", gold_file, "--step", 9]):
            assert invoke(runner, "render", "--scenes", scene_file, "--out", out, *args).exit_code == EXIT_USAGE
