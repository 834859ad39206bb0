import csv
import json

import numpy as np
import pytest
from filelock import FileLock

from stepgrain import cli, config as cfgmod
from stepgrain.env import generate_world, trajectory_from_record
from stepgrain.errors import ConfigError
from stepgrain.optim import TrainConfig
from stepgrain.persist import read_jsonl
from stepgrain.reward import ABLATION_MODES, oracle_annotation, record_to_response, serialize_annotation_request

SMALL = """\
[world]
n_tools = 2
n_tasks = 3
min_items = 1
max_items = 2
n_arg_tokens = 2
horizon = 4

[train]
iterations = 3
batch_size = 8
hidden = 8

[io]
checkpoint_interval = 2
log_level = "WARNING"
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture
def trained(cfg, tmp_path):
    out = tmp_path / "run"
    assert cli.cmd_train(cfg, out=out) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs(trained):
    metrics = rows(trained / "metrics.csv")
    assert [int(r["iteration"]) for r in metrics] == [1, 2, 3]
    assert list(metrics[0]) == cli.METRIC_COLUMNS
    assert len(list(read_jsonl(trained / "metrics.jsonl"))) == 3
    assert (trained / "checkpoint.json").exists()
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["iter_00002.json"]
    snap = cfgmod.load(trained / "config.toml")
    assert snap.train.iterations == 3 and snap.io.output_dir == str(trained)


def test_rerun_and_snapshot_are_identical(trained, cfg, tmp_path):
    assert cli.cmd_train(cfg, out=tmp_path / "again") == 0
    assert cli.cmd_train(trained / "config.toml", out=tmp_path / "snap") == 0
    ref = (trained / "metrics.csv").read_bytes()
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == ref
    assert (tmp_path / "snap" / "metrics.csv").read_bytes() == ref


def test_seed_override_changes_run(trained, cfg, tmp_path):
    assert cli.cmd_train(cfg, seeds=["policy=7"], out=tmp_path / "s7") == 0
    assert (tmp_path / "s7" / "checkpoint.json").read_bytes() != (trained / "checkpoint.json").read_bytes()
    assert cfgmod.load(tmp_path / "s7" / "config.toml").seeds.policy == 7


def test_unknown_key_fails_before_side_effects(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text(SMALL + "bogus = 1\n")  # lands in [io]
    out = tmp_path / "never"
    assert cli.cmd_train(path, out=out) == cli.EXIT_CONFIG
    assert "io.bogus" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize("text, needle", [
    ("[train]\nlearning_rate = true\n", "train.learning_rate"),
    ("[train]\npreset = \"huge\"\n", "train.preset"),
    ("[extra]\nx = 1\n", "extra"),
    ("[eval]\nstrategy = \"bfs\"\n", "eval.strategy"),
    ("[train\n", "invalid TOML"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        cfgmod.loads(text)


def test_config_presets_and_defaults():
    exp = cfgmod.loads('[train]\npreset = "toy"\nhidden = 16\nlearning_rate = 1\n')
    toy = TrainConfig.toy_preset()
    assert exp.train.optimizer == toy.optimizer and exp.train.prior_strength == toy.prior_strength
    assert exp.train.hidden == 16 and exp.train.learning_rate == 1.0
    assert cfgmod.loads("") == cfgmod.ExperimentConfig()
    back = cfgmod.loads(exp.to_toml())
    assert back == exp


def test_log_level_env(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.LOG_ENV, "DEBUG")
    assert cli.cmd_train(cfg, out=tmp_path / "dbg") == 0
    assert cli.log.level == 10  # env beats io.log_level = "WARNING"


def test_eval_strategies(trained, cfg, capsys):
    ck = trained / "checkpoint.json"
    assert cli.cmd_eval(cfg, ck, "sequential", out=trained) == 0
    assert cli.cmd_eval(cfg, ck, "dfs", out=trained) == 0
    assert cli.cmd_eval(cfg, None, "oracle", out=trained) == 0
    for s in ("sequential", "dfs"):
        assert json.loads((trained / f"eval_{s}.json").read_text())["strategy"] == s
    assert json.loads((trained / "eval_oracle.json").read_text())["pass_rate"] == 1.0
    assert "strategy=oracle pass_rate=1.0000" in capsys.readouterr().out
    assert cli.cmd_eval(cfg, None, "dfs", out=trained) == cli.EXIT_CONFIG


def test_eval_rejects_bad_checkpoints(trained, cfg, tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text((trained / "checkpoint.json").read_text()[:100])
    assert cli.cmd_eval(cfg, broken, "sequential", out=tmp_path / "e1") == cli.EXIT_ERROR
    assert "corrupted checkpoint" in capsys.readouterr().err
    other = tmp_path / "other.toml"
    other.write_text(SMALL.replace("n_tools = 2", "n_tools = 3"))
    assert cli.cmd_eval(other, trained / "checkpoint.json", "sequential", out=tmp_path / "e2") == cli.EXIT_ERROR


@pytest.fixture
def trajectories(trained, cfg):
    assert cli.cmd_eval(cfg, trained / "checkpoint.json", "sequential", out=trained) == 0
    return trained / "trajectories_sequential.jsonl"


def oracle_responses(cfg, trajs):
    exp = cfgmod.load(cfg)
    world = generate_world(exp.world, exp.seeds.world)
    out = {}
    for _, rec in read_jsonl(trajs):
        t = trajectory_from_record(world, rec)
        out[serialize_annotation_request(t, world)[0]] = json.dumps(record_to_response(oracle_annotation(world, t)))
    return out


def test_annotate_oracle_matches_in_process(trajectories, cfg, tmp_path):
    from stepgrain.reward import shape_rewards

    assert cli.cmd_annotate(trajectories, "oracle", tmp_path / "o.jsonl", config_path=cfg) == 0
    exp = cfgmod.load(cfg)
    world = generate_world(exp.world, exp.seeds.world)
    got = [r for _, r in read_jsonl(tmp_path / "o.jsonl")]
    src = [r for _, r in read_jsonl(trajectories)]
    assert len(got) == len(src) > 0
    for g, s in zip(got, src):
        rewards = shape_rewards(world, trajectory_from_record(world, s), exp.train.alpha)
        assert [st["sc"] for st in g["steps"]] == [r.succ_calling for r in rewards]
        assert [st["contribution"] for st in g["steps"]] == [r.contribution for r in rewards]


def test_annotate_external_equals_oracle(trajectories, cfg, tmp_path):
    answers = oracle_responses(cfg, trajectories)
    assert cli.cmd_annotate(trajectories, "oracle", tmp_path / "o.jsonl", config_path=cfg) == 0
    assert cli.cmd_annotate(trajectories, "external", tmp_path / "e.jsonl", config_path=cfg,
                            judge=lambda p, s: answers[p], prompts_path=tmp_path / "prompts.jsonl") == 0
    ref = (tmp_path / "o.jsonl").read_bytes()
    assert (tmp_path / "e.jsonl").read_bytes() == ref
    # same responses fed from a file, keyed by the dumped prompts
    prompts = [r["prompt"] for _, r in read_jsonl(tmp_path / "prompts.jsonl")]
    (tmp_path / "resp.jsonl").write_text("".join(answers[p] + "\n" for p in prompts))
    assert cli.cmd_annotate(trajectories, "external", tmp_path / "f.jsonl", config_path=cfg,
                            responses_path=tmp_path / "resp.jsonl") == 0
    assert (tmp_path / "f.jsonl").read_bytes() == ref


def test_annotate_malformed_line(trajectories, cfg, tmp_path, capsys):
    lines = trajectories.read_text().splitlines(keepends=True)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("".join(lines[:2]) + "{not json\n" + "".join(lines[2:]))
    out = tmp_path / "partial.jsonl"
    assert cli.cmd_annotate(bad, "oracle", out, config_path=cfg) == cli.EXIT_ERROR
    assert "line 3" in capsys.readouterr().err
    assert len(out.read_text().splitlines()) == 2


def test_annotate_bad_judge_response(trajectories, cfg, tmp_path, capsys):
    out = tmp_path / "x.jsonl"
    assert cli.cmd_annotate(trajectories, "external", out, config_path=cfg, judge=lambda p, s: "{}") == cli.EXIT_ERROR
    assert "line 1" in capsys.readouterr().err
    assert out.read_text() == ""


def test_ablate(cfg, tmp_path):
    out = tmp_path / "abl"
    assert cli.cmd_ablate(cfg, out=out) == 0
    table = rows(out / "ablation.csv")
    assert [r["mode"] for r in table] == list(ABLATION_MODES)
    assert list(table[0]) == ["mode", "final_pass_rate", "final_tool_success_rate", "iterations_to_threshold"]
    for m in ABLATION_MODES:
        assert len(rows(out / f"metrics_{m}.csv")) == 3
    assert (out / "world.json").exists()


def test_lock_held(cfg, tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        assert cli.cmd_train(cfg, out=out) == cli.EXIT_LOCKED
    assert "lock" in capsys.readouterr().err.lower()


def test_gen_world_deterministic(cfg, tmp_path, capsys):
    assert cli.main(["gen-world", "--config", str(cfg)]) == 0
    a = capsys.readouterr().out
    assert cli.main(["gen-world", "--config", str(cfg), "--out", str(tmp_path / "w.json")]) == 0
    assert (tmp_path / "w.json").read_text() == a
    assert cli.main(["gen-world", "--config", str(cfg), "--seed", "world=1"]) == 0
    assert capsys.readouterr().out != a


def test_parse_seed_overrides():
    assert cli.parse_seed_overrides(["3"]) == dict(world=3, policy=3, rollout=3, eval=3)
    assert cli.parse_seed_overrides(["policy=4", "eval=1"]) == dict(policy=4, eval=1)
    with pytest.raises(ConfigError):
        cli.parse_seed_overrides(["policy=x"])


def test_main_dispatch(cfg, tmp_path):
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    assert np.isfinite(float(rows(tmp_path / "m" / "metrics.csv")[-1]["mean_return"]))
