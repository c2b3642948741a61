import json

import pytest

from abms import cli, gradcheck
from abms.config import RunConfig


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_priors(tmp_path):
    assert cli.main(["gen-priors", "--out", str(tmp_path)]) == 0
    files = _files(tmp_path)
    assert len(files) == 9
    d = json.loads(files["priors/gmm2d_2_0.json"])
    assert len(d["weights"]) == 2


def test_sample_is_byte_identical(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"chains": 10, "guidance": {"method": "abms", "w_max": 0.3, "M": 2}}))
    for run in ("a", "b"):
        assert cli.main(["sample", "--config", str(cfg), "--seed", "3", "--trace", "--out", str(tmp_path / run)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"samples.csv", "summary.jsonl", "trace.jsonl"}
    assert a == b
    summary = json.loads(a["summary.jsonl"])
    assert summary["config"]["seed"] == 3 and summary["guided_steps"] == 99


def test_sample_threads_do_not_change_per_sample_results(tmp_path):
    for run, threads in (("one", "1"), ("two", "2")):
        assert cli.main(["sample", "--threads", threads, "--out", str(tmp_path / run)]) == 0
    assert _files(tmp_path / "one")["samples.csv"] == _files(tmp_path / "two")["samples.csv"]


def test_sweep_and_report(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"chains": 12, "instances": ["gmm2d_2/0/inpaint"],
                               "scales": {"dsg": [0.05, 0.5], "abms": [0.05, 0.5]}}))
    out = tmp_path / "run"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    first = _files(out)
    assert {"sweep.csv", "sweep.jsonl", "frontier.jsonl", "plots/gmm2d_2_0_inpaint.svg"} <= set(first)
    (out / "frontier.jsonl").unlink()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert _files(out) == first


def test_gradcheck_writes_cases(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_gradcheck", lambda n, seed: gradcheck.run_gradcheck(16, seed))
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.jsonl").read_text().splitlines()
    assert len(lines) == 16
    assert "PASS" in capsys.readouterr().out


def test_failed_hard_check_exits_nonzero(tmp_path, monkeypatch, capsys):
    bad = [gradcheck.GradCase("quadratic", 0, 1.0)]
    monkeypatch.setattr(cli, "run_gradcheck", lambda n, seed: bad)
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 1
    assert "hard assertion failed" in capsys.readouterr().err


def test_config_roundtrip_and_errors(tmp_path):
    cfg = RunConfig.from_dict({"prior": {"name": "ring2d_8", "seed": 1}, "task": {"kind": "target", "idx": [0]},
                               "guidance": {"method": "dsg", "w_max": 0.2}})
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"chain": 3})
    prior = cfg.prior.build()
    f = cfg.task.build(prior, 4, 0)
    assert f(prior.means).shape == (prior.K,)


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
