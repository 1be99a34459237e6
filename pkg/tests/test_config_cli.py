"""Config schema validation, hashing, builders, and the CLI end to end."""
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from fedrelax.cli import _effective_jobs, _effective_out, main
from fedrelax.config import (
    ConfigError,
    build_hp,
    build_problem,
    build_strategy,
    config_hash,
    load_config,
    resolve_config,
)
from fedrelax.core import Simulation
from fedrelax.artifacts import save_checkpoint
from fedrelax.problems import DatasetProblem, QuadraticProblem


# -- schema ---------------------------------------------------------------------

def test_defaults_echoed():
    cfg = resolve_config({})
    assert cfg["problem"] == "quadratic"
    assert cfg["n_clients"] == 10
    assert cfg["n_active"] == 10  # defaults to full participation
    assert cfg["local_iters"] == 5 and cfg["local_epochs"] is None
    assert cfg["lr_decay"] == 0.998
    assert cfg["strategy"] == "fedavg"
    assert cfg["schema_version"] == 1
    assert cfg["theorem"] == 1


def test_mode_aware_lr_defaults():
    assert resolve_config({"strategy": "feddyn"})["lr_decay"] == 0.9995
    assert resolve_config({}, mode="verify-bounds")["lr_decay"] == 1.0
    assert resolve_config({"lr_schedule": "inverse_t"})["lr_decay"] == 1.0
    st = resolve_config({"problem": "blobs"}, mode="stability")
    assert st["lr_schedule"] == "inverse_t" and st["lr_decay"] == 1.0
    # explicit values always win
    assert resolve_config({"lr_decay": 0.9})["lr_decay"] == 0.9
    st2 = resolve_config({"problem": "blobs", "lr_schedule": "constant"}, mode="stability")
    assert st2["lr_schedule"] == "constant"


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'learning_rate'"):
        resolve_config({"learning_rate": 0.1})


def test_type_and_allowed_checks():
    with pytest.raises(ConfigError, match="'n_clients' must be int"):
        resolve_config({"n_clients": "10"})
    with pytest.raises(ConfigError, match="got bool"):
        resolve_config({"n_clients": True})
    with pytest.raises(ConfigError, match="must be one of"):
        resolve_config({"problem": "mnist"})
    with pytest.raises(ConfigError, match="must be one of"):
        resolve_config({"theorem": 5})
    with pytest.raises(ConfigError, match="finite"):
        resolve_config({"lr": float("inf")})
    with pytest.raises(ConfigError, match="'sweep' must be dict"):
        resolve_config({"sweep": [1, 2]})


def test_participation_and_local_steps_guards():
    with pytest.raises(ConfigError, match="n_active=7 exceeds n_clients=4"):
        resolve_config({"n_clients": 4, "n_active": 7})
    with pytest.raises(ConfigError, match="exactly one"):
        resolve_config({"local_iters": 3, "local_epochs": 2})


def test_quadratic_guards():
    with pytest.raises(ConfigError, match="batch_size"):
        resolve_config({"batch_size": 32})
    with pytest.raises(ConfigError, match="local_iters"):
        resolve_config({"local_epochs": 2})
    with pytest.raises(ConfigError, match="cond"):
        resolve_config({"cond": 0.5})
    with pytest.raises(ConfigError, match=">= 0"):
        resolve_config({"spread": -1.0})


def test_dataset_guards():
    with pytest.raises(ConfigError, match="csv_path"):
        resolve_config({"problem": "csv"})
    with pytest.raises(ConfigError, match="n_classes=2"):
        resolve_config({"problem": "blobs", "n_classes": 3})
    resolve_config({"problem": "blobs", "n_classes": 3, "model": "mlp"})  # fine
    with pytest.raises(ConfigError, match="concentration"):
        resolve_config({"problem": "blobs", "concentration": 0.0})
    # epoch mode is legal for dataset problems
    cfg = resolve_config({"problem": "blobs", "local_epochs": 2, "batch_size": 32})
    assert cfg["local_epochs"] == 2 and cfg["local_iters"] is None


def test_betas_coerced():
    cfg = resolve_config({"betas": [0, 0.05]})
    assert cfg["betas"] == [0.0, 0.05]
    assert all(isinstance(b, float) for b in cfg["betas"])
    with pytest.raises(ConfigError, match="numbers"):
        resolve_config({"betas": [0.1, True]})


def test_sweep_validation():
    ok = {"axis": "lr", "values": [0.1, 0.2], "seeds": [0, 1]}
    resolve_config({"sweep": ok})
    with pytest.raises(ConfigError, match="sweep axis"):
        resolve_config({"sweep": {**ok, "axis": "rounds"}})
    with pytest.raises(ConfigError, match="non-empty"):
        resolve_config({"sweep": {**ok, "values": []}})
    with pytest.raises(ConfigError, match="integers"):
        resolve_config({"sweep": {**ok, "seeds": [0.5]}})
    with pytest.raises(ConfigError, match="unknown sweep key"):
        resolve_config({"sweep": {**ok, "step": 2}})


def test_overrides_merge():
    cfg = resolve_config({"seed": 3}, {"seed": 7})
    assert cfg["seed"] == 7
    cfg = resolve_config({"seed": 3}, {"seed": None})  # None-valued overrides ignored
    assert cfg["seed"] == 3


def test_config_hash_semantics():
    base = resolve_config({"lr": 0.1})
    h = config_hash(base)
    assert len(h) == 64
    assert config_hash(resolve_config({"lr": 0.1})) == h
    # operational keys never move the hash
    assert config_hash(resolve_config({"lr": 0.1, "out": "elsewhere",
                                       "jobs": 7, "checkpoint_every": 3})) == h
    # semantic keys do
    assert config_hash(resolve_config({"lr": 0.2})) != h
    assert config_hash(resolve_config({"lr": 0.1, "seed": 1})) != h


def test_load_config_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    p2 = tmp_path / "list.json"
    p2.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(p2)


# -- builders -------------------------------------------------------------------

def test_build_problem_quadratic():
    problem, plan = build_problem(resolve_config({"n_clients": 3, "dim": 2}))
    assert isinstance(problem, QuadraticProblem)
    assert plan is None
    assert problem.n_clients == 3 and problem.dim == 2


def test_build_problem_blobs():
    cfg = resolve_config({
        "problem": "blobs", "n_clients": 4, "n_samples": 200, "n_features": 3,
        "n_test": 40, "batch_size": 16,
    })
    problem, plan = build_problem(cfg)
    assert isinstance(problem, DatasetProblem)
    assert plan is not None and plan.n_clients == 4
    assert problem.n_clients == 4
    assert problem.test is not None and len(problem.test) == 40
    assert sum(problem.shard_size(i) for i in range(4)) == 200


def test_build_strategy_and_hp():
    cfg = resolve_config({"strategy": "fedadam", "rho": 0.2})
    spec = build_strategy(cfg)
    assert spec.name == "fedadam"
    assert spec.server_lr == 0.1  # adaptive server default
    fedavg = build_strategy(resolve_config({}))
    assert fedavg.server_lr == 1.0
    fedinit = build_strategy(resolve_config({"strategy": "fedinit"}))
    assert fedinit.ri and fedinit.beta > 0
    hp = build_hp(resolve_config({"lr": 0.25, "rounds": 7, "n_active": 3,
                                  "n_clients": 5, "local_iters": 4}))
    assert (hp.eta, hp.rounds, hp.n_active, hp.k_local) == (0.25, 7, 3, 4)


# -- CLI ------------------------------------------------------------------------

CLI = [sys.executable, "-m", "fedrelax.cli"]

RUN_CFG = {
    "problem": "blobs", "n_clients": 5, "n_samples": 200, "n_features": 3,
    "n_test": 40, "strategy": "fedinit", "beta": 0.1, "lr": 0.3,
    "rounds": 6, "n_active": 3, "local_iters": 2, "batch_size": 16, "seed": 1,
}


def cli(*argv, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop("FEDRELAX_OUT", None)
    env.pop("FEDRELAX_JOBS", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        CLI + list(argv), capture_output=True, text=True, env=env, cwd=cwd,
    )


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_cli_run_deterministic_rerun(tmp_path):
    cfg_path = write_cfg(tmp_path, RUN_CFG)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    r1 = cli("run", "--config", cfg_path, "--out", out1)
    assert r1.returncode == 0, r1.stderr
    assert "fedinit" in r1.stdout and "6 rounds" in r1.stdout
    rounds1 = open(os.path.join(out1, "rounds.csv"), "rb").read()
    # rerun into the same directory: artifacts overwritten byte-identically
    r1b = cli("run", "--config", cfg_path, "--out", out1)
    assert r1b.returncode == 0
    assert open(os.path.join(out1, "rounds.csv"), "rb").read() == rounds1
    # rerun into a different directory: rounds table still identical
    cli("run", "--config", cfg_path, "--out", out2)
    assert open(os.path.join(out2, "rounds.csv"), "rb").read() == rounds1
    summary = json.loads(open(os.path.join(out1, "summary.json")).read())
    assert summary["strategy"] == "fedinit"
    assert summary["schema_version"] == 1
    assert summary["config"]["beta"] == 0.1
    assert summary["config_hash"] in open(os.path.join(out1, "rounds.csv")).readline()


def test_cli_seed_override_changes_results(tmp_path):
    cfg_path = write_cfg(tmp_path, RUN_CFG)
    out1, out2 = str(tmp_path / "s1"), str(tmp_path / "s2")
    cli("run", "--config", cfg_path, "--out", out1)
    cli("run", "--config", cfg_path, "--out", out2, "--seed", "99")
    a = open(os.path.join(out1, "rounds.csv")).read()
    b = open(os.path.join(out2, "rounds.csv")).read()
    assert a != b


def test_cli_env_out_and_cli_priority(tmp_path):
    cfg_path = write_cfg(tmp_path, RUN_CFG)
    env_dir = str(tmp_path / "envout")
    r = cli("run", "--config", cfg_path, env_extra={"FEDRELAX_OUT": env_dir})
    assert r.returncode == 0
    assert os.path.exists(os.path.join(env_dir, "rounds.csv"))
    cli_dir = str(tmp_path / "cliout")
    r2 = cli("run", "--config", cfg_path, "--out", cli_dir,
             env_extra={"FEDRELAX_OUT": str(tmp_path / "ignored")})
    assert r2.returncode == 0
    assert os.path.exists(os.path.join(cli_dir, "rounds.csv"))
    assert not os.path.exists(str(tmp_path / "ignored"))


def test_cli_resume_matches_uninterrupted(tmp_path):
    cfg_raw = dict(RUN_CFG, rounds=8)
    cfg_path = write_cfg(tmp_path, cfg_raw)
    ref_dir = str(tmp_path / "ref")
    r = cli("run", "--config", cfg_path, "--out", ref_dir)
    assert r.returncode == 0, r.stderr

    # simulate an interrupted run: checkpoint after 5 of 8 rounds
    cfg = resolve_config(load_config(cfg_path), mode="run")
    h = config_hash(cfg)
    problem, _ = build_problem(cfg)
    sim = Simulation(problem, build_strategy(cfg), build_hp(cfg), cfg["seed"])
    sim.config_hash = h
    for _ in range(5):
        sim.step()
    resume_dir = tmp_path / "resumed"
    resume_dir.mkdir()
    save_checkpoint(resume_dir / "checkpoint.json", sim, config_hash=h)

    r2 = cli("run", "--config", cfg_path, "--out", str(resume_dir), "--resume")
    assert r2.returncode == 0, r2.stderr
    ref = open(os.path.join(ref_dir, "rounds.csv"), "rb").read()
    res = open(os.path.join(resume_dir, "rounds.csv"), "rb").read()
    assert res == ref


def test_cli_resume_without_checkpoint_errors(tmp_path):
    cfg_path = write_cfg(tmp_path, RUN_CFG)
    r = cli("run", "--config", cfg_path, "--out", str(tmp_path / "empty"), "--resume")
    assert r.returncode == 2
    assert "no checkpoint found" in r.stderr


def test_cli_resume_rejects_other_config(tmp_path):
    cfg_path = write_cfg(tmp_path, RUN_CFG)
    out = tmp_path / "mismatch"
    out.mkdir()
    cfg = resolve_config(load_config(cfg_path), mode="run")
    problem, _ = build_problem(cfg)
    sim = Simulation(problem, build_strategy(cfg), build_hp(cfg), cfg["seed"])
    sim.step()
    save_checkpoint(out / "checkpoint.json", sim, config_hash="0" * 64)
    r = cli("run", "--config", cfg_path, "--out", str(out), "--resume")
    assert r.returncode == 2
    assert "different configuration" in r.stderr


def test_cli_unknown_key_exit_2(tmp_path):
    cfg_path = write_cfg(tmp_path, {"learning_rate": 0.1})
    r = cli("run", "--config", cfg_path, "--out", str(tmp_path / "o"))
    assert r.returncode == 2
    assert "unknown config key" in r.stderr


def test_cli_missing_config_file(tmp_path):
    r = cli("run", "--config", str(tmp_path / "nope.json"))
    assert r.returncode == 2
    assert "error:" in r.stderr


def test_cli_verify_bounds_pass_and_fail(tmp_path):
    passing = {
        "problem": "quadratic", "n_clients": 4, "dim": 3, "spread": 1.0,
        "strategy": "fedinit", "beta": 0.05, "lr": 0.05, "rounds": 60,
        "local_iters": 3, "lr_schedule": "constant", "theorem": 1,
    }
    out = str(tmp_path / "ok")
    r = cli("verify-bounds", "--config", write_cfg(tmp_path, passing), "--out", out)
    assert r.returncode == 0, r.stderr
    assert "holds=True" in r.stdout
    report = json.loads(open(os.path.join(out, "bounds_report.json")).read())
    assert report["report"]["holds_at_most_favorable"] is True
    assert len(report["report"]["grid"]) == 9

    # the interpolation-regime statement fails once its assumption is violated:
    # heterogeneous curvature, no common minimizer, beta = 0
    failing = {
        "problem": "quadratic", "n_clients": 5, "dim": 4, "spread": 2.0,
        "cond": 5.0, "strategy": "fedavg", "lr": 0.05, "rounds": 800,
        "local_iters": 3, "lr_schedule": "constant", "theorem": 4,
    }
    out2 = str(tmp_path / "fail")
    r2 = cli("verify-bounds", "--config", write_cfg(tmp_path, failing, "f.json"),
             "--out", out2)
    assert r2.returncode == 3, r2.stdout + r2.stderr
    assert "holds=False" in r2.stdout
    report2 = json.loads(open(os.path.join(out2, "bounds_report.json")).read())
    assert report2["report"]["holds_at_most_favorable"] is False


def test_cli_verify_bounds_needs_quadratic(tmp_path):
    cfg_path = write_cfg(tmp_path, {"problem": "blobs"})
    r = cli("verify-bounds", "--config", cfg_path, "--out", str(tmp_path / "o"))
    assert r.returncode == 2
    assert "quadratic" in r.stderr


def test_cli_stability(tmp_path):
    cfg = {
        "problem": "blobs", "n_clients": 4, "n_samples": 160, "n_features": 3,
        "n_test": 40, "lr": 0.5, "rounds": 3, "n_active": 2, "local_iters": 2,
        "batch_size": 16, "betas": [0.0, 0.05], "stability_seeds": 2,
        "perturb_client": 1, "perturb_index": 0,
    }
    out = str(tmp_path / "stab")
    r = cli("stability", "--config", write_cfg(tmp_path, cfg), "--out", out)
    assert r.returncode == 0, r.stderr
    report = json.loads(open(os.path.join(out, "stability_report.json")).read())
    assert report["perturb"] == {"client": 1, "sample": 0}
    assert [row["beta"] for row in report["summary"]["per_beta"]] == [0.0, 0.05]
    assert len(report["traces"]) == 4
    assert "non-increasing in beta" in r.stdout


def test_cli_stability_guards(tmp_path):
    r = cli("stability", "--config", write_cfg(tmp_path, {"problem": "quadratic"}),
            "--out", str(tmp_path / "o"))
    assert r.returncode == 2 and "blobs" in r.stderr
    bad = {
        "problem": "blobs", "n_clients": 4, "n_samples": 160, "n_features": 3,
        "rounds": 2, "local_iters": 2, "stability_seeds": 1, "perturb_client": 9,
    }
    r2 = cli("stability", "--config", write_cfg(tmp_path, bad, "b.json"),
             "--out", str(tmp_path / "o2"))
    assert r2.returncode == 2
    assert "out of range" in r2.stderr


def test_cli_partition_report(tmp_path):
    cfg = {"problem": "blobs", "n_clients": 5, "n_samples": 300, "n_features": 3,
           "concentration": 0.5, "n_test": 0}
    out = str(tmp_path / "part")
    r = cli("partition-report", "--config", write_cfg(tmp_path, cfg), "--out", out)
    assert r.returncode == 0, r.stderr
    rep = json.loads(open(os.path.join(out, "partition_report.json")).read())
    assert rep["n_clients"] == 5
    assert sum(rep["sizes"]) == 300
    assert rep["concentration"] == 0.5
    assert "mean TV" in r.stdout
    r2 = cli("partition-report", "--config",
             write_cfg(tmp_path, {"problem": "quadratic"}, "q.json"),
             "--out", str(tmp_path / "o"))
    assert r2.returncode == 2


def test_cli_sweep_serial_and_parallel_identical(tmp_path):
    cfg = {
        "problem": "quadratic", "n_clients": 4, "dim": 3, "rounds": 10,
        "local_iters": 3, "lr": 0.05,
        "sweep": {"axis": "beta", "values": [0.0, 0.1], "seeds": [0, 1]},
        "strategy": "fedinit",
    }
    cfg_path = write_cfg(tmp_path, cfg)
    out1, out2 = str(tmp_path / "j1"), str(tmp_path / "j2")
    r1 = cli("sweep", "--config", cfg_path, "--out", out1, "--jobs", "1")
    assert r1.returncode == 0, r1.stderr
    assert "4 runs (2 x 2)" in r1.stdout
    r2 = cli("sweep", "--config", cfg_path, "--out", out2, "--jobs", "2")
    assert r2.returncode == 0, r2.stderr
    csv1 = open(os.path.join(out1, "sweep.csv"), "rb").read()
    csv2 = open(os.path.join(out2, "sweep.csv"), "rb").read()
    assert csv1 == csv2
    lines = csv1.decode().splitlines()
    assert lines[0].startswith("# schema=1 config_hash=")
    assert lines[1].split(",")[0] == "axis"
    assert len(lines) == 2 + 4 + 4  # header block + runs + mean/std per value
    j = json.loads(open(os.path.join(out1, "sweep.json")).read())
    assert len(j["rows"]) == 4 and len(j["aggregates"]) == 4
    assert {row["seed"] for row in j["aggregates"]} == {"mean", "std"}


def test_cli_sweep_requires_block(tmp_path):
    r = cli("sweep", "--config", write_cfg(tmp_path, {"problem": "quadratic"}),
            "--out", str(tmp_path / "o"))
    assert r.returncode == 2
    assert "sweep" in r.stderr


def test_effective_out_and_jobs_helpers():
    cfg = {"out": "from-cfg", "jobs": 3}
    assert _effective_out(cfg, "cli-dir", "x") == "cli-dir"
    assert _effective_out({"out": None, "jobs": None}, None, "zz").endswith("zz")
    os.environ["FEDRELAX_JOBS"] = "5"
    try:
        assert _effective_jobs(cfg, None) == 5
        assert _effective_jobs(cfg, 2) == 2
    finally:
        del os.environ["FEDRELAX_JOBS"]
    assert _effective_jobs(cfg, None) == 3
    with pytest.raises(ConfigError, match="jobs"):
        _effective_jobs(cfg, -1)


def test_main_in_process_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")


@pytest.mark.skipif(shutil.which("fedrelax") is None,
                    reason="console script not on PATH")
def test_console_script_help():
    r = subprocess.run(["fedrelax", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("run", "sweep", "verify-bounds", "stability", "partition-report"):
        assert sub in r.stdout
