import json
import os
import subprocess
import sys

import pytest

from cantor_prufer import cli
from cantor_prufer.storage import sha256_bytes


def run(*argv):
    return cli.run(list(argv))


@pytest.fixture(scope="module")
def wvn_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("wvn")
    res = run("synth-wvn", "--out", str(out), "-q")
    return out, res


@pytest.fixture(scope="module")
def split_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    res = run("split", "--out", str(out), "-q")
    return out, res


def manifest(root):
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def test_synth_wvn(wvn_dir):
    out, res = wvn_dir
    assert res.exit_code == 0
    traj, report = res.payload
    assert 0.9 <= report.check("pair0.lo.f_norm").measured <= 1.1
    for name in ("potential.csv", "trajectory.csv", "report.json", "report.csv",
                 "eigenfunction.svg", "config.ini", "run.json"):
        assert (out / name).exists(), name


def test_manifest_lists_every_file(split_dir):
    out, _ = split_dir
    m = manifest(out)
    assert m["status"] == "PASS" and m["exit_code"] == 0
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()}
    assert set(m["files"]) == on_disk - {"manifest.json"}
    for name, rec in m["files"].items():
        assert rec["sha256"] == sha256_bytes((out / name).read_bytes())


def test_split_outputs(split_dir):
    out, res = split_dir
    assert res.exit_code == 0
    assert len(res.payload.tree.leaves()) == 2
    assert (out / "tree.csv").read_text().splitlines()[1] == \
        "stage,j,parent,k_base,k_offset,delta_k,f,mass"
    assert (out / "potential.csv").read_text().startswith("# cantor_prufer potential v1\nx,V\n")
    head = (out / "report.csv").read_text().splitlines()
    assert head[1] == "check_name,measured,predicted,tolerance,pass"
    svg = (out / "eigenfunction.svg").read_text()
    assert svg.startswith("<svg") and "href" not in svg and "<script" not in svg
    assert "flip" in svg


def test_no_plot(tmp_path):
    res = run("synth-wvn", "--out", str(tmp_path), "--no-plot", "-q")
    assert res.exit_code == 0
    assert not list(tmp_path.glob("*.svg"))


def test_verify_identical(split_dir, capsys):
    out, _ = split_dir
    res = run("verify", str(out))
    assert res.exit_code == 0
    assert "rebuilt report identical to stored report" in capsys.readouterr().out


def test_verify_tight_tolerances(split_dir, tmp_path, capsys):
    out, _ = split_dir
    cfg = tmp_path / "tight.ini"
    cfg.write_text("[tolerances]\nsplit_norm_band = 0.999999 1.000001\n")
    res = run("verify", str(out), "--config", str(cfg))
    assert res.exit_code == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_tampered(split_dir, tmp_path, capsys):
    import shutil
    src, _ = split_dir
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    p = dst / "trajectory.csv"
    p.write_text(p.read_text().replace("e-", "E-", 1))
    res = run("verify", str(dst))
    assert res.exit_code == 65
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "DigestMismatch"


def test_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[profile\nf = \n")
    assert run("split", "--config", str(cfg), "--out", str(tmp_path / "o")).exit_code == 64
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"


def test_missing_config(tmp_path):
    assert run("split", "--config", str(tmp_path / "none.ini"),
               "--out", str(tmp_path / "o")).exit_code == 64


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("split", "--bogus")
    assert exc.value.code == 64


def test_constraint_violation(tmp_path, capsys):
    cfg = tmp_path / "g.ini"
    cfg.write_text("[profile]\ng = 0.1\n")
    out = tmp_path / "o"
    res = run("synth-wvn", "--config", str(cfg), "--out", str(out), "-q")
    assert res.exit_code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConstraintViolation"
    assert "g >> 1" in err["constraint"]
    m = manifest(out)
    assert m["status"] == "FAIL" and m["error"]["type"] == "ConstraintViolation"


def test_no_feasible_split_point(tmp_path, capsys):
    # a small step budget reaches the same guard as the full default run, sooner
    cfg = tmp_path / "budget.ini"
    cfg.write_text("[budgets]\nstep_budget = 2e6\n")
    out = tmp_path / "o"
    res = run("construct", "--stages", "2", "--config", str(cfg), "--out", str(out), "-q")
    assert res.exit_code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "NoFeasibleSplitPoint"
    assert err["constraint"] and err["margin"] < 0
    assert err["stage"] == 1
    # the stage that did run is still reported
    assert (out / "reports" / "stage1.report.json").exists()
    assert "no feasible split point" in (out / "summary.txt").read_text()


def test_construct_one_stage(tmp_path):
    res = run("construct", "--stages", "1", "--out", str(tmp_path), "-q")
    assert res.exit_code == 0
    assert len(res.payload.tree.leaves()) == 2
    for name in ("runs/stage1.trajectory.csv", "reports/stage1.report.json", "bumps.svg",
                 "summary.txt", "tree.csv", "potential.csv"):
        assert (tmp_path / name).exists(), name


def test_construct_two_stages(two_stage):
    assert two_stage.exit_code == 0
    out = two_stage.out_dir
    summary = open(os.path.join(out, "summary.txt"), encoding="utf-8").read()
    assert "leaves: 4" in summary
    assert summary.count("mass_conservation") == 2
    m = manifest(out)
    assert "reports/stage2.report.json" in m["files"]


def test_verify_two_stages(two_stage, capsys):
    res = run("verify", two_stage.out_dir)
    assert res.exit_code == 0
    assert capsys.readouterr().out.count("identical to stored report") == 2


def test_params(capsys):
    assert run("params", "--profile", "two-stage").exit_code == 0
    text = capsys.readouterr().out
    assert "[profile]" in text and "k0 = 0.5" in text


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cantor_prufer.cli", "params"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "[profile]" in proc.stdout
