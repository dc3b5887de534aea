import re
import shlex
import subprocess
import sys

import pytest

from carecheck import cli
from carecheck.semantics import parse_trace, run_keys
from carecheck.protocol import load_params


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def record(out: str) -> dict:
    return dict(line.split(": ", 1) for line in out.splitlines() if ": " in line)


def rerun(out: str, capsys):
    argv = shlex.split(record(out)["command"])[1:]
    return run(argv, capsys)


def test_verify_orphan_holds_on_small_preset(capsys, tmp_path):
    code, out, _ = run(["verify", "--params", "params-c-small", "--query", "orphan",
                        "--evidence", str(tmp_path / "e.trace")], capsys)
    assert code == cli.EXIT_OK
    assert record(out)["verdict"] == "holds"


def test_verify_deadlock_with_small_buffers_writes_evidence(capsys, tmp_path):
    ev = tmp_path / "cex.trace"
    code, out, _ = run(["verify", "--params", "desk-small", "--set", "queue_size=2",
                        "--query", "deadlock", "--evidence", str(ev)], capsys)
    assert code == cli.EXIT_FAIL
    assert str(ev) in record(out)["artifacts"]
    params = load_params(cli.data_dir() / "desk-small.params").with_(queue_size=2)
    keys, _ = parse_trace(ev.read_text())
    trace = run_keys(params, keys)
    assert trace.states[-1].orc == "CheckCompatibility"


def test_state_cap_exits_unknown(capsys):
    code, out, _ = run(["verify", "--params", "desk-small", "--query", "deadlock",
                        "--state-cap", "50", "--evidence", "-"], capsys)
    assert code == cli.EXIT_UNKNOWN
    assert record(out)["verdict"] == "unknown"


@pytest.mark.parametrize("argv", [
    ["verify", "--params", "desk-small", "--query", "A[] (orc.Nowhere"],
    ["verify", "--params", "no/such/file.params", "--query", "deadlock"],
    ["verify", "--params", "desk-small", "--set", "queue_size", "--query", "deadlock"],
    ["verify", "--params", "desk-small", "--query", "buffer-full"],
    ["smc", "--params", "desk-small", "--query", "deadlock"],
    ["frobnicate"],
    ["smc", "--params", "desk-small", "--query", "buffer-full", "--alpha", "2"],
])
def test_usage_errors_exit_3_without_traceback(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == cli.EXIT_USAGE
    assert "Traceback" not in err


def test_smc_reports_chernoff_run_count(capsys, caplog):
    caplog.set_level("INFO", logger="carecheck")
    code, out, err = run(["-v", "smc", "--params", "desk-small", "--query", "buffer-full",
                          "--alpha", "0.05", "--epsilon", "0.01", "--horizon", "5",
                          "--seed", "1", "--runs", "40"], capsys)
    assert code == cli.EXIT_OK
    assert record(out)["runs"] == "40"
    code, _, err = run(["-v", "smc", "--params", "desk-small", "--query", "buffer-full",
                        "--alpha", "0.05", "--epsilon", "0.5", "--horizon", "5"], capsys)
    assert "8 runs" in caplog.text
    assert cli.smc.chernoff_runs(0.05, 0.01) == 18445


def test_echo_line_reproduces_verdict(capsys, tmp_path):
    argv = ["verify", "--params", "desk-small", "--set", "queue_size=2", "--query", "deadlock",
            "--evidence", str(tmp_path / "a.trace")]
    code, out, _ = run(argv, capsys)
    code2, out2, _ = rerun(out, capsys)
    assert (code, record(out)["verdict"]) == (code2, record(out2)["verdict"])
    assert (tmp_path / "a.trace").read_text()


def test_echo_line_reproduces_interval(capsys):
    code, out, _ = run(["smc", "--params", "desk-small", "--query", "timeout", "--set", "timeout_mode=nondet", "--horizon", "50",
                        "--seed", "7", "--runs", "30"], capsys)
    code2, out2, _ = rerun(out, capsys)
    assert code == code2 == cli.EXIT_OK
    for key in ("query", "horizon", "interval", "runs", "p_hat"):
        assert record(out)[key] == record(out2)[key]


def test_environment_override_is_echoed(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("CARECHECK_QUEUE_SIZE", "2")
    code, out, _ = run(["verify", "--params", "desk-small", "--query", "deadlock",
                        "--evidence", str(tmp_path / "x.trace")], capsys)
    assert code == cli.EXIT_FAIL
    assert "--set queue_size=2" in record(out)["command"]
    monkeypatch.delenv("CARECHECK_QUEUE_SIZE")
    code2, out2, _ = rerun(out, capsys)
    assert code2 == cli.EXIT_FAIL
    assert record(out)["params_digest"] == record(out2)["params_digest"]


def test_simulate_writes_replayable_trace(capsys, tmp_path):
    path = tmp_path / "run.txt"
    code, out, _ = run(["simulate", "--params", "desk-small", "--horizon", "30", "--seed", "3",
                        "--out", str(path)], capsys)
    assert code == cli.EXIT_OK
    body = path.read_text()
    times = [float(line.split()[0]) for line in body.splitlines()]
    assert times == sorted(times)
    assert int(record(out)["transitions"]) == len(times)


@pytest.mark.parametrize("tag,config", [
    ("dict-cent", "DICTATORIAL/CENTRALISED"),
    ("dict-dist", "DICTATORIAL/DISTRIBUTED"),
    ("maj-cent", "MAJORITARIAN/CENTRALISED"),
    ("maj-dist", "MAJORITARIAN/DISTRIBUTED"),
])
def test_gentest_concretize_conformance(tag, config, capsys, tmp_path):
    out_dir = tmp_path / tag
    code, out, _ = run(["gentest", "--params", f"testgen-{tag}", "--steps-query", f"steps-{tag}",
                        "--annotations", "coffee", "--out", str(out_dir)], capsys)
    assert code == cli.EXIT_OK, out
    script = out_dir / "script.txt"
    code, out, _ = run(["concretize", "--test", str(out_dir / "abstract.test"),
                        "--bindings", f"bindings-{tag}", "--out", str(script)], capsys)
    assert code == cli.EXIT_OK
    assert "%{" not in script.read_text()
    code, out, _ = run(["conformance", "--script", str(script), "--contract", "coffee",
                        "--config", config, "--policy", "scripted:(!euro,-);STOP",
                        "--deadline", "10"], capsys)
    assert code == cli.EXIT_OK, out
    assert record(out)["result"] == "pass"


def test_concretize_reports_unbound_placeholders(capsys, tmp_path):
    run(["gentest", "--params", "testgen-dict-cent", "--steps-query", "steps-dict-cent",
         "--annotations", "coffee", "--out", str(tmp_path)], capsys)
    (tmp_path / "b.txt").write_text('choice_type = "DICTATORIAL"\n')
    code, _, err = run(["concretize", "--test", str(tmp_path / "abstract.test"),
                        "--bindings", str(tmp_path / "b.txt"), "--out", str(tmp_path / "s")], capsys)
    assert code == cli.EXIT_USAGE
    assert "expected_action" in err


def test_gentest_unreachable_query_exits_1(capsys, tmp_path):
    q = tmp_path / "bad.query"
    q.write_text("steps[0] == svc(0):ORC_STOP\n")
    code, out, _ = run(["gentest", "--params", "testgen-dict-cent", "--steps-query", str(q),
                        "--annotations", "coffee", "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_FAIL
    assert record(out)["witness"] == "none"


def test_console_script_runs_as_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "carecheck.cli", "verify", "--params", "desk-small",
                           "--query", "reach-termination", "--evidence", "-"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert re.search(r"^verdict: holds$", proc.stdout, re.M)
    assert "command: carecheck verify" in proc.stdout
