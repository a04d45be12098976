import json
import socket
import time

import pytest

from ncsmw.cli import main
from ncsmw.config import ConfigError, NodeConfig, parse_node_config
from ncsmw.netnode import NetNode, admin_request


# -- node config files ---------------------------------------------------------

GOOD = """\
node_id = nodeA
listen = 127.0.0.1:0
time = real
dispatchers = 3 2 1
jpr = rm
rm.15 = 1
rm.1000 = 2
peer.nodeB = 127.0.0.1:7401
component.echo = echo {"x": 1}
"""


def test_parse_node_config():
    cfg = parse_node_config(GOOD, "a.conf")
    assert cfg.node_id == "nodeA" and cfg.listen == ("127.0.0.1", 0)
    assert cfg.rm_map == {15: 1, 1000: 2}
    assert cfg.peers == {"nodeB": ("127.0.0.1", 7401)}
    assert cfg.components == [("echo", "echo", {"x": 1})]
    assert cfg.build_jpr().place(None, None)[0] == 3


@pytest.mark.parametrize(
    "text, line",
    [
        ("node_id = a\nbogus = 1\n", 2),
        ("time = later\n", 1),
        ("listen = nowhere\n", 1),
        ("rm.15 = 3\nrm.1000 = 1\n", 2),
        ("component.c = echo [1]\n", 1),
        ("jpr = edf\nedf.dispatcher = 7\n", 2),
        ("node_id\n", 1),
    ],
)
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=rf"^c:{line}: "):
        parse_node_config(text, "c")


# -- analyze -----------------------------------------------------------------

def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_analyze_util(tmp_path, capsys):
    f = write(tmp_path, "t1.tasks", "a 14.5 80\nb 42.4 200\nc 49 350\n")
    assert main(["analyze", f, "util"]) == 0
    assert "0.53325" in capsys.readouterr().out


def test_analyze_rm_and_rta(tmp_path, capsys):
    assert main(["analyze", write(tmp_path, "h.tasks", "a 1 4\nb 2 8\n"), "rm"]) == 0
    assert "guaranteed" in capsys.readouterr().out
    assert main(["analyze", write(tmp_path, "r.tasks", "t1 2 4\nt2 3 6\n"), "rta"]) == 0
    out = capsys.readouterr().out
    assert "t1: R = 2" in out and "t2: R = divergent" in out


def test_analyze_simulate_writes_trace(tmp_path, capsys):
    f = write(tmp_path, "s.tasks", "t1 1 4\nt2 2 6\n")
    out_csv = tmp_path / "trace.csv"
    assert main(["analyze", f, "simulate", "--out", str(out_csv)]) == 0
    assert out_csv.read_text().startswith("task,job,start,end,state")
    assert "t2: worst response 3" in capsys.readouterr().out


def test_analyze_bad_file_reports_line(tmp_path, capsys):
    f = write(tmp_path, "bad.tasks", "a 1 4\nb one 4\n")
    assert main(["analyze", f, "util"]) == 2
    assert f"{f}:2:" in capsys.readouterr().err


# -- experiments ---------------------------------------------------------------

def test_experiment_inversion(tmp_path, capsys):
    assert main(["experiment", "inversion", "--pip", "off", "--out", str(tmp_path / "off")]) == 0
    assert "J1_blocking_ms 5" in capsys.readouterr().out
    assert main(["experiment", "inversion", "--pip", "on", "--out", str(tmp_path / "on")]) == 0
    assert "J1_blocking_ms 1" in capsys.readouterr().out
    assert (tmp_path / "on" / "schedule.csv").exists()


def test_experiment_script_and_determinism(tmp_path):
    script = write(tmp_path, "s.txt", "duration 2000\nseed 2\nat 1000 request_upgrade K2\n")
    for d in ("a", "b"):
        assert main(["experiment", "script", "--script", script, "--out", str(tmp_path / d)]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    summary = (tmp_path / "a" / "summary.txt").read_text()
    assert summary.startswith("status ok") and "upgrade_ok 1" in summary


def test_experiment_divergence_exit_code(tmp_path, capsys):
    # the stress task shares the control dispatcher and starves the loop for 1 s
    script = write(tmp_path, "s.txt", "duration 3000\nseed 1\nat 1000 start_stress\n")
    code = main(["experiment", "script", "--script", script, "--equal-priority", "--out", str(tmp_path / "o")])
    assert code == 4
    assert (tmp_path / "o" / "plant.csv").exists()
    assert "status diverged" in (tmp_path / "o" / "summary.txt").read_text()


def test_experiment_bad_script(tmp_path, capsys):
    script = write(tmp_path, "s.txt", "at 10 nonsense\n")
    assert main(["experiment", "script", "--script", script, "--out", str(tmp_path / "o")]) == 2
    assert ":1:" in capsys.readouterr().err


def test_lta_outage_command(tmp_path, capsys):
    assert main(["experiment", "lta-outage", "--depth", "4", "--outage-steps", "3", "--out", str(tmp_path)]) == 0
    assert "equal_to_baseline 1" in capsys.readouterr().out
    assert (tmp_path / "baseline" / "plant.csv").exists()


# -- node run / admin ----------------------------------------------------------------

def test_sim_time_rejected_for_networked_nodes(tmp_path, capsys):
    f = write(tmp_path, "n.conf", "node_id = a\nlisten = 127.0.0.1:0\n")
    assert main(["node", "run", "--config", f, "--time", "sim"]) == 2
    assert "sim" in capsys.readouterr().err


def test_node_config_error_exit(tmp_path, capsys):
    f = write(tmp_path, "n.conf", "node_id = a\nlisten = 127.0.0.1:0\nwhat = 1\n")
    assert main(["node", "run", "--config", f]) == 2
    assert "n.conf:3:" in capsys.readouterr().err


def test_port_in_use(tmp_path, capsys):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    port = s.getsockname()[1]
    try:
        f = write(tmp_path, "n.conf", f"node_id = a\nlisten = 127.0.0.1:{port}\n")
        assert main(["node", "run", "--config", f]) == 3
        assert "cannot listen" in capsys.readouterr().err
    finally:
        s.close()


@pytest.fixture
def node_pair():
    a = NetNode(parse_node_config(
        'node_id = nodeA\nlisten = 127.0.0.1:0\ncomponent.pendulum-controller = pendulum-controller {"gain": "K1"}\n'
    ))
    a.start()
    b_cfg = NodeConfig(node_id="nodeB", listen=("127.0.0.1", 0))
    b_cfg.peers = {"nodeA": a.address}
    b = NetNode(b_cfg)
    b.start()
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and not ("nodeB" in a.kernel.peers and "nodeA" in b.kernel.peers):
        time.sleep(0.02)
    yield a, b
    b.stop()
    a.stop()


def endpoint(node):
    host, port = node.address
    return f"{host}:{port}"


def test_admin_upgrade_and_not_found(node_pair, capsys):
    a, _ = node_pair
    assert main(["admin", "upgrade", "pendulum-controller", "--gain", "K2", "--node", endpoint(a)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and report["action"] == "upgrade"
    assert a.kernel.shell_for("pendulum-controller").config["gain"] == "K2"
    assert main(["admin", "upgrade", "nope", "--node", endpoint(a)]) == 5
    assert main(["admin", "deploy", "x", "--kind", "missing", "--node", endpoint(a)]) == 5


def test_admin_deploy_and_migrate(node_pair, capsys):
    a, b = node_pair
    assert main(["admin", "deploy", "echo1", "--kind", "echo", "--node", endpoint(a)]) == 0
    capsys.readouterr()
    assert main(["admin", "migrate", "pendulum-controller", "--dest", "nodeB", "--node", endpoint(a)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and report["dest"] == "nodeB"
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and "pendulum-controller" not in b.kernel.registry.local_profiles():
        time.sleep(0.02)
    assert "pendulum-controller" in b.kernel.registry.local_profiles()
    assert "pendulum-controller" not in a.kernel.registry.local_profiles()


def test_admin_unreachable_node(capsys):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert main(["admin", "upgrade", "x", "--node", f"127.0.0.1:{port}", "--timeout", "2"]) == 3
    assert "cannot reach" in capsys.readouterr().err


def test_admin_request_echo_component(node_pair):
    a, _ = node_pair
    rep = admin_request(a.address, "Deploy", {"profile": "e", "kind": "echo", "config": {}}, timeout_s=5)
    assert rep["ok"] and rep["address"].startswith("nodeA#")
