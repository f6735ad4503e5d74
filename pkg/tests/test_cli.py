import csv
import dataclasses
import io
import json
import subprocess
import sys

import pytest

from fsqkd import cli
from fsqkd.simulator import jena_night

PY = [sys.executable, "-m", "fsqkd.cli"]


def fsqkd(*args, **kw):
    return subprocess.run(PY + [str(a) for a in args], capture_output=True, text=True, timeout=300, **kw)


class TestLinkbudget:
    def test_anchor_rows(self):
        r = fsqkd("linkbudget", "--distance", 0, 1700, 10000, "--cn2", 1e-15)
        assert r.returncode == 0
        rows = list(csv.DictReader(io.StringIO(r.stdout)))
        assert list(rows[0]) == ["L_m", "cn2", "loss_db"]
        loss = {float(x["L_m"]): float(x["loss_db"]) for x in rows}
        assert loss[0.0] == 0.0 and loss[1700.0] <= 0.3 and 1.3 <= loss[10000.0] <= 2.9

    def test_extrapolation_json(self):
        r = fsqkd("linkbudget", "--distance", 10000, "--skr-base", 5600, "--loss", 2.1, "--format", "json")
        out = json.loads(r.stdout)
        assert out["skr_bps"] == pytest.approx(3452.9, abs=0.5)
        assert out["loss"][0]["cn2"] == 1e-15

    def test_precondition_message(self):
        r = fsqkd("linkbudget", "--cn2", 1e-9)
        assert r.returncode == cli.EXIT_USAGE
        assert "cn2 must lie in [1e-18, 1e-12]" in r.stderr


def test_exit_codes_documented():
    for code in (cli.EXIT_OK, cli.EXIT_ABORT, cli.EXIT_USAGE, cli.EXIT_CONN, cli.EXIT_STARVED):
        assert f"\n    {code}  " in cli.__doc__


def test_simulate_precedence(tmp_path):
    conf = tmp_path / "sim.ini"
    conf.write_text("[source]\npreset = jena-night\nduration = 0.3\nseed = 5\n")
    r = fsqkd("simulate", "--config", conf, "--seed", 9, "--out-dir", tmp_path)
    assert r.returncode == 0, r.stderr
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["params"]["duration"] == 0.3 and truth["params"]["seed"] == 9
    assert truth["params"]["clock_drift"] == 2.5e-9
    assert (tmp_path / "alice.ttag").read_bytes()[:5] == b"TTAG1"


def test_preset_is_the_benchmark(tmp_path):
    r = fsqkd("simulate", "--preset", "jena-night", "--duration", 0.2, "--out-dir", tmp_path)
    assert r.returncode == 0, r.stderr
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["params"] == dataclasses.asdict(jena_night(duration=0.2))


def test_simulate_validation(tmp_path):
    r = fsqkd("simulate", "--v-hv", 1.5, "--out-dir", tmp_path)
    assert r.returncode == cli.EXIT_USAGE and "v_hv must lie in [0, 1]" in r.stderr


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert fsqkd("simulate", "--preset", "jena-night", "--duration", 1.5, "--seed", 3, "--out-dir", d).returncode == 0
    (d / "psk.bin").write_bytes(bytes(range(256)) * 32)
    return d


def run_pair(d, *extra, alice_extra=(), bob_extra=()):
    alice = subprocess.Popen(PY + ["alice", "--listen", "127.0.0.1:0", "--tags", str(d / "alice.ttag"),
                                   "--psk", str(d / "psk.bin"), *map(str, extra), *map(str, alice_extra)],
                             stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = alice.stdout.readline()
    assert line.startswith("listening on"), alice.stderr.read()
    port = line.rsplit(":", 1)[1].strip()
    bob = fsqkd("bob", "--connect", f"127.0.0.1:{port}", "--tags", d / "bob.ttag", "--psk", d / "psk.bin",
                *extra, *bob_extra)
    out_a, err_a = alice.communicate(timeout=300)
    return (alice.returncode, out_a, err_a), (bob.returncode, bob.stdout, bob.stderr)


def test_two_processes_agree(sim_files, tmp_path):
    d = sim_files
    for f in ("psk.bin.ledger",):
        (d / f).unlink(missing_ok=True)
    (rc_a, out_a, _), (rc_b, out_b, err_b) = run_pair(
        d, alice_extra=["--stats", tmp_path / "a.csv", "--kms-snapshot", tmp_path / "ka.json"],
        bob_extra=["--kms-snapshot", tmp_path / "kb.json"])
    assert rc_a == rc_b == 0, err_b
    sa, sb = json.loads(out_a.splitlines()[-1]), json.loads(out_b.splitlines()[-1])
    assert sa["n_fin"] == sb["n_fin"] > 0 and sa["key_id"] == sb["key_id"]
    assert (tmp_path / "a.csv").read_text().startswith("# schema: fsqkd-stats/1\n")
    assert json.loads((tmp_path / "a.json").read_text())["schema"] == "fsqkd-stats/1"
    ka = fsqkd("kms-get", "--snapshot", tmp_path / "ka.json", "--length", 256)
    kb = fsqkd("kms-get", "--snapshot", tmp_path / "kb.json", "--length", 256)
    assert ka.returncode == kb.returncode == 0
    assert json.loads(ka.stdout) == json.loads(kb.stdout)
    big = fsqkd("kms-get", "--snapshot", tmp_path / "ka.json", "--length", 8 * 10**6)
    assert big.returncode == cli.EXIT_STARVED and "starvation" in big.stderr


def test_abort_after_sift(sim_files):
    (rc_a, out_a, err_a), (rc_b, _, err_b) = run_pair(sim_files, alice_extra=["--abort-after", "sift"])
    assert rc_a == rc_b == cli.EXIT_ABORT
    assert json.loads(out_a.splitlines()[-1])["stage"] == "aborted"
    assert "aborted after sifted" in err_a and "peer aborted" in err_b


def test_peer_absent(sim_files):
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    r = fsqkd("bob", "--connect", f"127.0.0.1:{port}", "--tags", sim_files / "bob.ttag",
              "--psk", sim_files / "psk.bin", "--timeout", 2)
    assert r.returncode == cli.EXIT_CONN and "cannot connect" in r.stderr


def test_endpoint_usage_errors(sim_files):
    r = fsqkd("alice", "--listen", "127.0.0.1:0", "--tags", sim_files / "alice.ttag")
    assert r.returncode == cli.EXIT_USAGE and "--psk" in r.stderr
    r = fsqkd("alice", "--tags", sim_files / "alice.ttag", "--psk", sim_files / "psk.bin")
    assert r.returncode == cli.EXIT_USAGE and "exactly one of --listen or --connect" in r.stderr
    r = fsqkd("bob", "--connect", "127.0.0.1:1", "--tags", sim_files / "missing.ttag", "--psk", sim_files / "psk.bin")
    assert r.returncode == cli.EXIT_USAGE and "cannot read tag file" in r.stderr
    r = fsqkd("bob", "--connect", "127.0.0.1:1", "--psk", sim_files / "psk.bin", "--qber-max", 0.7)
    assert r.returncode == cli.EXIT_USAGE and "qber_max must lie in [0, 0.5)" in r.stderr


def test_sync_subcommand(sim_files):
    r = fsqkd("sync", sim_files / "alice.ttag", sim_files / "bob.ttag")
    assert r.returncode == 0
    out = json.loads(r.stdout)
    assert out["coarse"]["offset_ps"] == pytest.approx(1.234567891e12, abs=1e4)
    assert out["coincidences"] > 15_000


def test_config_file_precedence_for_session(tmp_path):
    conf = tmp_path / "s.ini"
    conf.write_text("[session]\nqber_max = 0.05\nwindow = 800\n")
    args = cli.build_parser().parse_args(["alice", "--config", str(conf), "--window", "1200"])
    cfg = cli.session_config(args, cli.load_config(conf))
    assert cfg.qber_max == 0.05 and cfg.window == 1200 and cfg.n_mar == 100
