import json
import signal
import subprocess
import sys
import time

from tagrelay.cli import main
from tagrelay.cloud import CloudClient
from tagrelay.protocol import MasterSecret, TagStatus, derive_epoch_keypair, encode_advertisement
from tagrelay.relay import ObservationMsg, write_capture_log
from tagrelay.reports import LocationPayload, encrypt_report, key_id
from tagrelay.simnet.eventlog import read_csv

SECRET_HEX = "00" * 32


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def spawn(*argv):
    proc = subprocess.Popen(
        [sys.executable, "-m", "tagrelay.cli", *argv],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    if "listening on" not in line:
        proc.kill()
        raise AssertionError(f"server did not start: {line!r} {proc.stderr.read()}")
    host, port = line.split()[-1].rsplit(":", 1)
    return proc, host, int(port)


def stop(proc):
    proc.send_signal(signal.SIGINT)
    assert proc.wait(10) == 0


class TestSim:
    def test_relay_basic_owner_rows(self, capsys):
        code, out, _ = run_cli(capsys, "sim", "--preset", "relay-basic", "--until", "3600")
        assert code == 0
        owner = [r for r in read_csv(out) if r["event"] == "owner" and r["source"] == "cloud"]
        assert owner
        assert all(abs(float(r["lon"]) - float(owner[0]["lon"])) < 1e-9 for r in owner)

    def test_out_file_and_captures(self, capsys, tmp_path):
        out_csv = tmp_path / "run.csv"
        caps = tmp_path / "caps.jsonl"
        code, out, _ = run_cli(capsys, "sim", "--preset", "relay-basic", "--until", "60",
                               "--out", str(out_csv), "--captures", str(caps), "--all-events")
        assert code == 0 and out == ""
        assert "advertise" in out_csv.read_text()
        # the tag is still connected: one advertisement every 30 s
        assert caps.read_text().count("\n") == 3

    def test_scenario_file(self, capsys, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
            {"id": "f", "kind": "finder", "position": [5, 0]},
        ]}))
        code, out, _ = run_cli(capsys, "sim", "--scenario", str(path), "--until", "10")
        assert code == 0
        assert [r["time"] for r in read_csv(out)] == ["0", "2", "4", "6", "8", "10"]

    def test_missing_scenario_file(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "sim", "--scenario", str(tmp_path / "nope.json"), "--until", "10")
        assert code == 2 and "cannot read" in err

    def test_invalid_scenario_lines(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "entities": [\n    {"id": "a", "kind": "wizard", "position": [0, 0]}\n  ]\n}\n')
        code, _, err = run_cli(capsys, "sim", "--scenario", str(path), "--until", "10")
        assert code == 2 and "line 3: entities[0].kind" in err

    def test_bad_param(self, capsys):
        code, _, err = run_cli(capsys, "sim", "--preset", "relay-basic", "--param", "warp=9")
        assert code == 2 and "unknown parameters" in err

    def test_seed_param(self, capsys):
        _, a, _ = run_cli(capsys, "--seed", "5", "sim", "--preset", "alternation", "--until", "600")
        _, b, _ = run_cli(capsys, "sim", "--preset", "alternation", "--until", "600", "--param", "seed=5")
        assert a == b


class TestKeys:
    def test_range(self, capsys):
        code, out, _ = run_cli(capsys, "keys", "--secret", SECRET_HEX, "--epoch", "0..2")
        lines = out.splitlines()
        assert code == 0 and len(lines) == 3
        secret = MasterSecret(bytes(32))
        for epoch, line in enumerate(lines):
            public = derive_epoch_keypair(secret, epoch).public_key
            assert line == f"{epoch} {public.hex()} {key_id(public).hex()}"
        assert lines[0].split()[1] == "fb118f87476b7c8ee15755872b735d6f05db8249de783b3fa21fdc7acd28db2d"

    def test_at_time(self, capsys):
        _, out, _ = run_cli(capsys, "keys", "--secret", SECRET_HEX, "--at", "36h")
        assert out.startswith("1 ")

    def test_bad_secret(self, capsys):
        code, _, err = run_cli(capsys, "keys", "--secret", "abcd")
        assert code == 2 and "32 bytes" in err


class TestAdv:
    def test_round_trip(self, capsys):
        key = derive_epoch_keypair(MasterSecret(bytes(32)), 0).public_key
        code, out, _ = run_cli(capsys, "adv", "encode", "--key", key.hex(), "--lost")
        assert code == 0
        frame = out.strip()
        assert frame == encode_advertisement(key, TagStatus(lost=True)).hex()
        code, out, _ = run_cli(capsys, "adv", "decode", frame)
        assert out.splitlines() == [f"key {key.hex()}", "lost 1", "battery_low 0", f"key_id {key_id(key).hex()}"]

    def test_malformed(self, capsys):
        code, _, err = run_cli(capsys, "adv", "decode", "00" * 34)
        assert code == 2 and "malformed advertisement" in err
        code, _, _ = run_cli(capsys, "adv", "decode", "c0ff")
        assert code == 2


class TestServe:
    def test_cloud_round_trip(self, tmp_path):
        proc, host, port = spawn("serve", "cloud", "--port", "0", "--journal", str(tmp_path / "j.jsonl"))
        try:
            public = derive_epoch_keypair(MasterSecret(bytes(32)), 0).public_key
            report = encrypt_report(LocationPayload(1, 2, 3, 4), public)
            with CloudClient(host, port) as client:
                seq = client.upload(report, now=10)
                [record] = client.fetch([key_id(public)])
            assert record.report_seq == seq and record.report == report
        finally:
            stop(proc)
        assert (tmp_path / "j.jsonl").read_text().count("\n") == 1

    def test_double_bind(self):
        proc, host, port = spawn("serve", "cloud", "--port", "0")
        try:
            second = subprocess.run(
                [sys.executable, "-m", "tagrelay.cli", "serve", "cloud", "--port", str(port)],
                capture_output=True, text=True, timeout=20,
            )
            assert second.returncode == 1 and "cannot serve" in second.stderr
        finally:
            stop(proc)

    def test_relay_nodes(self, tmp_path):
        proc, host, port = spawn("serve", "relay", "--port", "0", "--clock", "virtual")
        relay = f"{host}:{port}"
        try:
            emitter = subprocess.Popen(
                [sys.executable, "-m", "tagrelay.cli", "node", "emitter", "--relay", relay,
                 "--id", "em", "--count", "3"],
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
            )
            assert emitter.stdout.readline().strip() == "emitter em ready"
            adv = encode_advertisement(derive_epoch_keypair(MasterSecret(bytes(32)), 0).public_key,
                                       TagStatus(lost=True)).to_bytes()
            caps = tmp_path / "caps.jsonl"
            write_capture_log([ObservationMsg("c", adv, -50, 100), ObservationMsg("c", adv, -52, 105),
                               ObservationMsg("c", bytes(34), -50, 106)], caps)
            col = subprocess.run(
                [sys.executable, "-m", "tagrelay.cli", "node", "collector", "--relay", relay,
                 "--capture", str(caps)], capture_output=True, text=True, timeout=20,
            )
            lines = col.stdout.splitlines()
            assert lines[:2] == ["beacon 1 seen 1 first_seen 100", "beacon 1 seen 2 first_seen 100"]
            assert lines[2].startswith("rejected")
            sched = subprocess.run(
                [sys.executable, "-m", "tagrelay.cli", "node", "schedule", "--relay", relay,
                 "--beacon", "1", "--emitter", "em", "--start-at", "100", "--interval", "2",
                 "--repeat", "3", "--advance", "200"], capture_output=True, text=True, timeout=20,
            )
            assert sched.returncode == 0, sched.stderr
            out, _ = emitter.communicate(timeout=20)
            assert emitter.returncode == 0
            assert out.splitlines() == [f"emit {t} beacon 1 {adv.hex()}" for t in (100, 102, 104)]
            bad = subprocess.run(
                [sys.executable, "-m", "tagrelay.cli", "node", "schedule", "--relay", relay,
                 "--beacon", "9", "--emitter", "em", "--start-at", "300", "--interval", "2"],
                capture_output=True, text=True, timeout=20,
            )
            assert bad.returncode == 2 and "unknown beacon" in bad.stderr
        finally:
            stop(proc)

    def test_unreachable_relay(self, capsys):
        code, _, err = run_cli(capsys, "node", "schedule", "--relay", "127.0.0.1:1", "--beacon", "1",
                               "--emitter", "e", "--start-at", "0", "--interval", "1")
        assert code == 1 and "error" in err


def test_sigterm_shuts_down_cleanly():
    proc, _host, _port = spawn("serve", "relay", "--port", "0")
    time.sleep(0.1)
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(10) == 0
