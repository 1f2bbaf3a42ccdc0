import json
import signal
import socket
import subprocess
import sys
import time

import httpx
import pytest
from click.testing import CliRunner

from revbio.cli import EXIT_INSUFFICIENT_IMPOSTORS, EXIT_PORT_IN_USE, main
from revbio.service import PersistentStore
from revbio.simulate import CaptureDescriptor, SimWorldConfig

TINY_ARGS = [
    "--identities", "6", "--images", "3", "--instances", "3",
    "--dim", "64", "--sigma", "1.0", "--seed", "5",
]


@pytest.fixture()
def runner():
    return CliRunner()


def test_validation_failures_exit_2(runner):
    for args in [
        ["simulate", "--instances", "0", "--out", "x"],
        ["simulate", "--dim", "4", "--out", "x"],  # below the minimum dimension
        ["simulate", "--group-multipliers", "g1", "--out", "x"],
        ["simulate", "--group-multipliers", "g1=fast", "--out", "x"],
        ["matrix", "--corpus", "/nonexistent"],
        ["scenario", "--preset", "nothing-happens"],
        ["serve", "--port", "70000", "--store", "x"],
    ]:
        result = runner.invoke(main, args)
        assert result.exit_code == 2, (args, result.output)


def test_simulate_writes_corpus_and_is_deterministic(runner, tmp_path):
    out_a = tmp_path / "a"
    result = runner.invoke(main, ["simulate", *TINY_ARGS, "--out", str(out_a)])
    assert result.exit_code == 0, result.output
    assert "wrote 54 records" in result.output
    assert (out_a / "corpus.jsonl").exists()
    assert (out_a / "corpus.config.json").exists()

    config = SimWorldConfig(
        num_identities=6, images_per_identity=3, num_instances=3,
        dim=64, sigma=1.0, master_seed=5,
    )
    assert f"config digest {config.digest()}" in result.output

    out_b = tmp_path / "b"
    runner.invoke(main, ["simulate", *TINY_ARGS, "--out", str(out_b)])
    assert (out_a / "corpus.jsonl").read_bytes() == (out_b / "corpus.jsonl").read_bytes()


def test_omitted_seed_is_random_and_printed(runner, tmp_path):
    result = runner.invoke(
        main,
        ["simulate", "--identities", "2", "--images", "2", "--instances", "2",
         "--dim", "8", "--out", str(tmp_path / "w")],
    )
    assert result.exit_code == 0, result.output
    assert "pass --seed" in result.stderr
    seed = int(result.stderr.split("seed: ")[1].split()[0])
    assert 0 <= seed < 2**32


def test_calibrate_prints_solved_sigma(runner):
    result = runner.invoke(main, ["calibrate", "--seed", "42"])
    assert result.exit_code == 0, result.output
    assert result.output == "sigma: 1.562109375\n"


def test_matrix_json_and_determinism(runner, tmp_path):
    args = ["matrix", *TINY_ARGS, "--fmr", "0.1", "--out"]
    first, second = tmp_path / "m1.json", tmp_path / "m2.json"
    result = runner.invoke(main, [*args, str(first)])
    assert result.exit_code == 0, result.output
    assert "min diagonal threshold" in result.output
    assert "worst accept rate" in result.output
    runner.invoke(main, [*args, str(second)])
    assert first.read_bytes() == second.read_bytes()

    doc = json.loads(first.read_text())
    assert doc["instances"] == ["m0", "m1", "m2"]
    assert set(doc["diagonal"]) == {"m0", "m1", "m2"}
    assert len(doc["cells"]) == 3
    assert 0.0 <= doc["summary"]["worst_accept_rate"] <= 1.0


def test_matrix_reads_corpus_directory(runner, tmp_path):
    corpus_dir = tmp_path / "corpus"
    runner.invoke(main, ["simulate", *TINY_ARGS, "--out", str(corpus_dir)])
    result = runner.invoke(
        main, ["matrix", "--corpus", str(corpus_dir), "--fmr", "0.1", "--format", "csv"]
    )
    assert result.exit_code == 0, result.output
    assert result.output.startswith("i,j,metric,value\n")
    assert "m0,m1,max_cross_genuine," in result.output


def test_matrix_insufficient_impostors_exits_3(runner):
    result = runner.invoke(main, ["matrix", *TINY_ARGS, "--fmr", "1e-6"])
    assert result.exit_code == EXIT_INSUFFICIENT_IMPOSTORS
    assert "error:" in result.stderr


def test_report_with_groups(runner, tmp_path):
    out = tmp_path / "report.csv"
    result = runner.invoke(
        main,
        ["report", *TINY_ARGS, "--group-multipliers", "g1=1.0,g2=1.3",
         "--folds", "3", "--format", "csv", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert "accuracy" in result.output and "+/-" in result.output
    csv_text = out.read_text()
    assert csv_text.startswith("instance,metric,value\n")
    assert "m0,d_prime[g1]," in csv_text
    assert "ALL,d_prime_mean[g2]," in csv_text


@pytest.mark.filterwarnings("ignore::revbio.metrics.CalibrationWarning")
def test_scenario_frozen_counts(runner, tmp_path):
    out = tmp_path / "scenario.json"
    result = runner.invoke(
        main,
        ["scenario", "--preset", "steal-revoke-replay", "--identities", "10",
         "--instances", "3", "--dim", "128", "--sigma", "0.5",
         "--fmr", "1e-2", "--seed", "3", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert "attacker accepts 0/10" in result.output
    assert "legitimate after 10/10" in result.output
    assert "non-interference ok" in result.output
    doc = json.loads(out.read_text())
    assert doc["attacker_accepts"] == 0
    assert doc["attacker_replays"] == 10
    assert doc["non_interference_ok"] is True


def seeded_store(path) -> None:
    config = SimWorldConfig(
        num_identities=6, images_per_identity=3, num_instances=2,
        dim=64, sigma=0.5, master_seed=11,
    )
    store = PersistentStore(path, config=config, fmr_target=0.1)
    store.enroll("alice", capture=CaptureDescriptor(0, 0))
    store.close(take_snapshot=False)


def test_store_snapshot_and_inspect(runner, tmp_path):
    store_dir = tmp_path / "store"
    seeded_store(store_dir)

    result = runner.invoke(main, ["store", "snapshot", "--store", str(store_dir)])
    assert result.exit_code == 0, result.output
    assert result.output == "snapshot generation 1\n"
    assert (store_dir / "snapshot.1.rbts").exists()

    result = runner.invoke(main, ["store", "inspect", "--store", str(store_dir)])
    assert result.exit_code == 0, result.output
    view = json.loads(result.output)
    assert view["generation"] == 1
    assert view["dimension"] == 64
    assert view["identities"]["alice"] == {"instance": "m0", "revocation_count": 0}
    assert {rec["id"] for rec in view["instances"]} == {"m0", "m1"}
    assert "vector" not in result.output  # inspection stays template-free


def test_store_commands_demand_a_store_directory(runner, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    for sub in ["snapshot", "inspect"]:
        result = runner.invoke(main, ["store", sub, "--store", str(empty)])
        assert result.exit_code == 2
        assert "no world.json" in result.output


# ---------------------------------------------------------------------------
# serve (real subprocess: uvicorn owns signal handling and the socket)

SERVE_ARGS = [
    "--identities", "6", "--images", "3", "--instances", "2",
    "--dim", "64", "--sigma", "0.5", "--seed", "11", "--fmr", "0.1",
]


def launch_serve(store_dir, extra=(), token="letmein"):
    return subprocess.Popen(
        [sys.executable, "-m", "revbio.cli", "serve", "--store", str(store_dir),
         "--port", "0", *SERVE_ARGS, *extra],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
        env={"PATH": "/usr/bin:/bin", "RBT_ADMIN_TOKEN": token},
    )


def wait_for_port(proc) -> int:
    line = proc.stdout.readline()
    assert line.startswith("listening on http://127.0.0.1:"), line
    port = int(line.rsplit(":", 1)[1])
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        try:
            httpx.get(f"http://127.0.0.1:{port}/api/v1/system/status", timeout=1.0)
            return port
        except httpx.TransportError:
            if proc.poll() is not None:
                raise AssertionError(f"server died: {proc.stderr.read()}")
            time.sleep(0.05)
    raise AssertionError("server never came up")


def test_serve_end_to_end(tmp_path):
    store_dir = tmp_path / "store"
    proc = launch_serve(store_dir)
    try:
        port = wait_for_port(proc)
        base = f"http://127.0.0.1:{port}/api/v1"

        status = httpx.get(f"{base}/system/status").json()
        assert status["instances_registered"] == 2

        r = httpx.post(
            f"{base}/identities/alice/enroll",
            json={"capture": {"identity_index": 0, "image_index": 0}},
        )
        assert r.status_code == 201 and r.json()["instance"] == "m0"

        r = httpx.post(
            f"{base}/identities/alice/verify",
            json={"capture": {"identity_index": 0, "image_index": 1}},
        )
        assert r.status_code == 200 and r.json()["accepted"] is True

        r = httpx.post(f"{base}/admin/snapshot")
        assert r.status_code == 401  # no token

        r = httpx.post(
            f"{base}/admin/snapshot",
            headers={"Authorization": "Bearer letmein"},
        )
        assert r.status_code == 200 and r.json() == {"generation": 1}
        assert (store_dir / "snapshot.1.rbts").exists()
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=15)
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

    # SIGINT shut the server down cleanly: one more snapshot generation
    assert proc.returncode == 0
    assert (store_dir / "snapshot.2.rbts").exists()
    assert not (store_dir / "snapshot.1.rbts").exists()

    # the state survives for offline inspection
    runner = CliRunner()
    result = runner.invoke(main, ["store", "inspect", "--store", str(store_dir)])
    assert result.exit_code == 0
    assert json.loads(result.output)["identities"]["alice"]["instance"] == "m0"


def test_serve_occupied_port_exits_4(tmp_path):
    blocker = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        proc = subprocess.Popen(
            [sys.executable, "-m", "revbio.cli", "serve",
             "--store", str(tmp_path / "store"), "--port", str(port), *SERVE_ARGS],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
            env={"PATH": "/usr/bin:/bin"},
        )
        _, stderr = proc.communicate(timeout=30)
    finally:
        blocker.close()
    assert proc.returncode == EXIT_PORT_IN_USE
    assert "already in use" in stderr
