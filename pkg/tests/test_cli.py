import json
import socket
import threading
import time

import numpy as np
import pytest

import bench
import cheetah_keygen
import infer
import make_net
import oracle
import serve
from cli_common import KEY_HEADER, UsageError, load_params, read_key
from nn_model import load_network
from phe import Owner, PheParams


@pytest.fixture
def params_file(tmp_path):
    path = tmp_path / "params.json"
    path.write_text(json.dumps({"n": 1024}))
    return path


@pytest.fixture
def tiny_dir(tmp_path):
    assert make_net.main(["--template", "tiny", "--seed", "3", "--out-dir", str(tmp_path / "tiny")]) == 0
    return tmp_path / "tiny"


@pytest.fixture
def tiny_input(tmp_path):
    path = tmp_path / "x.npy"
    np.save(path, np.round(np.random.default_rng(0).uniform(-1, 1, (1, 8, 8)) * 1024) / 1024)
    return path


class TestParams:
    def test_defaults(self):
        assert load_params("")["n"] == 4096

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"n": 1024, "depth": 3}))
        with pytest.raises(UsageError):
            load_params(str(path))

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"n": "big"}))
        with pytest.raises(UsageError):
            load_params(str(path))


class TestKeygen:
    def test_deterministic(self, tmp_path, params_file):
        a, b = tmp_path / "a.key", tmp_path / "b.key"
        for out in (a, b):
            assert cheetah_keygen.main(["--role", "client", "--seed", "5", "--out", str(out),
                                        "--params", str(params_file)]) == 0
        assert a.read_bytes() == b.read_bytes()
        key = read_key(a, PheParams.generate(n=1024))
        assert key.owner == Owner.CLIENT and key.coeffs.size == 1024
        assert len(a.read_bytes()) == KEY_HEADER.size + 1024 + 4

    def test_params_mismatch(self, tmp_path, params_file):
        out = tmp_path / "k.key"
        cheetah_keygen.main(["--role", "server", "--seed", "1", "--out", str(out), "--params", str(params_file)])
        with pytest.raises(UsageError):
            read_key(out, PheParams.generate(n=2048))

    def test_corrupt_key(self, tmp_path, params_file):
        out = tmp_path / "k.key"
        cheetah_keygen.main(["--role", "server", "--seed", "1", "--out", str(out), "--params", str(params_file)])
        raw = bytearray(out.read_bytes())
        raw[30] ^= 0x7F
        out.write_bytes(bytes(raw))
        with pytest.raises(UsageError, match="checksum"):
            read_key(out)

    def test_bad_params_exit_one(self, tmp_path):
        bad = tmp_path / "p.json"
        bad.write_text(json.dumps({"n": 1000}))
        assert cheetah_keygen.main(["--role", "client", "--out", str(tmp_path / "k"), "--params", str(bad)]) == 1

    def test_missing_role(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            cheetah_keygen.main(["--out", str(tmp_path / "k")])
        assert e.value.code == 1


class TestMakeNetAndOracle:
    def test_writes_full_and_public(self, tiny_dir):
        full = load_network(tiny_dir)
        public = load_network(tiny_dir / "public", require_weights=False)
        assert full.has_weights() and not public.has_weights()
        assert full.digest == public.digest

    def test_oracle_prints_scores(self, tiny_dir, tiny_input, capsys):
        assert oracle.main(["--net", str(tiny_dir), "--input", str(tiny_input)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 65 and lines[-1].startswith("label\t")

    def test_oracle_on_public_manifest(self, tiny_dir, tiny_input):
        assert oracle.main(["--net", str(tiny_dir / "public"), "--input", str(tiny_input)]) == 1

    def test_oracle_wrong_input_size(self, tiny_dir, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("1 2 3")
        assert oracle.main(["--net", str(tiny_dir), "--input", str(path)]) == 1


class TestInfer:
    def test_loopback_with_report(self, tiny_dir, tiny_input, params_file, tmp_path, capsys):
        report = tmp_path / "out" / "tiny.json"
        code = infer.main(["--loopback", str(tiny_dir), "--input", str(tiny_input), "--backend", "clear",
                           "--params", str(params_file), "--report", str(report), "--tolerance", "1e-2",
                           "--seed", "4"])
        assert code == 0
        out = capsys.readouterr().out
        assert "label\t" in out and "oracle label" in out
        doc = json.loads(report.read_text())
        assert doc["argmax_agree"] and doc["client_total"]["perm"] == 0

    def test_server_unreachable(self, tiny_dir, tiny_input, params_file):
        code = infer.main(["--net", str(tiny_dir / "public"), "--input", str(tiny_input), "--backend", "clear",
                           "--params", str(params_file), "--addr", "127.0.0.1:1", "--timeout", "2"])
        assert code == 2

    def test_needs_a_network(self, tiny_input):
        with pytest.raises(SystemExit) as e:
            infer.main(["--input", str(tiny_input)])
        assert e.value.code == 1

    def test_server_key_rejected(self, tiny_dir, tiny_input, params_file, tmp_path):
        key = tmp_path / "s.key"
        cheetah_keygen.main(["--role", "server", "--seed", "1", "--out", str(key), "--params", str(params_file)])
        code = infer.main(["--loopback", str(tiny_dir), "--input", str(tiny_input), "--backend", "clear",
                           "--params", str(params_file), "--key", str(key)])
        assert code == 1

    def test_backend_from_environment(self, tiny_dir, tiny_input, params_file, monkeypatch):
        monkeypatch.setenv("CHEETAH_BACKEND", "quantum")
        code = infer.main(["--loopback", str(tiny_dir), "--input", str(tiny_input), "--params", str(params_file)])
        assert code == 1


class TestBench:
    def test_template_passes(self, params_file, tmp_path, capsys):
        report = tmp_path / "bench.json"
        code = bench.main(["--net", "netB", "--trials", "2", "--backend", "clear", "--params", str(params_file),
                           "--report", str(report)])
        out = capsys.readouterr().out
        assert code == 0, out
        assert "all checks passed" in out
        doc = json.loads(report.read_text())
        assert doc["trials"] == 2 and doc["violations"] == []

    def test_single_ciphertext_framing(self, params_file, capsys):
        assert bench.main(["--net", "tiny", "--trials", "1", "--backend", "clear",
                           "--params", str(params_file)]) == 0

    def test_tolerance_failure(self, params_file, capsys):
        code = bench.main(["--net", "netA", "--trials", "1", "--backend", "clear", "--params", str(params_file),
                           "--tolerance", "0"])
        assert code == 3
        assert "[fail]" in capsys.readouterr().out

    def test_unknown_net(self, params_file):
        assert bench.main(["--net", "lenet", "--backend", "clear", "--params", str(params_file)]) == 1


def free_addr() -> str:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return "127.0.0.1:%d" % s.getsockname()[1]


class TestServe:
    def test_one_session_over_tcp(self, tiny_dir, tiny_input, params_file, capsys):
        addr = free_addr()
        common = ["--backend", "clear", "--params", str(params_file), "--timeout", "30"]
        t = threading.Thread(target=serve.main,
                             args=(["--net-dir", str(tiny_dir), "--addr", addr, "--max-sessions", "1"] + common,))
        t.start()
        try:
            for _ in range(50):
                code = infer.main(["--net", str(tiny_dir / "public"), "--input", str(tiny_input), "--addr", addr]
                                  + common)
                if code != 2:
                    break
                time.sleep(0.1)
        finally:
            t.join(30)
        assert code == 0
        assert not t.is_alive()
        assert "label\t" in capsys.readouterr().out

    def test_address_in_use(self, tiny_dir, params_file):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            s.listen()
            addr = "127.0.0.1:%d" % s.getsockname()[1]
            assert serve.main(["--net-dir", str(tiny_dir), "--addr", addr, "--backend", "clear",
                               "--params", str(params_file)]) == 2

    def test_public_manifest_rejected(self, tiny_dir, params_file):
        assert serve.main(["--net-dir", str(tiny_dir / "public"), "--backend", "clear",
                           "--params", str(params_file)]) == 1
