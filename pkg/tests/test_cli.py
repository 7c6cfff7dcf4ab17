"""Command-line interface: generation, training, distributed parties and sweeps."""

import json
import socket
import threading
import time

import pytest

from fedtse import cli

SMALL = {"horizon": 150, "penetration": [0.5], "seed": 2}
TRAIN = {"max_rounds": 6, "eval_every": 2, "batch_size": 16, "host_hidden": [4], "top_hidden": [6], "guest_hidden": [6], "guest_out": 3, "lr": 1e-4}
PI_TRAIN = {**TRAIN, "batch_size": 10, "max_rounds": 2, "eval_every": 1, "host_embed": 0, "top_hidden": [2], "guest_hidden": [4], "guest_out": 2}


def write_config(path, **sections):
    cfg = {"scenario": SMALL, "train": TRAIN}
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return str(path)


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def wait_listening(port: int, timeout: float = 10.0) -> None:
    """Block until something listens on ``port``; probing by bind keeps the guest's single accept free."""
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        s = socket.socket()
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return
        finally:
            s.close()
        time.sleep(0.02)
    raise TimeoutError(f"nothing listening on {port}")


class TestGenerate:
    def test_writes_dataset_and_manifest(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        meta = json.loads((tmp_path / "d" / "manifest.json").read_text())
        lines = (tmp_path / "d" / "dataset.jsonl").read_text().splitlines()
        assert meta["rows"] == len(lines) > 0
        assert len(meta["config_hash"]) == 64

    def test_idempotent(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        for d in ("a", "b"):
            assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        for name in ("manifest.json", "dataset.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_flags_override_config(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        cli.main(["generate", "--config", cfg, "--seed", "9", "--penetration", "0.2", "0.4", "--out", str(tmp_path / "d")])
        meta = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert meta["scenario"]["seed"] == 9 and meta["scenario"]["penetration"] == [0.2, 0.4]

    def test_missing_network(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", scenario={**SMALL, "network": str(tmp_path / "none.json")})
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "not found" in capsys.readouterr().err

    @pytest.mark.parametrize("text", ["{", "[1]", '{"bogus": {}}', '{"scenario": {"horizn": 3}}'])
    def test_bad_config(self, tmp_path, text):
        (tmp_path / "c.json").write_text(text)
        assert cli.main(["generate", "--config", str(tmp_path / "c.json")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["generate", "--config", str(tmp_path / "nope.json")]) == 2


class TestTrain:
    def test_fedtse_smoke(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--method", "fedtse", "--q", "1", "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        history = json.loads((out / "history.json").read_text())
        assert metrics["method"] == "fedtse" and metrics["q"] == 1
        assert [h["round"] for h in history] == [2, 4, 6]
        assert json.loads((out / "audit.json").read_text())["clean"]
        assert (out / "guest1_model.json").exists() and (out / "transcript.jsonl").read_text()

    def test_same_inputs_same_outputs(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        for d in ("a", "b"):
            cli.main(["train", "--config", cfg, "--method", "fedtse", "--out", str(tmp_path / d)])
        for name in ("metrics.json", "history.json", "host_model.json", "transcript.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_baseline(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", cfg, "--method", "tse_n", "--out", str(tmp_path / "r")]) == 0
        assert json.loads((tmp_path / "r" / "metrics.json").read_text())["method"] == "tse_n"

    def test_pi_ipe_transcript(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", train=PI_TRAIN)
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--method", "fedtse_pi", "--backend", "ipe", "--out", str(out)]) == 0
        types = {json.loads(line)["type"] for line in (out / "transcript.jsonl").read_text().splitlines()}
        assert "IpCiphertext" in types and "PlainMeasurement" not in types
        assert json.loads((out / "audit.json").read_text())["clean"]

    def test_from_generated_data(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d")])
        assert cli.main(["train", "--config", cfg, "--method", "fedtse", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r1")]) == 0
        assert cli.main(["train", "--config", cfg, "--method", "fedtse", "--out", str(tmp_path / "r2")]) == 0
        assert (tmp_path / "r1" / "metrics.json").read_text().replace("r1", "") == (tmp_path / "r2" / "metrics.json").read_text().replace("r2", "")

    def test_data_from_other_scenario(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d")])
        assert cli.main(["train", "--config", cfg, "--seed", "5", "--data", str(tmp_path / "d")]) == 2

    def test_missing_data_dir(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "nothing")]) == 2

    @pytest.mark.parametrize(
        "flags",
        [["--method", "unknown"], ["--backend", "rsa"], ["--transport", "tcp"], ["--method", "fedtse", "--backend", "ipe"], ["--q", "0"]],
    )
    def test_usage_errors(self, tmp_path, flags):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", cfg, *flags, "--out", str(tmp_path / "r")]) == 2

    def test_bad_flag(self):
        assert cli.main(["train", "--nope"]) == 2
        assert cli.main([]) == 2

    def test_help(self):
        assert cli.main(["--help"]) == 0


class TestDistributed:
    def run_guest(self, cfg, port, out, result):
        result.append(cli.main(["guest", "--config", cfg, "--method", "fedtse", "--party", "1", "--listen", f"127.0.0.1:{port}", "--out", str(out)]))

    def test_loopback_matches_inproc(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", cfg, "--method", "fedtse", "--out", str(tmp_path / "inproc")]) == 0
        port = free_port()
        th, result = self.start_guest_once(cfg, port, tmp_path / "g")
        assert cli.main(["host", "--config", cfg, "--method", "fedtse", "--guests", f"127.0.0.1:{port}", "--out", str(tmp_path / "tcp")]) == 0
        th.join(30)
        assert result == [0]
        a = json.loads((tmp_path / "inproc" / "metrics.json").read_text())
        b = json.loads((tmp_path / "tcp" / "metrics.json").read_text())
        assert a == b
        assert (tmp_path / "inproc" / "host_model.json").read_bytes() == (tmp_path / "tcp" / "host_model.json").read_bytes()
        assert (tmp_path / "inproc" / "guest1_model.json").read_bytes() == (tmp_path / "g" / "guest1_model.json").read_bytes()

    def start_guest_once(self, cfg, port, out):
        result = []
        th = threading.Thread(target=self.run_guest, args=(cfg, port, out, result), daemon=True)
        th.start()
        wait_listening(port)
        return th, result

    def test_config_mismatch_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        port = free_port()
        th, result = self.start_guest_once(cfg, port, tmp_path / "g")
        code = cli.main(["host", "--config", cfg, "--method", "fedtse", "--seed", "7", "--guests", f"127.0.0.1:{port}", "--out", str(tmp_path / "h")])
        th.join(30)
        assert code == 1 and result == [1]
        assert "config hash" in capsys.readouterr().err

    def test_guest_disconnect(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        srv = socket.socket()
        srv.bind(("127.0.0.1", 0))
        srv.listen(1)
        port = srv.getsockname()[1]

        def drop():
            conn, _ = srv.accept()
            conn.recv(1 << 16)
            conn.close()

        th = threading.Thread(target=drop, daemon=True)
        th.start()
        code = cli.main(["host", "--config", cfg, "--method", "fedtse", "--guests", f"127.0.0.1:{port}", "--out", str(tmp_path / "h")])
        th.join(5)
        srv.close()
        assert code == 1
        assert "TransportError" in capsys.readouterr().err

    def test_guest_count_checked(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["host", "--config", cfg, "--method", "fedtse", "--guests", "127.0.0.1:1", "127.0.0.1:2"]) == 2

    def test_bad_address(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["host", "--config", cfg, "--method", "fedtse", "--guests", "localhost"]) == 2

    def test_baseline_is_not_federated(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["host", "--config", cfg, "--method", "oracle", "--guests", "127.0.0.1:1"]) == 2


class TestSweep:
    def grid(self, tmp_path, **kw):
        g = {"methods": ["tse_n", "fedtse"], "penetrations": [0.2, 0.4, 0.6, 0.8], "qs": [1, 2, 3], "seeds": [0], "scenario": {"horizon": 120}, "train": {**TRAIN, "max_rounds": 2, "eval_every": 1}}
        g.update(kw)
        path = tmp_path / "grid.json"
        path.write_text(json.dumps(g))
        return str(path)

    def test_full_grid_shape(self, tmp_path):
        out = tmp_path / "res.csv"
        assert cli.main(["sweep", "--grid", self.grid(tmp_path), "--out", str(out)]) == 0
        body = out.read_text().split("# aggregate over seeds")[0].strip().splitlines()
        assert len(body) == 1 + 2 * 4 * 3
        assert out.with_suffix(".json").exists()

    def test_resume(self, tmp_path):
        out = tmp_path / "res.csv"
        grid = self.grid(tmp_path, methods=["tse_n"], penetrations=[0.5], qs=[1])
        cli.main(["sweep", "--grid", grid, "--out", str(out)])
        first = out.read_bytes()
        assert cli.main(["sweep", "--grid", grid, "--out", str(out), "--resume"]) == 0
        assert out.read_bytes() == first

    @pytest.mark.parametrize("text", ['{"methods": []}', "{", '{"methods": ["x"], "penetrations": [0.2], "seeds": [0]}'])
    def test_malformed_grid(self, tmp_path, text):
        (tmp_path / "g.json").write_text(text)
        assert cli.main(["sweep", "--grid", str(tmp_path / "g.json")]) == 2
