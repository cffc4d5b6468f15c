"""Command-line workflows run in-process through ``main``."""

import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from binres import checkpoint
from binres.cli import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_OK, main
from binres.config import load_config, parse_config
from binres.data import load_frames, read_manifest
from binres.errors import ConfigError


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("BINRES_CACHE_DIR", str(root / "cache"))
        assert main(["synth", "--out", str(root / "corpus"), "--frames", "200"]) == EXIT_OK
        (root / "train.txt").write_text(
            "# desk config\nmanifest = corpus/manifest.txt\noutput_dir = run\n"
            "C = 8\nL = 2\nepochs = 5\ntrain_frames = 150\neval_frames = 50\n"
            "budget_bps = 45000\n")
        assert main(["train", "--config", str(root / "train.txt")]) == EXIT_OK
        yield root


def run(ws, *argv):
    return main([str(a) for a in argv])


class TestTrain:
    def test_outputs(self, ws):
        out = ws / "run"
        assert {p.name for p in out.iterdir()} >= {"model.brae", "loss.csv", "config.resolved.txt"}
        raw = (out / "model.brae").read_bytes()
        assert checkpoint.to_bytes(checkpoint.from_bytes(raw)) == raw

    def test_loss_decreases(self, ws):
        rows = list(csv.DictReader((ws / "run" / "loss.csv").open()))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4, 5]
        assert float(rows[4]["loss"]) < float(rows[0]["loss"])

    def test_snapshot_reproduces(self, ws, tmp_path):
        snap = (ws / "run" / "config.resolved.txt").read_text()
        cfg_path = tmp_path / "again.txt"
        cfg_path.write_text(snap.replace(f"output_dir = {ws / 'run'}", f"output_dir = {tmp_path / 'again'}"))
        assert run(ws, "train", "--config", cfg_path) == EXIT_OK
        assert (tmp_path / "again" / "loss.csv").read_bytes() == (ws / "run" / "loss.csv").read_bytes()
        assert (tmp_path / "again" / "model.brae").read_bytes() == (ws / "run" / "model.brae").read_bytes()

    def test_refuses_overwrite(self, ws):
        before = (ws / "run" / "model.brae").read_bytes()
        assert run(ws, "train", "--config", ws / "train.txt") == EXIT_CONFIG
        assert (ws / "run" / "model.brae").read_bytes() == before

    def test_cache_hit(self, ws):
        assert len(list((ws / "cache").glob("base-*.npy"))) == 1


@pytest.fixture(scope="module")
def encoded(ws):
    out = ws / "enc" / "clip.brsc"
    assert run(ws, "encode", "--config", ws / "train.txt", "--checkpoint", ws / "run" / "model.brae",
               "--out", out) == EXIT_OK
    return out


class TestEncodeDecode:
    def test_round_trip(self, ws, encoded, tmp_path):
        assert run(ws, "decode", encoded, "--checkpoint", ws / "run" / "model.brae", "--out", tmp_path / "dec",
                   "--reference", ws / "corpus" / "manifest.txt") == EXIT_OK
        m = read_manifest(tmp_path / "dec" / "manifest.txt")
        src = read_manifest(ws / "corpus" / "manifest.txt")
        assert len(m.frames) == len(src.frames) and m.dims == src.dims
        rows = list(csv.DictReader((tmp_path / "dec" / "scores.csv").open()))
        assert len(rows) == 200

    def test_report_matches_file_size(self, ws, encoded, tmp_path):
        size = encoded.stat().st_size
        enc_report = json.loads(encoded.with_name("clip.brsc.report.json").read_text())
        assert enc_report["total_bits"] == 8 * size
        assert enc_report["base_bits"] + enc_report["residual_bits"] + enc_report["header_bits"] == 8 * size
        assert run(ws, "decode", encoded, "--checkpoint", ws / "run" / "model.brae",
                   "--out", tmp_path / "d", "--format", "npy") == EXIT_OK
        dec_report = json.loads((tmp_path / "d" / "report.json").read_text())
        assert dec_report["file_bits"] == dec_report["total_bits"] == 8 * size

    def test_resolved_split_recorded(self, encoded):
        cfg = load_config(encoded.with_name("clip.brsc.config.txt"))
        assert cfg.split is not None and 0 < cfg.split < 1

    def test_wrong_checkpoint(self, ws, encoded, tmp_path, capsys):
        other = tmp_path / "other.txt"
        other.write_text((ws / "train.txt").read_text().replace("output_dir = run", "output_dir = other")
                         + "seed = 7\nepochs = 1\n")
        other_dir = tmp_path / "corpus"
        other_dir.symlink_to(ws / "corpus")
        assert run(ws, "train", "--config", other) == EXIT_OK
        rc = run(ws, "decode", encoded, "--checkpoint", tmp_path / "other" / "model.brae", "--out", tmp_path / "x")
        assert rc == EXIT_INTEGRITY
        assert "fingerprint" in capsys.readouterr().err

    def test_inspect(self, ws, encoded, capsys):
        assert run(ws, "inspect", encoded) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["type"] == "container" and info["frames"] == 200 and info["bytes"] == encoded.stat().st_size
        assert run(ws, "inspect", ws / "run" / "model.brae") == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["type"] == "checkpoint" and (info["L"], info["C"]) == (2, 8)
        assert run(ws, "inspect", ws / "train.txt") == EXIT_INTEGRITY

    def test_missing_checkpoint(self, ws, tmp_path):
        rc = run(ws, "encode", "--config", ws / "train.txt", "--checkpoint", tmp_path / "nope.brae",
                 "--out", tmp_path / "o.brsc")
        assert rc == EXIT_CONFIG


@pytest.fixture(scope="module")
def table(ws):
    ck = ws / "run" / "model.brae"
    cfg = ws / "bench.txt"
    cfg.write_text((ws / "train.txt").read_text().replace("output_dir = run", "output_dir = bench")
                   + f"rate_points = 30000, 45000\ncheckpoints = {ck}, {ck}\n")
    assert run(ws, "benchmark", "--config", cfg) == EXIT_OK
    return ws / "bench"


class TestBenchmark:
    def test_one_row_per_rate_point(self, table):
        rows = json.loads((table / "benchmark.json").read_text())
        assert [r["rate_point"] for r in rows] == [30000.0, 45000.0]
        for r in rows:
            assert r["baseline_bits_per_pixel"] > 0 and r["pipeline_total_mbps"] > 0

    def test_csv_matches_json(self, table):
        rows = json.loads((table / "benchmark.json").read_text())
        parsed = list(csv.DictReader(io.StringIO((table / "benchmark.csv").read_text())))
        assert len(parsed) == len(rows)
        for p, r in zip(parsed, rows):
            assert list(p) == list(r)
            for key, value in r.items():
                assert p[key] == (repr(value) if isinstance(value, float) else str(value))

    def test_pipeline_not_below_baseline(self, table):
        for r in json.loads((table / "benchmark.json").read_text()):
            assert r["pipeline_psnr_db"] >= r["baseline_psnr_db"]

    def test_missing_checkpoints_all_listed(self, ws, tmp_path, capsys):
        cfg = tmp_path / "b.txt"
        cfg.write_text(f"manifest = {ws / 'corpus' / 'manifest.txt'}\noutput_dir = {tmp_path}\n"
                       f"rate_points = 1e4, 2e4, 3e4\ncheckpoints = {ws / 'run' / 'model.brae'}, a.brae, b.brae\n")
        assert run(ws, "benchmark", "--config", cfg) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "a.brae" in err and "b.brae" in err
        assert not (tmp_path / "benchmark.csv").exists()

    def test_duplicate_rate_points(self, ws, tmp_path):
        cfg = tmp_path / "b.txt"
        cfg.write_text(f"manifest = {ws / 'corpus' / 'manifest.txt'}\noutput_dir = {tmp_path}\n"
                       "rate_points = 1e4, 1e4\ncheckpoints = a, b\n")
        assert run(ws, "benchmark", "--config", cfg) == EXIT_CONFIG


def test_compare_binarizers_rerun_identical(ws, tmp_path):
    base = (f"manifest = {ws / 'corpus' / 'manifest.txt'}\nepochs = 2\ntrain_frames = 40\neval_frames = 20\n")
    tables = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.txt"
        cfg.write_text(base + f"output_dir = {tmp_path / name}\n")
        assert run(ws, "compare-binarizers", "--config", cfg) == EXIT_OK
        tables.append((tmp_path / name / "binarizers.csv").read_bytes())
    rows = list(csv.DictReader(io.StringIO(tables[0].decode())))
    assert [r["binarizer"] for r in rows] == ["hardtanh", "tanh", "sigmoid", "stochastic", "gumbel"]
    assert tables[0] == tables[1]


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("manifest = m.txt\noutput_dir = o\n", Path("/base"))
        assert (cfg.L, cfg.C, cfg.epochs, cfg.batch_size, cfg.lr, cfg.k) == (2, 8, 50, 10, 1e-3, 16)
        assert cfg.manifest == Path("/base/m.txt") and cfg.split is None

    def test_dumps_round_trip(self):
        cfg = parse_config("manifest = /m.txt\noutput_dir = /o\nbinarizer = gumbel\nsplit = 0.75\n"
                           "rate_points = 1e5, 2e5\ncheckpoints = /a, /b\nquality = auto\nbase_bitrate = 1e5\n")
        assert parse_config(cfg.dumps()) == cfg

    def test_overrides(self):
        cfg = parse_config("C = 8\n", overrides={"C": "16", "binarizer": "tanh"})
        assert cfg.C == 16 and cfg.binarizer == "tanh"

    @pytest.mark.parametrize("text", ["bogus = 1\n", "C = eight\n", "no equals sign\n", "split = 1.5\n",
                                      "binarizer = sign\n", "quality = auto\n", "codec = external\n"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "missing.txt")]) == EXIT_CONFIG
        bad = tmp_path / "bad.txt"
        bad.write_text("bogus = 1\n")
        assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
        assert main(["train", "--config", str(bad), "--set", "nokey"]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err


def test_synth_matches_library(ws):
    from binres.data import synthetic_corpus

    frames = load_frames(read_manifest(ws / "corpus" / "manifest.txt"))
    expected = np.floor(np.clip(synthetic_corpus(200, size=32, seed=0), 0, 1) * 255 + 0.5) / 255
    np.testing.assert_array_equal(frames, expected)
