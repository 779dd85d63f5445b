from __future__ import annotations

import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from groupchoreo.cli import EXIT_IO, EXIT_MODEL, EXIT_OK, EXIT_USAGE, build_parser, main
from groupchoreo.motion import GroupSequence, Pose, load_motion, save_motion
from groupchoreo.synth import extract_music_beats, generate_music_track, load_audio, save_audio


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--n", "6", "--seed", "1", "--duration", "3"]) == EXIT_OK
    assert main(["train", "--data", str(root / "data" / "manifest.json"), "--out", str(root / "run"),
                 "--iterations", "0", "--crop-frames", "40"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def ckpt(workspace):
    return workspace / "run" / "checkpoint.gcdckpt"


def _generate(ckpt, out, *extra):
    return main(["generate", "--checkpoint", str(ckpt), "--out", str(out), "--ddim-steps", "4", *extra])


class TestHelp:
    def test_help_lists_every_flag_with_units(self):
        proc = subprocess.run([sys.executable, "-m", "groupchoreo.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        text = proc.stdout
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        for name, sp in sub.choices.items():
            assert f"--- {name} ---" in text
            for action in sp._actions:
                if action.dest == "help":
                    continue
                flag = action.option_strings[-1]
                assert flag in text
                # every help string carries its unit or kind in parentheses
                assert re.search(r"\([^()]+\)", action.help), action.help

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth-data", "--out", "x", "--bogus"])
        assert exc.value.code == EXIT_USAGE

    def test_type_checked_before_work(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth-data", "--out", str(tmp_path / "d"), "--n", "-3"])
        assert exc.value.code == EXIT_USAGE
        assert not (tmp_path / "d").exists()


class TestSynthData:
    def test_rerun_identical(self, workspace, tmp_path):
        assert main(["synth-data", "--out", str(tmp_path / "again"), "--n", "6", "--seed", "1", "--duration", "3"]) == 0
        first = sorted((workspace / "data").iterdir())
        second = sorted((tmp_path / "again").iterdir())
        assert [p.name for p in first] == [p.name for p in second]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))
        assert len(json.loads((workspace / "data" / "manifest.json").read_text())) == 6


class TestTrain:
    def test_zero_iterations_checkpoint(self, workspace, ckpt):
        assert ckpt.exists()
        assert (workspace / "run" / "loss_history.csv").read_text().splitlines() == [
            "iteration,l_simple,l_pos,l_vel,l_foot,l_nce,total"
        ]

    def test_config_env_and_override(self, workspace, tmp_path, monkeypatch, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("iterations = 2\nbatch_size = 2\nT = 30\nM = 10\ncheckpoint_every = 0\n")
        monkeypatch.setenv("GCD_CONFIG", str(cfg))
        code = main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path / "r"),
                     "--iterations", "1", "--lr-schedule", "cosine"])
        assert code == EXIT_OK
        assert len((tmp_path / "r" / "loss_history.csv").read_text().splitlines()) == 2

    def test_bad_config_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("wingspan = 3\n")
        assert main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path / "r"),
                     "--config", str(cfg)]) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path / "r")]) == EXIT_IO


class TestGenerate:
    def test_deterministic_bytes(self, ckpt, tmp_path):
        for d in ("a", "b"):
            assert _generate(ckpt, tmp_path / d, "--synthetic-bpm", "120", "--gamma", "0", "--seed", "7") == 0
        assert (tmp_path / "a" / "sample_000.gcdm").read_bytes() == (tmp_path / "b" / "sample_000.gcdm").read_bytes()

    def test_five_dancers_header(self, ckpt, tmp_path):
        assert _generate(ckpt, tmp_path, "--synthetic-bpm", "100", "--dancers", "5", "--duration", "1") == 0
        assert load_motion(tmp_path / "sample_000.gcdm").n_dancers == 5

    def test_sixty_seconds_long_form(self, ckpt, tmp_path):
        assert _generate(ckpt, tmp_path, "--synthetic-bpm", "110", "--dancers", "2", "--duration", "60",
                         "--ddim-steps", "2") == 0
        assert load_motion(tmp_path / "sample_000.gcdm").n_frames == 1800

    def test_music_file_and_samples(self, ckpt, tmp_path):
        track = save_audio(generate_music_track(120, 1, 30, seed=0), tmp_path / "track.json")
        assert _generate(ckpt, tmp_path / "o", "--music", str(track), "--samples", "2", "--gamma", "1",
                         "--dancers", "2", "--json") == 0
        assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["sample_000.json", "sample_001.json"]

    def test_missing_music_is_usage(self, ckpt, tmp_path):
        assert _generate(ckpt, tmp_path) == EXIT_USAGE

    def test_missing_checkpoint_is_io(self, tmp_path):
        assert _generate(tmp_path / "nope.gcdckpt", tmp_path, "--synthetic-bpm", "120") == EXIT_IO

    def test_unreadable_music_is_io(self, ckpt, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert _generate(ckpt, tmp_path / "o", "--music", str(bad)) == EXIT_IO

    def test_corrupt_checkpoint_is_model_error(self, ckpt, tmp_path):
        broken = tmp_path / "broken.gcdckpt"
        broken.write_bytes(ckpt.read_bytes()[:200])
        assert _generate(broken, tmp_path / "o", "--synthetic-bpm", "120") == EXIT_MODEL

    def test_too_many_dancers_is_model_error(self, ckpt, tmp_path):
        assert _generate(ckpt, tmp_path / "o", "--synthetic-bpm", "120", "--dancers", "50") == EXIT_MODEL


def _group_dir(path, groups):
    path.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(groups):
        save_motion(g, path / f"g{i}.gcdm")
    return path


class TestEvaluate:
    def test_self_evaluation(self, workspace, tmp_path, capsys):
        data = workspace / "data"
        code = main(["evaluate", "--generated", str(data), "--reference", str(data), "--audio", str(data),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["fid"] < 1e-5 and report["gmr"] < 1e-5 and "mmc" in report
        assert (tmp_path / "motion_change.csv").exists()
        assert "fid=" in capsys.readouterr().out

    def test_without_audio(self, workspace, tmp_path):
        data = workspace / "data"
        assert main(["evaluate", "--generated", str(data), "--reference", str(data), "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert "mmc" not in report and "mmc" in report["notes"]

    def test_single_dancer(self, tmp_path):
        rng = np.random.default_rng(0)
        groups = []
        for _ in range(3):
            data = np.tile(Pose.identity((0, 0.975, 0)).flatten(), (1, 40, 1))
            data[..., 0] = np.cumsum(rng.normal(0, 0.01, size=40))
            groups.append(GroupSequence(data))
        d = _group_dir(tmp_path / "g", groups)
        assert main(["evaluate", "--generated", str(d), "--reference", str(d), "--out", str(tmp_path / "o")]) == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["notes"]["gmc"] == "n_dancers < 2" and report["notes"]["tif"] == "n_dancers < 2"
        assert "gmc" not in report and "tif" not in report

    def test_unreadable_inputs(self, tmp_path):
        (tmp_path / "g").mkdir()
        (tmp_path / "g" / "x.gcdm").write_bytes(b"garbage")
        assert main(["evaluate", "--generated", str(tmp_path / "g"), "--reference", str(tmp_path / "g"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO
        assert main(["evaluate", "--generated", str(tmp_path / "none"), "--reference", str(tmp_path / "g"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO


class TestPlot:
    def test_curves_and_beats(self, workspace, tmp_path):
        data = workspace / "data"
        entry = next(e for e in json.loads((data / "manifest.json").read_text()) if e["n_dancers"] == 3)
        code = main(["plot", "--motion", str(data / entry["motion"]), "--audio", str(data / entry["audio"]),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "kinetic_velocity.csv")))
        assert sum(k.startswith("dancer_") for k in rows[0]) == 3
        beats = [int(r["beat_frame"]) for r in csv.DictReader(open(tmp_path / "beats.csv"))]
        assert beats == extract_music_beats(load_audio(data / entry["audio"]))
        assert [int(r["frame"]) for r in rows if r["is_beat"] == "1"] == beats
        assert (tmp_path / "kinetic_velocity.png").exists() and (tmp_path / "motion_change.png").exists()

    def test_static_motion_flat(self, tmp_path):
        save_motion(GroupSequence(np.tile(Pose.identity().flatten(), (2, 60, 1))), tmp_path / "s.gcdm")
        save_audio(generate_music_track(120, 2, 30), tmp_path / "a.json")
        assert main(["plot", "--motion", str(tmp_path / "s.gcdm"), "--audio", str(tmp_path / "a.json"),
                     "--out", str(tmp_path / "o"), "--no-images"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "o" / "kinetic_velocity.csv")))
        assert all(float(r["dancer_0"]) == 0 and float(r["dancer_1"]) == 0 for r in rows)
        curve = [float(r["motion_change"]) for r in csv.DictReader(open(tmp_path / "o" / "motion_change.csv"))]
        assert len(curve) == 30 and all(v == 0 for v in curve)
        assert not (tmp_path / "o" / "kinetic_velocity.png").exists()

    def test_missing_audio_is_io(self, tmp_path):
        save_motion(GroupSequence(np.tile(Pose.identity().flatten(), (2, 10, 1))), tmp_path / "s.gcdm")
        assert main(["plot", "--motion", str(tmp_path / "s.gcdm"), "--audio", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO
