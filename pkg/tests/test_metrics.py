from __future__ import annotations

import json
import math

import numpy as np
import pytest

from groupchoreo.errors import NoBeats, SequenceTooShort, TooFewDancers, TooFewSamples
from groupchoreo.metrics import (
    MetricReport,
    _pairwise_mean_distance,
    beat_alignment_score,
    evaluate,
    frechet_distance,
    generation_diversity,
    gmc,
    gmc_from_velocity,
    gmr,
    mmc_beat_alignment,
    motion_change_curve,
    pfc,
    tif,
)
from groupchoreo.motion import GroupSequence, MotionSequence, Pose, axis_angle_to_matrix, matrix_to_rot6d
from groupchoreo.synth import generate_group_dance, generate_music_track

REST = Pose.identity((0.0, 0.975, 0.0)).flatten()


def static(T=60, root=(0.0, 0.975, 0.0)):
    return np.tile(Pose.identity(root).flatten(), (T, 1))


def root_path(x, z=None):
    """Rest pose whose root follows ``x`` (and ``z``) along the ground."""
    data = static(len(x))
    data[:, 0] = x
    if z is not None:
        data[:, 2] = z
    return data


def joint_wave(T, joint, period, amplitude=0.8, phase=0.0):
    data = static(T)
    t = np.arange(T)
    R = axis_angle_to_matrix(np.array([1.0, 0, 0]), amplitude * np.sin(2 * np.pi * t / period + phase))
    data[:, 3 + 6 * joint: 9 + 6 * joint] = matrix_to_rot6d(R)
    return data


class TestFrechet:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(50, 8))
        assert frechet_distance(x, x) < 1e-5

    def test_one_d_closed_forms(self):
        a = np.array([-1, 1]) / math.sqrt(2)  # mean 0, unbiased std 1
        assert abs(frechet_distance(a, a + 1) - 1) < 1e-6
        assert abs(frechet_distance(a, 3 * a) - 4) < 1e-6

    def test_constant_shift(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 5))
        shift = rng.normal(size=5)
        assert abs(frechet_distance(x, x + shift) - shift @ shift) < 1e-8

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(30, 4)), rng.normal(1, 2, size=(25, 4))
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))


class TestBeatAlignment:
    def test_beat_locked_motion(self):
        # speed |sin| vanishes every 15 frames, on the music grid
        t = np.arange(150)
        motion = MotionSequence(root_path(-0.3 * np.cos(np.pi * t / 15)))
        assert mmc_beat_alignment(motion, list(range(0, 150, 15))) == 1.0

    def test_sigma_offset(self):
        t = np.arange(80)
        motion = MotionSequence(root_path(0.001 * (t - 40.0) ** 2))
        assert abs(mmc_beat_alignment(motion, [43]) - math.exp(-0.5)) < 1e-6

    def test_constant_velocity(self):
        motion = MotionSequence(root_path(0.05 * np.arange(40)))
        assert mmc_beat_alignment(motion, [0, 15, 30]) == 0.0

    def test_errors(self):
        with pytest.raises(NoBeats):
            mmc_beat_alignment(MotionSequence(static(20)), [])
        with pytest.raises(SequenceTooShort):
            mmc_beat_alignment(MotionSequence(static(4)), [1])

    def test_monotone_in_offset(self):
        music = [10, 40, 70]
        scores = [beat_alignment_score([b + k for b in music], music) for k in range(15)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert all(0 <= s <= 1 for s in scores)


class TestDiversity:
    def test_identical(self):
        m = MotionSequence(joint_wave(40, 18, 20))
        assert generation_diversity([m, m, m]) == 0

    def test_single_pair_and_triangle(self):
        assert _pairwise_mean_distance(np.array([[0.0, 0], [3, 4]])) == 5
        tri = np.array([[0.0, 0], [1, 0], [0.5, math.sqrt(3) / 2]])
        assert abs(_pairwise_mean_distance(tri) - 1) < 1e-12

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            generation_diversity([MotionSequence(static(10))])


class TestPFC:
    def test_static(self):
        assert pfc(MotionSequence(static(30))) == 0

    def test_pinned_feet(self):
        # only the left elbow moves, the feet never do
        assert pfc(MotionSequence(joint_wave(60, 18, 20))) == 0

    def test_gliding(self):
        assert pfc(MotionSequence(root_path(0.02 * np.arange(40)))) < 1e-6

    def test_nonnegative_for_dance(self):
        g = generate_group_dance(generate_music_track(120, 3, 30, seed=0), 2, 0.5, seed=0)
        assert all(pfc(d) >= 0 for d in g.dancers)

    def test_too_short(self):
        with pytest.raises(SequenceTooShort):
            pfc(MotionSequence(static(2)))


class TestGMC:
    def test_clones(self):
        d = joint_wave(60, 18, 20)
        assert abs(gmc(GroupSequence(np.stack([d, d, d]))) - 100) < 1e-6

    def test_anti_phase(self):
        v = np.sin(np.linspace(0, 6, 100))
        assert abs(gmc_from_velocity([v, 3.0 - v]) + 100) < 1e-9

    def test_independent(self):
        rng = np.random.default_rng(0)
        assert abs(gmc_from_velocity(rng.normal(size=(3, 10_000)))) < 5

    def test_zero_variance(self):
        assert gmc_from_velocity([np.ones(10), np.arange(10.0)]) == 0

    def test_single_dancer(self):
        with pytest.raises(TooFewDancers):
            gmc(GroupSequence(static(10)[None]))


class TestTIF:
    def test_parallel(self):
        a = root_path(np.linspace(0, 3, 50))
        b = root_path(np.linspace(0, 3, 50), np.full(50, 2.0))
        assert tif(GroupSequence(np.stack([a, b]))) == 0

    def test_co_located(self):
        a = root_path(np.linspace(0, 3, 50))
        assert tif(GroupSequence(np.stack([a, a]))) == 1

    def test_crossing(self):
        t = np.linspace(-1, 1, 101)
        a = root_path(2 * t)  # along x
        b = root_path(np.zeros_like(t), 1.5 * t)  # along z
        expected = np.mean(np.hypot(2 * t, 1.5 * t) < 0.5)
        assert 0 < expected < 1
        assert tif(GroupSequence(np.stack([a, b]))) == expected

    def test_translation_invariant(self):
        rng = np.random.default_rng(3)
        data = np.stack([root_path(rng.normal(size=40), rng.normal(size=40)) for _ in range(3)])
        moved = data.copy()
        moved[..., [0, 2]] += [17.0, -4.0]
        assert tif(GroupSequence(data)) == tif(GroupSequence(moved))


class TestGMR:
    def _groups(self, seeds):
        audio = generate_music_track(120, 2, 30, seed=0)
        return [generate_group_dance(audio, 3, 0.5, seed=s) for s in seeds]

    def test_identical_sets(self):
        groups = self._groups(range(4))
        assert gmr(groups, groups) < 1e-5

    def test_different_sets_positive(self):
        assert gmr(self._groups(range(4)), self._groups(range(10, 14))) > 0

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            gmr(self._groups([0]), self._groups([1, 2]))


class TestMotionChange:
    def test_static(self):
        curve = motion_change_curve(GroupSequence(static(80)[None]), 30)
        assert curve.shape == (50,) and np.all(curve == 0)

    def test_periodic(self):
        period = 20
        curve = motion_change_curve(GroupSequence(joint_wave(200, 18, period, phase=0.3)[None]), 30)
        assert len(curve) == 170
        np.testing.assert_allclose(curve[:-period], curve[period:], atol=1e-9)
        assert curve.max() > 0

    def test_too_short(self):
        with pytest.raises(SequenceTooShort):
            motion_change_curve(GroupSequence(static(30)[None]), 30)


class TestEvaluate:
    def test_self_evaluation(self, tmp_path):
        audio = generate_music_track(120, 3, 30, seed=0)
        groups = [generate_group_dance(audio, 2, 0.8, seed=s) for s in range(3)]
        report = evaluate(groups, groups, beats=[audio.beat_frames] * 3)
        assert report.fid < 1e-5 and report.gmr < 1e-5
        assert 0 <= report.mmc <= 1 and -100 <= report.gmc <= 100 and 0 <= report.tif <= 1
        assert report.gendiv >= 0 and report.pfc >= 0 and len(report.motion_change) == 60
        report.write(tmp_path / "r.json", tmp_path / "c.csv")
        obj = json.loads((tmp_path / "r.json").read_text())
        assert set(obj) >= {"fid", "mmc", "gendiv", "pfc", "gmr", "gmc", "tif"}
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 61

    def test_without_audio_and_single_dancer(self):
        audio = generate_music_track(120, 2, 30, seed=0)
        groups = [generate_group_dance(audio, 1, 0.5, seed=s) for s in range(2)]
        report = evaluate(groups, groups)
        assert report.mmc is None and "mmc" in report.notes
        assert report.gmc is None and report.tif is None and "gmc" in report.notes
        assert "gmc" not in report.scores()

    def test_summary_line(self):
        assert MetricReport(fid=1.0, gmc=50.0).summary_line() == "fid=1.0000 | gmc=50.0000"
