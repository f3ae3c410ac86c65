"""Trainer tests: mixing math, schedule, windows, bootstrap, and the loop."""

import numpy as np
import pytest

import acdforge.graph as G
import acdforge.network as N
import acdforge.training as TR
from acdforge.errors import DivergenceError, SpecError


class StubRng:
    """Scripted stand-in for a numpy Generator (integers/uniform only)."""

    def __init__(self, ints=(), floats=()):
        self.ints = list(ints)
        self.floats = list(floats)

    def integers(self, lo, hi):
        v = self.ints.pop(0)
        assert lo <= v < hi, f"scripted draw {v} outside [{lo}, {hi})"
        return v

    def uniform(self, lo, hi):
        return self.floats.pop(0)


class TestMixMath:
    def test_equal_gain_half_ratio(self):
        assert TR.mix_ratio(0.0, 0.0, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_equal_gain_ratio_is_r(self):
        # with g1 == g2 the formula collapses to p = r
        for r in [0.1, 0.25, 0.5, 0.9]:
            assert TR.mix_ratio(-12.0, -12.0, r) == pytest.approx(r, abs=1e-12)

    def test_twenty_db_louder_first(self):
        # 10^(20/20) = 10, so p = 1 / (1 + 10) at r = 0.5
        p = TR.mix_ratio(0.0, -20.0, 0.5)
        assert p == pytest.approx(1.0 / 11.0, abs=1e-9)

    def test_swap_symmetry(self):
        # p(g1, g2, r) + p(g2, g1, 1-r) == 1
        for g1, g2, r in [(0.0, -6.0, 0.3), (-20.0, -3.0, 0.7),
                          (-80.0, 0.0, 0.01), (5.0, 5.0, 0.45)]:
            s = TR.mix_ratio(g1, g2, r) + TR.mix_ratio(g2, g1, 1.0 - r)
            assert s == pytest.approx(1.0, abs=1e-9)

    def test_monotone_in_r(self):
        rs = np.linspace(0.01, 0.99, 25)
        ps = [TR.mix_ratio(-3.0, -9.0, r) for r in rs]
        assert all(b > a for a, b in zip(ps, ps[1:]))

    def test_r_bounds_rejected(self):
        with pytest.raises(SpecError):
            TR.mix_ratio(0.0, 0.0, 0.0)
        with pytest.raises(SpecError):
            TR.mix_ratio(0.0, 0.0, 1.0)

    def test_gain_db_reference_points(self):
        assert TR.gain_db(np.full(8, 32768.0)) == pytest.approx(0.0, abs=1e-12)
        assert TR.gain_db(np.full(8, 3276.8)) == pytest.approx(-20.0, abs=1e-9)
        assert TR.gain_db(np.zeros(8)) == -80.0
        assert TR.gain_db(np.full(8, 1e-3)) == -80.0  # floored

    def test_self_mix_scales_by_sqrt2(self):
        s = np.sin(np.linspace(0, 20, 256)) * 9000
        out = TR.bc_mix(s, s, 0.5)
        assert np.allclose(out, s * np.sqrt(2.0), atol=1e-6)

    def test_orthogonal_mix_preserves_energy(self):
        rng = np.random.default_rng(3)
        s1 = rng.normal(size=512)
        s2 = rng.normal(size=512)
        s2 -= s1 * (s1 @ s2) / (s1 @ s1)   # make them orthogonal
        s2 *= np.linalg.norm(s1) / np.linalg.norm(s2)
        for p in [0.2, 0.5, 0.8]:
            out = TR.bc_mix(s1, s2, p)
            assert np.linalg.norm(out) == pytest.approx(
                np.linalg.norm(s1), rel=1e-9)

    def test_mix_length_mismatch(self):
        with pytest.raises(SpecError):
            TR.bc_mix(np.zeros(4), np.zeros(5), 0.5)


class TestWindowing:
    def test_random_window_exact_slice(self):
        clip = np.arange(1, 11, dtype=np.float32)   # len 10
        # length 6, half 3: padded is [0,0,0, 1..10, 0,0,0], start range [0,10]
        rng = StubRng(ints=[0])
        w = TR.random_window(clip, 6, rng)
        assert np.array_equal(w, [0, 0, 0, 1, 2, 3])
        rng = StubRng(ints=[10])
        w = TR.random_window(clip, 6, rng)
        assert np.array_equal(w, [8, 9, 10, 0, 0, 0])

    def test_random_window_short_clip(self):
        # clip shorter than window still fits thanks to the padding
        clip = np.ones(3, dtype=np.float32)
        rng = StubRng(ints=[0])
        w = TR.random_window(clip, 4, rng)
        assert w.shape == (4,)

    def test_training_example_label_follows_ratio(self):
        clip = np.full(20, 8192.0, dtype=np.float32)
        # centered crops (start == half == 10), scripted r = 0.3; equal
        # gains collapse the ratio to r itself
        rng = StubRng(ints=[10, 10], floats=[0.3])
        x, y = TR.make_training_example(clip, 0, clip, 1, 4, 20, rng)
        assert y == pytest.approx([0.3, 0.7, 0.0, 0.0], abs=1e-6)
        assert y.sum() == pytest.approx(1.0, abs=1e-6)
        want = TR.bc_mix(clip, clip, 0.3) / 32768.0
        assert np.allclose(x, want, atol=1e-6)

    def test_training_example_same_class_sums(self):
        clip = np.full(20, 1000.0, dtype=np.float32)
        rng = StubRng(ints=[10, 10], floats=[0.4])
        _, y = TR.make_training_example(clip, 2, clip, 2, 4, 20, rng)
        assert y[2] == pytest.approx(1.0, abs=1e-6)

    def test_sample_batch_pairs_differ(self):
        rng = np.random.default_rng(0)
        clips = [np.full(50, 4000.0, dtype=np.float32) for _ in range(6)]
        labels = [0, 0, 0, 1, 1, 1]
        xs, ys = TR.sample_batch(clips, labels, 2, 30, 16, rng)
        assert xs.shape == (16, 30) and ys.shape == (16, 2)
        # every row mixes both classes: both entries strictly inside (0, 1)
        assert np.all(ys > 0.0) and np.all(ys < 1.0)
        assert np.allclose(ys.sum(axis=1), 1.0, atol=1e-6)

    def test_sample_batch_single_class_rejected(self):
        rng = np.random.default_rng(0)
        clips = [np.ones(50, dtype=np.float32)] * 3
        with pytest.raises(SpecError):
            TR.sample_batch(clips, [1, 1, 1], 2, 30, 4, rng)


class TestSchedule:
    def test_default_schedule_table(self):
        cfg = TR.TrainConfig()
        expect = [(1, 0.01), (5, 0.01), (10, 0.01), (11, 0.1),
                  (600, 0.1), (601, 0.01), (1200, 0.01),
                  (1201, 0.001), (1800, 0.001), (1801, 1e-4)]
        for epoch, lr in expect:
            assert TR.learning_rate(cfg, epoch) == pytest.approx(lr, rel=1e-12)

    def test_no_warmup_no_schedule(self):
        cfg = TR.TrainConfig(lr0=0.05, schedule=(), warmup_epochs=0)
        for epoch in [1, 10, 100]:
            assert TR.learning_rate(cfg, epoch) == 0.05


class TestEvalWindows:
    def test_frozen_starts_exact_length(self):
        # clip length == window length 2000: padded 4000, span 2000
        wins, starts = TR.eval_windows(np.ones(2000), 2000)
        assert starts == [0, 222, 444, 667, 889, 1111, 1333, 1556, 1778, 2000]
        assert wins.shape == (10, 2000)

    def test_starts_match_round_formula(self):
        for clip_len, length in [(2000, 2000), (3000, 2000), (2500, 1000),
                                 (999, 1000)]:
            _, starts = TR.eval_windows(np.ones(clip_len), length)
            half = length // 2
            span = clip_len + 2 * half - length
            want = [int(round(i * span / 9.0)) for i in range(10)]
            assert starts == want
            assert starts[0] == 0 and starts[-1] == span

    def test_edge_windows_carry_padding(self):
        wins, _ = TR.eval_windows(np.ones(2000), 2000)
        assert np.all(wins[0][:1000] == 0) and np.all(wins[0][1000:] == 1)
        assert np.all(wins[9][1000:] == 0) and np.all(wins[9][:1000] == 1)


class TestBootstrap:
    def test_degenerate_all_equal(self):
        mu, lo, hi = TR.bootstrap_ci([1.0] * 50, seed=0)
        assert (mu, lo, hi) == (1.0, 1.0, 1.0)
        mu, lo, hi = TR.bootstrap_ci([0.25] * 7, seed=1)
        assert (mu, lo, hi) == (0.25, 0.25, 0.25)

    def test_single_value(self):
        mu, lo, hi = TR.bootstrap_ci([0.7], seed=0)
        assert mu == lo == hi == 0.7

    def test_mixed_values_bracket_mean(self):
        vals = [0.0] * 500 + [1.0] * 500
        mu, lo, hi = TR.bootstrap_ci(vals, seed=2)
        assert lo < mu < hi
        assert mu == pytest.approx(0.5, abs=0.05)
        # half-width ~= 1.96 * (0.5/sqrt(1000)) / sqrt(1000)
        assert (hi - lo) / 2 < 0.005

    def test_deterministic_per_seed(self):
        vals = list(np.linspace(0, 1, 33))
        assert TR.bootstrap_ci(vals, seed=5) == TR.bootstrap_ci(vals, seed=5)

    def test_empty_rejected(self):
        with pytest.raises(SpecError):
            TR.bootstrap_ci([])


def synth_clips(n_per_class, n_cls, length, seed):
    """Separable toy audio: per-class sine frequency, 16-bit scale."""
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    t = np.arange(length, dtype=np.float64)
    for cls in range(n_cls):
        freq = 0.02 * (cls + 1)
        for _ in range(n_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * t + phase) * 12000
            wave += rng.normal(0, 300, size=length)
            clips.append(wave.astype(np.float32))
            labels.append(cls)
    return clips, labels


@pytest.fixture(scope="module")
def toy_spec():
    return G.build_acdnet(2000, 2000, 4, 2)


class TestTrainLoop:
    def test_loss_decreases_and_curve_logged(self, toy_spec):
        clips, labels = synth_clips(8, 4, 2000, seed=0)
        params = N.init_params(toy_spec, seed=1)
        cfg = TR.TrainConfig(epochs=6, lr0=0.02, schedule=(),
                             warmup_epochs=0, batch_size=8, seed=3)
        rows = []
        res = TR.train(toy_spec, params, clips, labels, cfg,
                       log=lambda *a: rows.append(a))
        assert len(res.curve) == 6 and len(rows) == 6
        assert not res.diverged
        losses = [r[2] for r in res.curve]
        assert np.mean(losses[-2:]) < np.mean(losses[:2])
        assert all(r[1] == 0.02 for r in res.curve)

    def test_validation_tracks_best(self, toy_spec):
        clips, labels = synth_clips(6, 4, 2000, seed=4)
        val_clips, val_labels = synth_clips(2, 4, 2000, seed=5)
        params = N.init_params(toy_spec, seed=2)
        cfg = TR.TrainConfig(epochs=3, lr0=0.02, schedule=(),
                             warmup_epochs=0, batch_size=8, seed=6)
        res = TR.train(toy_spec, params, clips, labels, cfg,
                       val_clips=val_clips, val_labels=val_labels)
        accs = [r[3] for r in res.curve]
        assert res.best_val == max(accs)
        # returned params reproduce the recorded best accuracy
        report = TR.ten_crop_eval(toy_spec, res.params, val_clips, val_labels)
        assert report.accuracy == pytest.approx(res.best_val, abs=1e-9)

    def test_mask_pins_zeros(self, toy_spec):
        clips, labels = synth_clips(4, 4, 2000, seed=7)
        params = N.init_params(toy_spec, seed=3)
        mask = {"conv1.w": (np.arange(params["conv1.w"].size)
                            .reshape(params["conv1.w"].shape) % 2 == 0)}
        params["conv1.w"] *= mask["conv1.w"]
        cfg = TR.TrainConfig(epochs=2, lr0=0.01, schedule=(),
                             warmup_epochs=0, batch_size=8, seed=8)
        TR.train(toy_spec, params, clips, labels, cfg, mask=mask)
        assert np.all(params["conv1.w"][~mask["conv1.w"]] == 0.0)
        assert np.any(params["conv1.w"][mask["conv1.w"]] != 0.0)

    def test_divergence_restores_last_finite(self, toy_spec):
        clips, labels = synth_clips(4, 4, 2000, seed=9)
        params = N.init_params(toy_spec, seed=4)
        cfg = TR.TrainConfig(epochs=4, lr0=0.01, schedule=(),
                             warmup_epochs=0, batch_size=8, seed=10)

        def poison(epoch, lr, loss, val):
            if epoch == 1:
                params["conv1.w"][:] = np.nan

        res = TR.train(toy_spec, params, clips, labels, cfg, log=poison)
        assert res.diverged
        assert len(res.curve) == 1
        assert np.all(np.isfinite(params["conv1.w"]))
        assert np.abs(params["conv1.w"]).max() < 1e6

    def test_divergence_without_progress_raises(self, toy_spec):
        clips, labels = synth_clips(4, 4, 2000, seed=11)
        params = N.init_params(toy_spec, seed=5)
        params["conv1.w"][:] = np.nan
        cfg = TR.TrainConfig(epochs=2, lr0=0.01, schedule=(),
                             warmup_epochs=0, batch_size=8, seed=12)
        with pytest.raises(DivergenceError):
            TR.train(toy_spec, params, clips, labels, cfg)


class TestTenCrop:
    def test_report_consistency(self, toy_spec):
        clips, labels = synth_clips(3, 4, 2000, seed=13)
        params = N.init_params(toy_spec, seed=6)
        rep = TR.ten_crop_eval(toy_spec, params, clips, labels)
        assert rep.n_clips == 12 and len(rep.per_clip) == 12
        assert rep.accuracy == pytest.approx(np.mean(rep.per_clip), abs=1e-12)
        again = TR.ten_crop_eval(toy_spec, params, clips, labels)
        assert rep.accuracy == again.accuracy and rep.per_clip == again.per_clip

    def test_variable_length_clips(self, toy_spec):
        rng = np.random.default_rng(14)
        clips = [rng.normal(0, 4000, size=n).astype(np.float32)
                 for n in (1500, 2000, 2600)]
        params = N.init_params(toy_spec, seed=7)
        rep = TR.ten_crop_eval(toy_spec, params, clips, [0, 1, 2])
        assert rep.n_clips == 3
        assert 0.0 <= rep.accuracy <= 1.0
